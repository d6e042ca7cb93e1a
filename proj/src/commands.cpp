#include "htrvt/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include "htrvt/gradcheck.hpp"
#include "htrvt/synth.hpp"
#include "htrvt/trainer.hpp"

namespace htr::cli {
namespace {

void require_file(const std::filesystem::path& p, const char* what) {
  if (!std::filesystem::exists(p)) throw std::runtime_error(std::string(what) + " not found: " + p.string());
}

std::unique_ptr<TrainingState> load_state(const std::filesystem::path& ckpt) {
  require_file(ckpt, "checkpoint");
  return TrainingState::from_checkpoint(load_checkpoint(ckpt));
}

std::string csv_field(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

int train(const TrainArgs& a, std::ostream& out) {
  std::unique_ptr<TrainingState> state;
  std::optional<TrainConfig> cfg;
  if (!a.config.empty()) {
    require_file(a.config, "config");
    cfg = TrainConfig::load(a.config);
  }
  if (!a.resume.empty()) {
    state = load_state(a.resume);
    if (cfg && cfg->to_text() != state->config.to_text()) {
      throw std::runtime_error("config " + a.config.string() + " differs from the one stored in " + a.resume.string());
    }
    out << "resuming at iteration " << state->iteration << "\n";
  } else {
    if (!cfg) throw std::invalid_argument("train: --config is required");
    if (cfg->train_manifest.empty()) throw std::invalid_argument("config: key 'train_manifest' is required");
    const auto m = load_manifest(cfg->train_manifest);
    state = std::make_unique<TrainingState>(*cfg, build_charset(m));
  }
  const auto& c = state->config;
  if (c.train_manifest.empty()) throw std::invalid_argument("config: key 'train_manifest' is required");
  const auto train_set = load_samples(load_manifest(c.train_manifest));
  std::vector<Sample> val_set;
  if (!c.val_manifest.empty()) val_set = load_samples(load_manifest(c.val_manifest));
  out << "charset K=" << state->charset.size() << ", " << train_set.size() << " training lines, " << val_set.size()
      << " validation lines, " << state->model->params().count_scalars() << " parameters\n";
  RunOptions opt;
  opt.until = a.until;
  opt.progress = &out;
  run_training(*state, train_set, val_set, opt);
  out << "stopped at iteration " << state->iteration << "; checkpoints in " << c.out_dir << "\n";
  return 0;
}

int evaluate(const std::filesystem::path& ckpt, const std::filesystem::path& manifest, bool use_ema,
             const std::filesystem::path& csv, std::ostream& out) {
  require_file(manifest, "manifest");
  auto state = load_state(ckpt);
  const auto m = load_manifest(manifest);
  if (m.entries.empty()) throw std::invalid_argument("manifest " + manifest.string() + " has no lines");
  const auto samples = load_samples(m);
  const auto r = evaluate(*state, samples, use_ema);
  if (r.unknown_chars > 0) {
    out << "note: " << r.unknown_chars << " reference characters are outside the checkpoint charset\n";
  }
  const auto path = csv.empty() ? ckpt.parent_path() / "evaluation.csv" : csv;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "path,reference,prediction,char_edits,char_total,word_edits,word_total\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto ce = metrics::char_edits(r.predictions[i], samples[i].text);
    const auto we = metrics::word_edits(r.predictions[i], samples[i].text);
    f << csv_field(samples[i].path) << ',' << csv_field(samples[i].text) << ',' << csv_field(r.predictions[i]) << ','
      << ce.distance() << ',' << ce.reference_length << ',' << we.distance() << ',' << we.reference_length << '\n';
  }
  f << "\"TOTAL\",,," << r.rates.char_edits << ',' << r.rates.char_total << ',' << r.rates.word_edits << ','
    << r.rates.word_total << '\n';
  out << "weights " << (use_ema ? "ema" : "raw") << " lines " << samples.size() << " CER " << num(r.rates.cer)
      << " WER " << num(r.rates.wer) << "\n";
  return 0;
}

int predict(const std::filesystem::path& ckpt, const std::filesystem::path& image, bool use_ema, std::ostream& out) {
  require_file(image, "image");
  const Image img = load_pgm(image);
  auto state = load_state(ckpt);
  out << htr::predict(*state, img, use_ema).text << "\n";
  return 0;
}

int gradcheck(const GradcheckArgs& a, std::ostream& out) {
  constexpr double kPrimitiveTol = 1e-5, kModelTol = 1e-3, kCtcTol = 1e-6;
  bool ok = true;
  auto line = [&](const std::string& name, const GradcheckReport& r, double tol) {
    const bool pass = r.max_rel_error < tol;
    ok = ok && pass;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-22s max_rel_error %.3e  tol %.0e  entries %zu  %s", name.c_str(),
                  r.max_rel_error, tol, r.entries_checked, pass ? "PASS" : "FAIL");
    out << buf;
    if (!pass) out << "  worst " << r.worst_param << "[" << r.worst_index << "]";
    out << "\n";
  };
  auto checks = primitive_checks();
  if (a.inject_fault) checks.push_back(corrupted_adjoint_check());
  for (const auto& c : checks) {
    Rng rng(derive_seed(a.seed, std::hash<std::string>{}(c.name)));
    GradcheckReport worst;
    for (std::size_t i = 0; i < a.trials_per_primitive; ++i) {
      const auto r = c.run(rng);
      const auto n = worst.entries_checked + r.entries_checked;
      if (i == 0 || r.max_rel_error > worst.max_rel_error) worst = r;
      worst.entries_checked = n;
    }
    line(c.name, worst, kPrimitiveTol);
  }
  line("full_model", full_model_gradient_check(a.seed), kModelTol);
  line("ctc_loss", ctc_gradient_check(a.seed, a.ctc_instances), kCtcTol);
  out << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
  return ok ? 0 : 1;
}

int dump_attention(const DumpArgs& a, std::ostream& out) {
  require_file(a.image, "image");
  auto state = load_state(a.ckpt);
  const std::size_t blocks = state->config.encoder.blocks;
  if (a.block >= blocks) {
    throw std::invalid_argument("block index " + std::to_string(a.block) + " out of range (model has " +
                                std::to_string(blocks) + " blocks)");
  }
  const auto p = htr::predict(*state, load_pgm(a.image), a.use_ema, true);
  const auto& att = p.attention[a.block];  // [heads, L, L]
  const std::size_t heads = att.dim(0), len = att.dim(1);
  const std::size_t query = a.query.value_or(len / 2);
  if (query >= len) throw std::invalid_argument("query token " + std::to_string(query) + " out of range");
  std::vector<double> mean(len * len, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < len * len; ++i) mean[i] += att[h * len * len + i];
  }
  for (auto& v : mean) v /= static_cast<double>(heads);

  std::filesystem::create_directories(a.out_dir);
  const std::string stem = "block" + std::to_string(a.block);
  {
    std::ofstream f(a.out_dir / (stem + "_attention.csv"), std::ios::binary);
    if (!f) throw std::runtime_error("cannot write into " + a.out_dir.string());
    for (std::size_t r = 0; r < len; ++r) {
      for (std::size_t c = 0; c < len; ++c) f << (c ? "," : "") << num(mean[r * len + c]);
      f << '\n';
    }
  }
  auto normalised = [](const double* v, std::size_t rows, std::size_t cols) {
    const auto [lo, hi] = std::minmax_element(v, v + rows * cols);
    Image img(rows, cols, 0.0f);
    const double span = *hi - *lo;
    for (std::size_t i = 0; i < rows * cols; ++i) {
      img.pixels[i] = span > 0 ? static_cast<float>((v[i] - *lo) / span) : 0.0f;
    }
    return img;
  };
  save_pgm(normalised(mean.data(), len, len), a.out_dir / (stem + "_attention.pgm"));
  save_pgm(normalised(mean.data() + query * len, 1, len),
           a.out_dir / (stem + "_query" + std::to_string(query) + ".pgm"));
  out << "wrote " << len << "x" << len << " head-averaged attention (" << heads << " heads) and the query "
      << query << " strip to " << a.out_dir.string() << "\n";
  return 0;
}

int synth(const SynthArgs& a, std::ostream& out) {
  SynthConfig cfg;
  cfg.vary = a.vary;
  const auto lines = synth_lines(a.train_lines + a.val_lines, cfg, a.seed);
  const std::vector<SynthLine> train(lines.begin(), lines.begin() + static_cast<long>(a.train_lines));
  write_synth_corpus(train, a.out_dir, "train.tsv", "train_");
  out << "wrote " << train.size() << " lines to " << (a.out_dir / "train.tsv").string() << "\n";
  if (a.val_lines > 0) {
    const std::vector<SynthLine> val(lines.begin() + static_cast<long>(a.train_lines), lines.end());
    write_synth_corpus(val, a.out_dir, "val.tsv", "val_");
    out << "wrote " << val.size() << " lines to " << (a.out_dir / "val.tsv").string() << "\n";
  }
  return 0;
}

}  // namespace htr::cli
