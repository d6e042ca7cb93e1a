#include "htrvt/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "htrvt/ctc.hpp"
#include "htrvt/ops.hpp"

namespace htr {
namespace {

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_exact(const std::string& s) {
  if (s == "inf") return INFINITY;
  return std::stod(s);
}

std::uint64_t parse_u64(const std::string& s) { return std::stoull(s); }

// Restores a slice of the model from named tensors, insisting on exact shapes.
void assign(Tensor<float>& dst, const Tensor<float>& src, const std::string& name) {
  if (!dst.same_shape(src)) {
    throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) +
                             ", model expects " + shape_str(dst.shape()));
  }
  dst = src;
}

}  // namespace

std::vector<std::size_t> Sampler::next(std::size_t count, std::size_t size) {
  if (size == 0) throw std::invalid_argument("sampler: empty dataset");
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    if (order.size() != size || cursor >= order.size()) {
      order.resize(size);
      for (std::size_t i = 0; i < size; ++i) order[i] = i;
      for (std::size_t i = size; i-- > 1;) std::swap(order[i], order[rng.uniform_int(0, i)]);
      cursor = 0;
      ++epoch;
    }
    out.push_back(order[cursor++]);
  }
  return out;
}

TrainingState::TrainingState(TrainConfig cfg, Charset cs)
    : config(std::move(cfg)),
      charset(std::move(cs)),
      model(std::make_unique<HtrModel<float>>(config.model(charset.num_classes()), derive_seed(config.seed, 0))),
      adam(model->params(), config.adamw),
      ema(model->params(), config.ema_decay) {
  sampler.rng = Rng(derive_seed(config.seed, 3));
}

Checkpoint TrainingState::to_checkpoint() const {
  Checkpoint c;
  c.charset = charset.to_utf8();
  c.config = config.to_text();
  c.iteration = iteration;
  std::string order;
  for (std::size_t i = 0; i < sampler.order.size(); ++i) order += (i ? " " : "") + std::to_string(sampler.order[i]);
  c.state = {{"adam.step", std::to_string(adam.step)},
             {"sampler.rng", sampler.rng.state()},
             {"sampler.epoch", std::to_string(sampler.epoch)},
             {"sampler.cursor", std::to_string(sampler.cursor)},
             {"sampler.order", order},
             {"nonfinite_streak", std::to_string(nonfinite_streak)},
             {"best_val_cer", std::isinf(best_val_cer) ? "inf" : exact(best_val_cer)},
             {"best_iter", std::to_string(best_iter)}};
  const auto& ps = model->params();
  const auto params = ps.params();
  const auto bufs = ps.buffers();
  for (auto* p : params) c.tensors.emplace_back("param/" + p->name, p->value);
  for (auto* b : bufs) c.tensors.emplace_back("buffer/" + b->name, b->value);
  for (std::size_t i = 0; i < params.size(); ++i) c.tensors.emplace_back("adam.m/" + params[i]->name, adam.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) c.tensors.emplace_back("adam.v/" + params[i]->name, adam.v[i]);
  for (std::size_t i = 0; i < params.size(); ++i) c.tensors.emplace_back("ema.param/" + params[i]->name, ema.params[i]);
  for (std::size_t i = 0; i < bufs.size(); ++i) c.tensors.emplace_back("ema.buffer/" + bufs[i]->name, ema.buffers[i]);
  return c;
}

std::unique_ptr<TrainingState> TrainingState::from_checkpoint(const Checkpoint& c) {
  auto cfg = TrainConfig::parse(c.config);
  auto s = std::make_unique<TrainingState>(std::move(cfg), Charset::from_utf8(c.charset));
  s->iteration = c.iteration;

  std::map<std::string, Tensor<float>*> slots;
  auto& ps = s->model->params();
  const auto params = ps.params();
  const auto bufs = ps.buffers();
  for (std::size_t i = 0; i < params.size(); ++i) {
    slots["param/" + params[i]->name] = &params[i]->value;
    slots["adam.m/" + params[i]->name] = &s->adam.m[i];
    slots["adam.v/" + params[i]->name] = &s->adam.v[i];
    slots["ema.param/" + params[i]->name] = &s->ema.params[i];
  }
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    slots["buffer/" + bufs[i]->name] = &bufs[i]->value;
    slots["ema.buffer/" + bufs[i]->name] = &s->ema.buffers[i];
  }
  std::vector<std::string> unknown;
  std::set<std::string> filled;
  for (const auto& [name, t] : c.tensors) {
    const auto it = slots.find(name);
    if (it == slots.end()) {
      unknown.push_back(name);
      continue;
    }
    if (!filled.insert(name).second) throw std::runtime_error("checkpoint repeats tensor '" + name + "'");
    assign(*it->second, t, name);
  }
  auto join = [](const std::vector<std::string>& v) {
    std::string out;
    for (const auto& n : v) out += (out.empty() ? "" : ", ") + n;
    return out;
  };
  if (!unknown.empty()) throw std::runtime_error("checkpoint has unknown tensors: " + join(unknown));
  std::vector<std::string> missing;
  for (const auto& [name, _] : slots) {
    if (!filled.count(name)) missing.push_back(name);
  }
  if (!missing.empty()) throw std::runtime_error("checkpoint lacks tensors: " + join(missing));

  s->adam.step = parse_u64(c.state_value("adam.step"));
  s->sampler.rng.set_state(c.state_value("sampler.rng"));
  s->sampler.epoch = parse_u64(c.state_value("sampler.epoch"));
  s->sampler.cursor = parse_u64(c.state_value("sampler.cursor"));
  s->sampler.order.clear();
  std::istringstream order(c.state_value("sampler.order"));
  for (std::size_t v; order >> v;) s->sampler.order.push_back(v);
  s->nonfinite_streak = static_cast<std::uint32_t>(parse_u64(c.state_value("nonfinite_streak")));
  s->best_val_cer = parse_exact(c.state_value("best_val_cer"));
  s->best_iter = parse_u64(c.state_value("best_iter"));
  return s;
}

Batch next_training_batch(TrainingState& s, const std::vector<Sample>& data) {
  const auto idx = s.sampler.next(s.config.batch_size, data.size());
  std::vector<const Sample*> picked;
  std::vector<std::uint64_t> seeds;
  for (std::size_t slot = 0; slot < idx.size(); ++slot) {
    picked.push_back(&data[idx[slot]]);
    seeds.push_back(derive_seed(s.config.seed, s.iteration, 2, slot));
  }
  BatchOptions opt;
  opt.height = s.config.extractor.input_h;
  opt.width = s.config.extractor.input_w;
  opt.augment = s.config.augment;
  return make_batch(picked, seeds, s.charset, Mode::Train, opt);
}

StepOutcome train_step(TrainingState& s, const Batch& batch) {
  StepOutcome out;
  out.lr = optim::lr_at(s.iteration, s.config.schedule);
  const std::size_t n = batch.labels.size();
  std::vector<SpanMask> masks;
  if (s.config.mask.ratio > 0.0) {
    Rng rng(derive_seed(s.config.seed, s.iteration, 1));
    for (std::size_t i = 0; i < n; ++i) {
      masks.push_back(sample_span_mask(s.model->token_count(), s.config.mask, rng));
      out.masked_tokens += masks.back().popcount();
    }
  }
  auto& model = *s.model;
  const optim::LossClosure closure = [&](bool update_running) {
    Tape<float> t;
    const auto fwd = model.forward(t, batch.images, masks, RunMode::train(update_running));
    const auto loss = ctc::ctc_loss_mean(fwd.logits, batch.labels);
    const double value = loss.value().item();
    if (std::isfinite(value)) t.backward(loss);
    return value;
  };
  const auto r = optim::sam_step<float>(model.params(), closure, s.config.sam, s.adam, out.lr);
  out.loss = r.loss;
  out.stepped = r.stepped;
  if (r.stepped) {
    optim::ema_update(s.ema, model.params());
    s.nonfinite_streak = 0;
  } else {
    ++s.nonfinite_streak;
    std::cerr << "warning: non-finite loss at iteration " << s.iteration << ", step skipped (" << s.nonfinite_streak
              << " in a row)\n";
  }
  ++s.iteration;
  if (s.nonfinite_streak >= kMaxNonFiniteSteps) {
    throw std::runtime_error("training aborted: " + std::to_string(kMaxNonFiniteSteps) +
                             " consecutive non-finite losses ending at iteration " + std::to_string(s.iteration));
  }
  return out;
}

EvalResult evaluate(TrainingState& s, const std::vector<Sample>& data, bool use_ema) {
  if (data.empty()) throw std::invalid_argument("evaluate: no samples");
  if (use_ema) optim::ema_swap(s.ema, s.model->params());
  EvalResult r;
  try {
    BatchOptions opt;
    opt.height = s.config.extractor.input_h;
    opt.width = s.config.extractor.input_w;
    std::vector<std::pair<std::string, std::string>> pairs;
    const std::size_t chunk = std::max<std::size_t>(1, s.config.batch_size);
    for (std::size_t start = 0; start < data.size(); start += chunk) {
      std::vector<const Sample*> picked;
      for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) picked.push_back(&data[i]);
      const auto batch = make_batch(picked, {}, s.charset, Mode::Eval, opt);
      Tape<float> t;
      const auto logits = s.model->forward(t, batch.images, {}, RunMode::eval()).logits.value();
      const std::size_t len = logits.dim(1), k = logits.dim(2);
      for (std::size_t i = 0; i < batch.labels.size(); ++i) {
        Tensor<float> one({len, k});
        std::copy_n(logits.ptr() + i * len * k, len * k, one.ptr());
        const auto text = ctc::greedy_decode(ad::log_softmax_rows_value(one), s.charset);
        r.unknown_chars += batch.unknown[i].size();
        r.predictions.push_back(text);
        pairs.emplace_back(text, batch.texts[i]);
      }
    }
    r.rates = metrics::corpus_rates(pairs);
  } catch (...) {
    if (use_ema) optim::ema_swap(s.ema, s.model->params());
    throw;
  }
  if (use_ema) optim::ema_swap(s.ema, s.model->params());
  return r;
}

Prediction predict(TrainingState& s, const Image& image, bool use_ema, bool keep_attention) {
  const Image prepared = prepare(image, s.config.extractor.input_h, s.config.extractor.input_w);
  Tensor<float> x({1, 1, prepared.height, prepared.width}, prepared.pixels);
  if (use_ema) optim::ema_swap(s.ema, s.model->params());
  Prediction p;
  try {
    Tape<float> t;
    const auto fwd = s.model->forward(t, x, {}, RunMode::eval(), keep_attention);
    const auto& logits = fwd.logits.value();
    p.log_probs = ad::log_softmax_rows_value(logits.reshaped({logits.dim(1), logits.dim(2)}));
    p.text = ctc::greedy_decode(p.log_probs, s.charset);
    for (const auto& a : fwd.attention) {
      const auto& v = a.value();
      p.attention.push_back(v.reshaped({v.dim(1), v.dim(2), v.dim(3)}));
    }
  } catch (...) {
    if (use_ema) optim::ema_swap(s.ema, s.model->params());
    throw;
  }
  if (use_ema) optim::ema_swap(s.ema, s.model->params());
  return p;
}

void run_training(TrainingState& s, const std::vector<Sample>& train, const std::vector<Sample>& val,
                  const RunOptions& opt) {
  const auto& cfg = s.config;
  const std::uint64_t until = opt.until.value_or(cfg.schedule.total_iters);
  if (until > cfg.schedule.total_iters) {
    throw std::invalid_argument("run_training: stop iteration " + std::to_string(until) + " beyond total_iters " +
                                std::to_string(cfg.schedule.total_iters));
  }
  if (train.empty()) throw std::invalid_argument("run_training: empty training set");
  const std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  const auto log_path = dir / "metrics.csv";
  const bool fresh = !std::filesystem::exists(log_path) || std::filesystem::file_size(log_path) == 0;
  std::ofstream log(log_path, std::ios::app | std::ios::binary);
  if (!log) throw std::runtime_error("cannot open metric log " + log_path.string());
  if (fresh) log << "iter,loss,lr,val_cer,val_wer\n";

  while (s.iteration < until) {
    const auto batch = next_training_batch(s, train);
    const auto step = train_step(s, batch);
    const std::uint64_t it = s.iteration;
    std::string val_cer, val_wer;
    if (!val.empty() && (it % cfg.val_every == 0 || it == cfg.schedule.total_iters)) {
      const auto r = evaluate(s, val, true);
      val_cer = exact(r.rates.cer);
      val_wer = exact(r.rates.wer);
      if (r.rates.cer < s.best_val_cer) {
        s.best_val_cer = r.rates.cer;
        s.best_iter = it;
        save_checkpoint(s.to_checkpoint(), dir / "best.ckpt");
      }
      if (opt.progress) {
        *opt.progress << "iter " << it << " loss " << step.loss << " val_cer " << r.rates.cer << " val_wer "
                      << r.rates.wer << "\n";
      }
    }
    if (it % cfg.log_every == 0 || !val_cer.empty()) {
      log << it << ',' << exact(step.loss) << ',' << exact(step.lr) << ',' << val_cer << ',' << val_wer << '\n';
      log.flush();
    }
    if (it % cfg.checkpoint_every == 0 || it == until) {
      const auto ckpt = s.to_checkpoint();
      save_checkpoint(ckpt, dir / "last.ckpt");
      if (cfg.keep_snapshots) {
        char name[32];
        std::snprintf(name, sizeof name, "iter_%06llu.ckpt", static_cast<unsigned long long>(it));
        save_checkpoint(ckpt, dir / name);
      }
    }
  }
}

}  // namespace htr
