#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "htrvt/commands.hpp"
#include "htrvt/ctc.hpp"
#include "htrvt/synth.hpp"
#include "htrvt/trainer.hpp"

using namespace htr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("htrvt_test_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string config_error(const std::string& text) {
  try {
    TrainConfig::parse(text);
  } catch (const std::invalid_argument& e) {
    return e.what();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct Corpus {
  fs::path dir;
  std::vector<Sample> samples;
  Charset charset;
};

Corpus make_corpus(const std::string& name, std::size_t lines) {
  Corpus c;
  c.dir = scratch(name);
  const auto m = write_synth_corpus(synth_lines(lines, {}, 11), c.dir, "train.tsv", "s");
  c.samples = load_samples(m);
  c.charset = build_charset(m);
  return c;
}

TrainConfig small_config(const fs::path& out) {
  auto c = TrainConfig::tiny();
  c.seed = 5;
  c.batch_size = 4;
  c.schedule.warmup_iters = 10;
  c.schedule.total_iters = 200;
  c.out_dir = out.string();
  c.val_every = 10;
  c.checkpoint_every = 10;
  return c;
}

std::vector<std::uint8_t> state_bytes(const TrainingState& s) { return encode_checkpoint(s.to_checkpoint()); }

}  // namespace

TEST(Config, FullDefaults) {
  const auto c = TrainConfig::full();
  EXPECT_EQ(c.encoder.blocks, 4u);
  EXPECT_EQ(c.encoder.dim, 768u);
  EXPECT_EQ(c.encoder.heads, 6u);
  EXPECT_EQ(c.encoder.ffn, 3072u);
  EXPECT_DOUBLE_EQ(c.mask.ratio, 0.4);
  EXPECT_EQ(c.mask.span, 8u);
  EXPECT_DOUBLE_EQ(c.schedule.max_lr, 1e-3);
  EXPECT_EQ(c.schedule.warmup_iters, 1000u);
  EXPECT_EQ(c.schedule.total_iters, 100000u);
  EXPECT_DOUBLE_EQ(c.adamw.weight_decay, 0.5);
  EXPECT_DOUBLE_EQ(c.ema_decay, 0.9999);
  EXPECT_DOUBLE_EQ(c.sam.rho, 0.05);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.extractor.input_h, 64u);
  EXPECT_EQ(c.extractor.input_w, 512u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TinyProfile) {
  const auto c = TrainConfig::tiny();
  EXPECT_EQ(c.encoder.dim, 32u);
  EXPECT_EQ(c.encoder.heads, 2u);
  EXPECT_EQ(c.encoder.blocks, 1u);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_EQ(c.mask.span, 2u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ProfileAppliesBeforeOverridesWherever) {
  const auto c = TrainConfig::parse("# comment\n\nblocks = 2   # trailing\nprofile = tiny\nseed = 9\n");
  EXPECT_EQ(c.profile, "tiny");
  EXPECT_EQ(c.encoder.blocks, 2u);
  EXPECT_EQ(c.encoder.dim, 32u);
  EXPECT_EQ(c.seed, 9u);
}

TEST(Config, ErrorsNameKeyAndLine) {
  auto e = config_error("seed = 1\nbogus_key = 3\n");
  EXPECT_NE(e.find("bogus_key"), std::string::npos) << e;
  EXPECT_NE(e.find("line 2"), std::string::npos) << e;
  e = config_error("seed = 1\nseed = 2\n");
  EXPECT_NE(e.find("seed"), std::string::npos) << e;
  EXPECT_NE(e.find("line 2"), std::string::npos) << e;
  e = config_error("mask_ratio = lots\n");
  EXPECT_NE(e.find("mask_ratio"), std::string::npos) << e;
  EXPECT_NE(config_error("heads\n"), "");
  EXPECT_NE(config_error("profile = huge\n"), "");
  EXPECT_NE(config_error("augment = maybe\n"), "");
  EXPECT_NE(config_error("cnn_widths = 8,16\n"), "");
}

TEST(Config, InvalidCombinationsRejected) {
  EXPECT_NE(config_error("profile = tiny\ndim = 30\n"), "");  // not divisible by heads... or mismatched widths
  EXPECT_NE(config_error("mask_ratio = 1.5\n"), "");
  EXPECT_NE(config_error("input_h = 30\n"), "");
}

TEST(Config, TextRoundTrip) {
  auto c = TrainConfig::tiny();
  c.seed = 123;
  c.mask.ratio = 0.25;
  c.adamw.weight_decay = 0.1 + 0.2;  // not representable in short decimal
  c.augment.enabled = false;
  c.train_manifest = "/data/train.tsv";
  const auto text = c.to_text();
  const auto back = TrainConfig::parse(text);
  EXPECT_EQ(back.to_text(), text);
  EXPECT_EQ(back.adamw.weight_decay, c.adamw.weight_decay);
  EXPECT_EQ(back.seed, 123u);
  EXPECT_FALSE(back.augment.enabled);
}

TEST(Config, RelativePathsResolveAgainstConfigDir) {
  const auto c = TrainConfig::parse("train_manifest = data/a.tsv\nout_dir = run\n", "/x/y");
  EXPECT_EQ(fs::path(c.train_manifest), fs::path("/x/y/data/a.tsv"));
  EXPECT_EQ(fs::path(c.out_dir), fs::path("/x/y/run"));
}

TEST(Checkpoint, EncodeDecodeRoundTrip) {
  Checkpoint c;
  c.charset = "abc";
  c.config = "seed = 1\n";
  c.iteration = 42;
  c.state = {{"k", "v"}, {"empty", ""}};
  Tensor<float> t({2, 3});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.1f * static_cast<float>(i) - 0.2f;
  c.tensors = {{"w", t}, {"scalar", Tensor<float>({1})}};
  const auto bytes = encode_checkpoint(c);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "HTRVT001");
  const auto back = decode_checkpoint(bytes);
  EXPECT_TRUE(back == c);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptInputRejected) {
  Checkpoint c;
  c.tensors = {{"w", Tensor<float>({4})}};
  auto bytes = encode_checkpoint(c);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), std::runtime_error);
  auto cut = bytes;
  cut.pop_back();
  EXPECT_THROW(decode_checkpoint(cut), std::runtime_error);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), std::runtime_error);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), std::runtime_error);
}

TEST(Checkpoint, StateSaveLoadSaveIsByteIdentical) {
  const auto corpus = make_corpus("roundtrip", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  for (int i = 0; i < 3; ++i) train_step(s, next_training_batch(s, corpus.samples));
  const auto dir = scratch("roundtrip_ckpt");
  save_checkpoint(s.to_checkpoint(), dir / "a.ckpt");
  const auto restored = TrainingState::from_checkpoint(load_checkpoint(dir / "a.ckpt"));
  save_checkpoint(restored->to_checkpoint(), dir / "b.ckpt");
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(restored->iteration, 3u);
}

TEST(Checkpoint, UnknownAndMissingTensorsListed) {
  const auto corpus = make_corpus("names", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  auto c = s.to_checkpoint();
  c.tensors.push_back({"param/encoder.block9.mystery", Tensor<float>({2})});
  try {
    TrainingState::from_checkpoint(c);
    FAIL() << "unknown tensor accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.block9.mystery"), std::string::npos) << e.what();
  }
  c.tensors.pop_back();
  const auto dropped = c.tensors.front().first;
  c.tensors.erase(c.tensors.begin());
  try {
    TrainingState::from_checkpoint(c);
    FAIL() << "missing tensor accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find(dropped), std::string::npos) << e.what();
  }
}

TEST(Sampler, EveryIndexOncePerEpoch) {
  Sampler s{Rng(3)};
  for (int epoch = 0; epoch < 3; ++epoch) {
    const auto idx = s.next(10, 10);
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 10u);
  }
  EXPECT_EQ(s.epoch, 3u);
}

TEST(Trainer, SameSeedSameLossesAndState) {
  const auto corpus = make_corpus("determinism", 6);
  const auto cfg = small_config(corpus.dir / "out");
  TrainingState a(cfg, corpus.charset), b(cfg, corpus.charset);
  for (int i = 0; i < 8; ++i) {
    const auto la = train_step(a, next_training_batch(a, corpus.samples));
    const auto lb = train_step(b, next_training_batch(b, corpus.samples));
    ASSERT_EQ(la.loss, lb.loss) << "step " << i;
    EXPECT_GT(la.masked_tokens, 0u);
  }
  EXPECT_EQ(state_bytes(a), state_bytes(b));
}

TEST(Trainer, DegenerateConfigIsPlainAdamWOnCtc) {
  const auto corpus = make_corpus("degenerate", 4);
  auto cfg = small_config(corpus.dir / "out");
  cfg.sam.rho = 0.0;
  cfg.mask.ratio = 0.0;
  cfg.augment.enabled = false;
  TrainingState s(cfg, corpus.charset);
  TrainingState manual(cfg, corpus.charset);
  optim::AdamWState<float> adam(manual.model->params(), cfg.adamw);
  for (int i = 0; i < 3; ++i) {
    const auto batch = next_training_batch(s, corpus.samples);
    const auto lr = optim::lr_at(s.iteration, cfg.schedule);
    const auto out = train_step(s, batch);

    auto& ps = manual.model->params();
    ps.zero_grad();
    Tape<float> t;
    const auto fwd = manual.model->forward(t, batch.images, {}, RunMode::train());
    const auto loss = ctc::ctc_loss_mean(fwd.logits, batch.labels);
    t.backward(loss);
    optim::adamw_step(ps, adam, lr);
    EXPECT_EQ(out.loss, static_cast<double>(loss.value().item()));
  }
  const auto a = s.model->params().params();
  const auto b = manual.model->params().params();
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i]->value.numel(); ++j) {
      ASSERT_EQ(a[i]->value[j], b[i]->value[j]) << a[i]->name << "[" << j << "]";
    }
  }
}

TEST(Trainer, LossMovingAverageDecreases) {
  const auto corpus = make_corpus("decrease", 8);
  auto cfg = small_config(corpus.dir / "out");
  cfg.batch_size = 8;
  std::vector<double> losses;
  TrainingState s(cfg, corpus.charset);
  for (int i = 0; i < 200; ++i) losses.push_back(train_step(s, next_training_batch(s, corpus.samples)).loss);
  double prev = INFINITY;
  for (std::size_t start = 0; start + 50 <= losses.size(); start += 50) {
    double avg = 0.0;
    for (std::size_t i = start; i < start + 50; ++i) avg += losses[i] / 50.0;
    EXPECT_LT(avg, prev) << "window starting at " << start;
    prev = avg;
  }
}

TEST(Trainer, NonFiniteLossesSkipThenAbort) {
  const auto corpus = make_corpus("nonfinite", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  auto batch = next_training_batch(s, corpus.samples);
  batch.images[0] = NAN;
  const auto before = state_bytes(s);
  const auto r = train_step(s, batch);
  EXPECT_FALSE(r.stepped);
  EXPECT_EQ(s.nonfinite_streak, 1u);
  EXPECT_EQ(s.iteration, 1u);
  const auto p0 = s.model->params().params()[0];
  TrainingState fresh(small_config(corpus.dir / "out"), corpus.charset);
  EXPECT_EQ(p0->value[0], fresh.model->params().params()[0]->value[0]);
  (void)before;
  train_step(s, batch);
  EXPECT_THROW(train_step(s, batch), std::runtime_error);
}

TEST(Trainer, EvaluateLeavesStateUntouched) {
  const auto corpus = make_corpus("evalpure", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  for (int i = 0; i < 3; ++i) train_step(s, next_training_batch(s, corpus.samples));
  const auto before = state_bytes(s);
  const auto ema = evaluate(s, corpus.samples, true);
  const auto raw = evaluate(s, corpus.samples, false);
  predict(s, corpus.samples[0].image, true, true);
  EXPECT_EQ(state_bytes(s), before);
  EXPECT_EQ(ema.predictions.size(), 4u);
  EXPECT_EQ(raw.predictions.size(), 4u);
}

TEST(Trainer, ResumeReproducesUninterruptedLog) {
  const auto corpus = make_corpus("resume", 6);
  auto cfg = small_config(corpus.dir / "full");
  cfg.schedule.total_iters = 40;
  {
    TrainingState s(cfg, corpus.charset);
    run_training(s, corpus.samples, corpus.samples, {});
  }
  auto cfg2 = cfg;
  cfg2.out_dir = (corpus.dir / "split").string();
  {
    TrainingState s(cfg2, corpus.charset);
    RunOptions o;
    o.until = 15;
    run_training(s, corpus.samples, corpus.samples, o);
  }
  {
    auto s = TrainingState::from_checkpoint(load_checkpoint(corpus.dir / "split" / "last.ckpt"));
    EXPECT_EQ(s->iteration, 15u);
    run_training(*s, corpus.samples, corpus.samples, {});
  }
  const auto log = slurp(corpus.dir / "full" / "metrics.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "iter,loss,lr,val_cer,val_wer");
  EXPECT_EQ(log, slurp(corpus.dir / "split" / "metrics.csv"));
  const auto a = load_checkpoint(corpus.dir / "full" / "last.ckpt");
  const auto b = load_checkpoint(corpus.dir / "split" / "last.ckpt");
  EXPECT_TRUE(a.tensors == b.tensors);
  EXPECT_TRUE(a.state == b.state);
  EXPECT_TRUE(fs::exists(corpus.dir / "full" / "best.ckpt"));
}

TEST(Trainer, UntilBeyondTotalRejected) {
  const auto corpus = make_corpus("until", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  RunOptions o;
  o.until = 1000;
  EXPECT_THROW(run_training(s, corpus.samples, {}, o), std::invalid_argument);
}

TEST(Synth, GlyphsAreDistinct) {
  SynthConfig cfg;
  cfg.vary = false;
  std::set<std::vector<float>> seen;
  for (char ch : cfg.alphabet) seen.insert(render_line(std::string(1, ch), cfg, 0).pixels);
  EXPECT_EQ(seen.size(), cfg.alphabet.size());
}

TEST(Synth, LinesDistinctAndDeterministic) {
  const auto a = synth_lines(64, {}, 3);
  const auto b = synth_lines(64, {}, 3);
  std::set<std::string> texts;
  for (std::size_t i = 0; i < a.size(); ++i) {
    texts.insert(a[i].text);
    EXPECT_EQ(a[i].text.size(), 5u);
    EXPECT_EQ(a[i].image.pixels, b[i].image.pixels);
  }
  EXPECT_EQ(texts.size(), 64u);
  EXPECT_THROW(render_line("xyz", {}, 0), std::invalid_argument);
}

TEST(Commands, EvaluateRejectsEmptyManifestAndMissingFiles) {
  const auto dir = scratch("cmd_eval");
  std::ofstream(dir / "empty.tsv").close();
  const auto corpus = make_corpus("cmd_eval_corpus", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  save_checkpoint(s.to_checkpoint(), dir / "m.ckpt");
  std::ostringstream out;
  EXPECT_THROW(cli::evaluate(dir / "m.ckpt", dir / "empty.tsv", true, {}, out), std::invalid_argument);
  try {
    cli::evaluate(dir / "m.ckpt", dir / "absent.tsv", true, {}, out);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("absent.tsv"), std::string::npos);
  }
}

TEST(Commands, EvaluateWritesPerLineCsvWithTotal) {
  const auto corpus = make_corpus("cmd_csv", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  save_checkpoint(s.to_checkpoint(), corpus.dir / "m.ckpt");
  std::ostringstream out;
  EXPECT_EQ(cli::evaluate(corpus.dir / "m.ckpt", corpus.dir / "train.tsv", false, corpus.dir / "e.csv", out), 0);
  EXPECT_NE(out.str().find("CER"), std::string::npos);
  std::ifstream f(corpus.dir / "e.csv");
  std::vector<std::string> rows;
  for (std::string line; std::getline(f, line);) rows.push_back(line);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows.back().rfind("\"TOTAL\"", 0), 0u);
}

TEST(Commands, PredictWhiteImageSucceeds) {
  const auto corpus = make_corpus("cmd_predict", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  save_checkpoint(s.to_checkpoint(), corpus.dir / "m.ckpt");
  save_pgm(Image(32, 100, 1.0f), corpus.dir / "white.pgm");
  std::ostringstream a, b;
  EXPECT_EQ(cli::predict(corpus.dir / "m.ckpt", corpus.dir / "white.pgm", true, a), 0);
  EXPECT_EQ(cli::predict(corpus.dir / "m.ckpt", corpus.dir / "white.pgm", true, b), 0);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().back(), '\n');
  EXPECT_THROW(cli::predict(corpus.dir / "m.ckpt", corpus.dir / "nope.pgm", true, a), std::runtime_error);
}

TEST(Commands, DumpAttentionRowsAreDistributions) {
  const auto corpus = make_corpus("cmd_dump", 4);
  TrainingState s(small_config(corpus.dir / "out"), corpus.charset);
  save_checkpoint(s.to_checkpoint(), corpus.dir / "m.ckpt");
  cli::DumpArgs a;
  a.ckpt = corpus.dir / "m.ckpt";
  a.image = corpus.dir / "images" / "s0.pgm";
  a.out_dir = corpus.dir / "att";
  a.query = 3;
  std::ostringstream out;
  ASSERT_EQ(cli::dump_attention(a, out), 0);
  const auto map = load_pgm(a.out_dir / "block0_attention.pgm");
  EXPECT_EQ(map.height, 32u);
  EXPECT_EQ(map.width, 32u);
  EXPECT_EQ(load_pgm(a.out_dir / "block0_query3.pgm").width, 32u);
  std::ifstream csv(a.out_dir / "block0_attention.csv");
  std::size_t rows = 0;
  for (std::string line; std::getline(csv, line); ++rows) {
    double sum = 0.0;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) sum += std::stod(cell);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  EXPECT_EQ(rows, 32u);
  a.block = 1;
  EXPECT_THROW(cli::dump_attention(a, out), std::invalid_argument);
  a.block = 0;
  a.query = 32;
  EXPECT_THROW(cli::dump_attention(a, out), std::invalid_argument);
}
