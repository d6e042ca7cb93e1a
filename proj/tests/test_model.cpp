#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "htrvt/ctc.hpp"
#include "htrvt/gradcheck.hpp"
#include "htrvt/model.hpp"
#include "htrvt/ops.hpp"

using namespace htr;

namespace {

ExtractorConfig small_extractor(std::size_t h, std::size_t w, std::size_t dim) {
  ExtractorConfig c;
  c.input_h = h;
  c.input_w = w;
  c.stem = 4;
  c.widths = {4, 8, 8};
  c.blocks_per_stage = 1;
  c.dim = dim;
  return c;
}

EncoderConfig small_encoder(std::size_t dim, std::size_t heads, std::size_t blocks) {
  EncoderConfig c;
  c.dim = dim;
  c.heads = heads;
  c.blocks = blocks;
  c.ffn = 2 * dim;
  return c;
}

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Extractor, SingleConvParameterCount) {
  ParameterSet<float> ps;
  Rng rng(1);
  Conv2d<float> conv(ps, "c", 1, 64, 3, 1, 1, 1, rng);
  EXPECT_EQ(ps.count_scalars(), 576u);
}

TEST(Extractor, TokenShapeAtFullResolution) {
  ParameterSet<float> ps;
  Rng rng(2);
  FeatureExtractor<float> ex(ps, small_extractor(64, 512, 24), rng);
  Tape<float> t;
  const auto y = ex(t, t.constant(random_tensor<float>({2, 1, 64, 512}, rng, 0, 1)), RunMode::train());
  EXPECT_EQ(y.shape(), (Shape{2, 128, 24}));
  for (float v : y.value().data()) ASSERT_TRUE(std::isfinite(v));
  EXPECT_EQ(ex.backbone(t, t.constant(Tensor<float>({1, 1, 64, 512}, 1.0f)), RunMode::eval()).shape(),
            (Shape{1, 8, 4, 128}));
}

TEST(Extractor, RejectsWrongResolution) {
  ParameterSet<float> ps;
  Rng rng(3);
  FeatureExtractor<float> ex(ps, small_extractor(32, 128, 8), rng);
  Tape<float> t;
  EXPECT_THROW(ex(t, t.constant(Tensor<float>({1, 1, 32, 132})), RunMode::eval()), std::invalid_argument);
  EXPECT_THROW(ex(t, t.constant(Tensor<float>({1, 3, 32, 128})), RunMode::eval()), std::invalid_argument);
}

TEST(Extractor, EvalIsDeterministicAndBatchInvariant) {
  ParameterSet<double> ps;
  Rng rng(4);
  FeatureExtractor<double> ex(ps, small_extractor(32, 64, 8), rng);
  // Move the running statistics away from their initial values first.
  for (int i = 0; i < 3; ++i) {
    Tape<double> t;
    ex(t, t.constant(random_tensor<double>({4, 1, 32, 64}, rng, 0, 1)), RunMode::train());
  }
  const auto batch = random_tensor<double>({3, 1, 32, 64}, rng, 0, 1);
  Tape<double> t;
  const auto a = ex(t, t.constant(batch), RunMode::eval()).value();
  const auto b = ex(t, t.constant(batch), RunMode::eval()).value();
  EXPECT_EQ(a.storage(), b.storage());
  Tensor<double> single({1, 1, 32, 64});
  std::copy(batch.ptr() + 32 * 64, batch.ptr() + 2 * 32 * 64, single.ptr());
  const auto c = ex(t, t.constant(single), RunMode::eval()).value();
  const std::size_t per = 16 * 8;
  for (std::size_t i = 0; i < per; ++i) ASSERT_NEAR(c[i], a[per + i], 1e-6);
}

TEST(Encoder, SinusoidalPositions) {
  const auto pe = sinusoidal_positions<double>(16, 8);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(pe.at({0, j}), j % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(pe.at({1, 0}), 0.8415, 1e-4);
  EXPECT_DOUBLE_EQ(pe.at({1, 0}), std::sin(1.0));
  EXPECT_DOUBLE_EQ(pe.at({3, 5}), std::cos(3.0 / std::pow(10000.0, 4.0 / 8.0)));
  for (double v : pe.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(sinusoidal_positions<double>(4, 7), std::invalid_argument);
}

TEST(Encoder, AttentionRowsAreDistributions) {
  ParameterSet<double> ps;
  Rng rng(5);
  VitEncoder<double> enc(ps, small_encoder(16, 2, 2), 5, rng);
  Tape<double> t;
  const auto out = enc(t, t.constant(random_tensor<double>({2, 7, 16}, rng)), true);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 7, 5}));
  ASSERT_EQ(out.attention.size(), 2u);
  for (const auto& a : out.attention) {
    ASSERT_EQ(a.shape(), (Shape{2, 2, 7, 7}));
    const auto& v = a.value();
    for (std::size_t r = 0; r < v.numel() / 7; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(v[r * 7 + j], 0.0);
        s += v[r * 7 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Encoder, SingleTokenAttendsToItself) {
  ParameterSet<double> ps;
  Rng rng(6);
  VitEncoder<double> enc(ps, small_encoder(8, 2, 1), 3, rng);
  Tape<double> t;
  const auto out = enc(t, t.constant(random_tensor<double>({1, 1, 8}, rng)), true);
  for (double v : out.attention[0].value().data()) EXPECT_EQ(v, 1.0);
}

TEST(Encoder, EightyClassHead) {
  ParameterSet<float> ps;
  Rng rng(7);
  VitEncoder<float> enc(ps, small_encoder(8, 2, 1), 80, rng);
  Tape<float> t;
  EXPECT_EQ(enc(t, t.constant(Tensor<float>({1, 128, 8}))).logits.shape(), (Shape{1, 128, 80}));
}

TEST(Encoder, ZeroedBlockIsIdentity) {
  ParameterSet<double> ps;
  Rng rng(8);
  const auto cfg = small_encoder(8, 2, 1);
  EncoderBlock<double> block(ps, "b", cfg, rng);
  for (const char* name : {"b.attn.out.weight", "b.attn.out.bias", "b.fc2.weight", "b.fc2.bias"}) {
    ps.find(name)->value.fill(0.0);
  }
  Tape<double> t;
  const auto x = random_tensor<double>({2, 5, 8}, rng);
  EXPECT_EQ(block(t, t.constant(x)).value().storage(), x.storage());
}

TEST(Encoder, PermutationEquivariantWithoutPositions) {
  ParameterSet<double> ps;
  Rng rng(9);
  VitEncoder<double> enc(ps, small_encoder(16, 4, 2), 6, rng);
  const std::size_t len = 6, c = 16;
  const auto x = random_tensor<double>({1, len, c}, rng);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor<double> xp({1, len, c});
  for (std::size_t i = 0; i < len; ++i) std::copy_n(x.ptr() + perm[i] * c, c, xp.ptr() + i * c);
  Tape<double> t;
  const auto y = enc(t, t.constant(x), false, false).logits.value();
  const auto yp = enc(t, t.constant(xp), false, false).logits.value();
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t k = 0; k < 6; ++k) ASSERT_NEAR(yp.at({0, i, k}), y.at({0, perm[i], k}), 1e-12);
  }
  // Permuting tokens together with their position rows is also equivariant.
  const auto pe = sinusoidal_positions<double>(len, c);
  Tensor<double> xpe({1, len, c}), xppe({1, len, c});
  for (std::size_t i = 0; i < len * c; ++i) xpe[i] = x[i] + pe[i];
  for (std::size_t i = 0; i < len; ++i) std::copy_n(xpe.ptr() + perm[i] * c, c, xppe.ptr() + i * c);
  const auto z = enc(t, t.constant(xpe), false, false).logits.value();
  const auto zp = enc(t, t.constant(xppe), false, false).logits.value();
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t k = 0; k < 6; ++k) ASSERT_NEAR(zp.at({0, i, k}), z.at({0, perm[i], k}), 1e-12);
  }
  // With positions the model is no longer blind to order.
  const auto w = enc(t, t.constant(x)).logits.value();
  const auto wp = enc(t, t.constant(xp)).logits.value();
  EXPECT_GT(std::abs(wp.at({0, 0, 0}) - w.at({0, perm[0], 0})), 1e-9);
}

TEST(Encoder, ReducedConfigMatchesFiniteDifferences) {
  ParameterSet<double> ps;
  Rng rng(10);
  VitEncoder<double> enc(ps, small_encoder(16, 2, 1), 4, rng);
  randomize_for_gradcheck(ps, rng);
  Parameter<double> tokens{"tokens", random_tensor<double>({2, 8, 16}, rng), Tensor<double>()};
  const auto w = random_tensor<double>({2, 8, 4}, rng);
  auto params = ps.params();
  params.push_back(&tokens);
  const auto r = gradient_check_with_invariant_biases(
      [&](Tape<double>& t) {
        return ad::sum(ad::mul(enc(t, t.param(tokens)).logits, t.constant(w)));
      },
      params);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(Model, FullProfileParameterCount) {
  ModelConfig cfg;
  cfg.num_classes = 80;
  HtrModel<float> m(cfg, 1);
  const std::size_t n = m.params().count_scalars();
  RecordProperty("parameters", std::to_string(n));
  EXPECT_GE(n, 40'000'000u);
  EXPECT_LE(n, 70'000'000u);
  HtrModel<float> again(cfg, 1);
  EXPECT_EQ(again.params().count_scalars(), n);
}

TEST(Model, SpecWidthsParameterCount) {
  ModelConfig cfg;
  cfg.num_classes = 80;
  cfg.extractor.widths = {64, 128, 256};
  HtrModel<float> m(cfg, 1);
  RecordProperty("parameters", std::to_string(m.params().count_scalars()));
  EXPECT_LT(m.params().count_scalars(), 40'000'000u);
}

TEST(Model, EvalIgnoresMasksAndTrainUsesThem) {
  ModelConfig cfg;
  cfg.extractor = small_extractor(32, 64, 8);
  cfg.encoder = small_encoder(8, 2, 1);
  cfg.num_classes = 4;
  HtrModel<double> m(cfg, 3);
  Rng rng(11);
  const auto img = random_tensor<double>({1, 1, 32, 64}, rng, 0, 1);
  const std::vector<SpanMask> masks{sample_span_mask(16, {0.5, 4}, rng)};
  Tape<double> t;
  const auto a = m.forward(t, img, {}, RunMode::eval()).logits.value();
  const auto b = m.forward(t, img, masks, RunMode::eval()).logits.value();
  EXPECT_EQ(a.storage(), b.storage());
  const auto c = m.forward(t, img, {}, RunMode::train(false)).logits.value();
  const auto d = m.forward(t, img, masks, RunMode::train(false)).logits.value();
  EXPECT_GT(max_abs_diff(c, d), 1e-6);
}

TEST(Model, EndToEndGradientCheck) {
  const auto start = std::chrono::steady_clock::now();
  const auto r = full_model_gradient_check(1);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  RecordProperty("max_rel_error", std::to_string(r.max_rel_error));
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst_param << "[" << r.worst_index << "] analytic " << r.worst_analytic
                                   << " numeric " << r.worst_numeric;
  EXPECT_GT(r.entries_checked, 1000u);
  EXPECT_LT(secs, 300.0);
  std::cout << "full model gradcheck: " << r.entries_checked << " entries, max rel " << r.max_rel_error << ", "
            << secs << " s\n";
}
