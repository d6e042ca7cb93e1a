#include <gtest/gtest.h>

#include <cmath>

#include "htrvt/ops.hpp"
#include "htrvt/optim.hpp"
#include "htrvt/random.hpp"

using namespace htr;
using namespace htr::optim;

namespace {

AdamWConfig no_decay() {
  AdamWConfig c;
  c.weight_decay = 0.0;
  return c;
}

// f(theta) = 0.5 * theta^2 with the gradient written by hand.
LossClosure quadratic(Parameter<double>& p) {
  return [&p](bool) {
    const double th = p.value[0];
    p.grad[0] += th;
    p.has_grad = true;
    return 0.5 * th * th;
  };
}

BaseStep<double> plain_gradient(double lr) {
  return [lr](ParameterSet<double>& ps) {
    for (auto* p : ps.params()) {
      for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] -= lr * p->grad[i];
    }
    return StepReport{};
  };
}

// Small regression problem used for the bit-exactness checks.
template <typename T>
struct Regression {
  ParameterSet<T> ps;
  Tensor<T> x{Shape{6, 3}}, y{Shape{6, 2}};
  Parameter<T>* w;
  Parameter<T>* b;

  explicit Regression(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& v : x.data()) v = static_cast<T>(rng.normal());
    for (auto& v : y.data()) v = static_cast<T>(rng.normal());
    Tensor<T> w0({2, 3});
    for (auto& v : w0.data()) v = static_cast<T>(rng.normal());
    w = &ps.add("w", w0);
    b = &ps.add("b", Tensor<T>({2}, static_cast<T>(0.1)));
  }

  LossClosure closure() {
    return [this](bool) {
      Tape<T> t;
      auto pred = ad::linear(t.constant(x), t.param(*w), t.param(*b));
      auto diff = ad::add(pred, ad::scale(t.constant(y), T(-1)));
      auto loss = ad::mean(ad::mul(diff, diff));
      t.backward(loss);
      return static_cast<double>(loss.value().item());
    };
  }
};

}  // namespace

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParameterSet<double> ps;
  auto& p = ps.add("theta", Tensor<double>({1}, 0.0));
  p.grad[0] = 1.0;
  p.has_grad = true;
  AdamWState<double> st(ps, no_decay());
  adamw_step(ps, st, 0.1);
  EXPECT_NEAR(p.value[0], -0.1, 1e-8);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParameter) {
  ParameterSet<double> ps;
  auto& p = ps.add("theta", Tensor<double>({3}, 0.7));
  p.has_grad = true;
  AdamWState<double> st(ps, no_decay());
  for (int i = 0; i < 5; ++i) adamw_step(ps, st, 0.1);
  for (double v : p.value.data()) EXPECT_EQ(v, 0.7);
}

TEST(AdamW, DecayShrinksByLrTimesWd) {
  ParameterSet<double> ps;
  auto& p = ps.add("theta", Tensor<double>({2}, 2.0));
  p.has_grad = true;
  AdamWConfig c;
  c.weight_decay = 0.5;
  AdamWState<double> st(ps, c);
  adamw_step(ps, st, 0.01);
  for (double v : p.value.data()) EXPECT_DOUBLE_EQ(v, 2.0 * (1.0 - 0.01 * 0.5));
}

TEST(AdamW, ExemptOneDimensionalSkipsDecay) {
  ParameterSet<double> ps;
  auto& vec = ps.add("gain", Tensor<double>({2}, 2.0));
  auto& mat = ps.add("w", Tensor<double>({1, 2}, 2.0));
  vec.has_grad = mat.has_grad = true;
  AdamWConfig c;
  c.exempt_1d = true;
  AdamWState<double> st(ps, c);
  adamw_step(ps, st, 0.1);
  EXPECT_EQ(vec.value[0], 2.0);
  EXPECT_DOUBLE_EQ(mat.value[0], 2.0 * 0.95);
}

TEST(AdamW, MissingGradientIsSkippedAndFlagged) {
  ParameterSet<double> ps;
  auto& a = ps.add("a", Tensor<double>({1}, 1.0));
  auto& b = ps.add("b", Tensor<double>({1}, 1.0));
  a.grad[0] = 1.0;
  a.has_grad = true;
  AdamWState<double> st(ps, AdamWConfig{});
  const auto rep = adamw_step(ps, st, 0.1);
  ASSERT_EQ(rep.skipped, std::vector<std::string>{"b"});
  EXPECT_EQ(b.value[0], 1.0);
  EXPECT_NE(a.value[0], 1.0);
}

TEST(Sam, QuadraticAnalyticStep) {
  ParameterSet<double> ps;
  auto& p = ps.add("theta", Tensor<double>({1}, 1.0));
  const auto r = sam_step<double>(ps, quadratic(p), SamConfig{0.1}, plain_gradient(0.1));
  ASSERT_TRUE(r.stepped);
  EXPECT_NEAR(p.value[0], 0.89, 1e-12);
  EXPECT_NEAR(r.epsilon_norm, 0.1, 1e-10);
  EXPECT_DOUBLE_EQ(r.first_loss, 0.5);
  EXPECT_NEAR(r.loss, 0.5 * 1.1 * 1.1, 1e-12);
  EXPECT_GT(r.loss, r.first_loss);
}

TEST(Sam, PerturbationUsesGlobalNorm) {
  Regression<double> m(3);
  const double rho = 0.05;
  const auto r = sam_step<double>(m.ps, m.closure(), SamConfig{rho}, [](ParameterSet<double>&) { return StepReport{}; });
  EXPECT_NEAR(r.epsilon_norm, rho, 1e-10);
  EXPECT_GT(r.grad_norm, 0.0);
}

TEST(Sam, RestoresParametersBitExactBeforeBaseStep) {
  Regression<float> m(4);
  const auto w0 = m.w->value, b0 = m.b->value;
  bool checked = false;
  sam_step<float>(m.ps, m.closure(), SamConfig{0.05}, [&](ParameterSet<float>&) {
    EXPECT_EQ(m.w->value.storage(), w0.storage());
    EXPECT_EQ(m.b->value.storage(), b0.storage());
    checked = true;
    return StepReport{};
  });
  EXPECT_TRUE(checked);
}

TEST(Sam, ZeroRadiusIsBitIdenticalToAdamW) {
  Regression<float> a(5), b(5);
  AdamWState<float> sa(a.ps, AdamWConfig{}), sb(b.ps, AdamWConfig{});
  for (int step = 0; step < 5; ++step) {
    sam_step<float>(a.ps, a.closure(), SamConfig{0.0}, sa, 1e-2);
    b.ps.zero_grad();
    b.closure()(true);
    adamw_step(b.ps, sb, 1e-2);
  }
  EXPECT_EQ(a.w->value.storage(), b.w->value.storage());
  EXPECT_EQ(a.b->value.storage(), b.b->value.storage());
  EXPECT_EQ(sa.m[0].storage(), sb.m[0].storage());
}

TEST(Sam, ZeroGradientSkipsPerturbation) {
  ParameterSet<double> ps;
  auto& p = ps.add("theta", Tensor<double>({1}, 0.0));
  const auto r = sam_step<double>(ps, quadratic(p), SamConfig{0.1}, plain_gradient(0.1));
  EXPECT_FALSE(r.perturbed);
  EXPECT_TRUE(r.stepped);
  EXPECT_EQ(p.value[0], 0.0);
}

TEST(Sam, NonFiniteLossLeavesParameters) {
  ParameterSet<double> ps;
  auto& p = ps.add("theta", Tensor<double>({1}, 1.0));
  int calls = 0;
  LossClosure bad = [&](bool) {
    p.grad[0] += 1.0;
    p.has_grad = true;
    return ++calls == 2 ? NAN : 1.0;
  };
  const auto r = sam_step<double>(ps, bad, SamConfig{0.1}, plain_gradient(0.1));
  EXPECT_FALSE(r.stepped);
  EXPECT_EQ(p.value[0], 1.0);
}

TEST(Sam, RunningStatsUpdateOnlyOnSecondPass) {
  ParameterSet<double> ps;
  auto& p = ps.add("theta", Tensor<double>({1}, 1.0));
  std::vector<bool> flags;
  LossClosure c = [&](bool update) {
    flags.push_back(update);
    return quadratic(p)(update);
  };
  sam_step<double>(ps, c, SamConfig{0.1}, plain_gradient(0.1));
  EXPECT_EQ(flags, (std::vector<bool>{false, true}));
  flags.clear();
  sam_step<double>(ps, c, SamConfig{0.0}, plain_gradient(0.1));
  EXPECT_EQ(flags, (std::vector<bool>{true}));
}

TEST(Schedule, Examples) {
  Schedule s;
  EXPECT_DOUBLE_EQ(lr_at(999, s), 1e-3);
  EXPECT_NEAR(lr_at(1000 + 99000 / 2, s), 5e-4, 1e-15);
  EXPECT_NEAR(lr_at(100000, s), 0.0, 1e-18);
  EXPECT_DOUBLE_EQ(lr_at(0, s), 1e-6);
  EXPECT_THROW(lr_at(100001, s), std::invalid_argument);
}

TEST(Schedule, ContinuousAtWarmupBoundary) {
  Schedule s;
  const double a = lr_at(s.warmup_iters - 1, s), b = lr_at(s.warmup_iters, s);
  EXPECT_LE(std::abs(a - b) / a, 1e-12);
}

TEST(Schedule, RejectsWarmupNotShorterThanTotal) {
  Schedule s;
  s.warmup_iters = s.total_iters;
  EXPECT_THROW(lr_at(0, s), std::invalid_argument);
}

TEST(Ema, FixedPoint) {
  ParameterSet<double> ps;
  ps.add("a", Tensor<double>({3}, 1.25));
  EmaState<double> e(ps, 0.9999);
  for (int i = 0; i < 10; ++i) ema_update(e, ps);
  for (double v : e.params[0].data()) EXPECT_EQ(v, 1.25);
}

TEST(Ema, GeometricSeries) {
  ParameterSet<double> ps;
  auto& p = ps.add("a", Tensor<double>({1}, 3.0));
  EmaState<double> e(ps, 0.9999);
  e.params[0].fill(0.0);
  const int n = 5000;
  for (int i = 0; i < n; ++i) ema_update(e, ps);
  EXPECT_NEAR(e.params[0][0], p.value[0] * (1.0 - std::pow(0.9999, n)), 1e-10);
}

TEST(Ema, ZeroDecayTracksParameters) {
  ParameterSet<double> ps;
  auto& p = ps.add("a", Tensor<double>({2}, 1.0));
  auto& buf = ps.add_buffer("running", Tensor<double>({2}, 4.0));
  EmaState<double> e(ps, 0.0);
  p.value.fill(-2.0);
  buf.value.fill(5.0);
  ema_update(e, ps);
  EXPECT_EQ(e.params[0].storage(), p.value.storage());
  EXPECT_EQ(e.buffers[0].storage(), buf.value.storage());
}

TEST(Ema, SwapTwiceRestores) {
  ParameterSet<double> ps;
  auto& p = ps.add("a", Tensor<double>({2}, 1.0));
  EmaState<double> e(ps, 0.5);
  e.params[0].fill(7.0);
  ema_swap(e, ps);
  EXPECT_EQ(p.value[0], 7.0);
  ema_swap(e, ps);
  EXPECT_EQ(p.value[0], 1.0);
  EXPECT_EQ(e.params[0][0], 7.0);
}
