#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "htrvt/ctc.hpp"
#include "htrvt/gradcheck.hpp"
#include "htrvt/ops.hpp"
#include "htrvt/random.hpp"

using namespace htr;

namespace {

Tensor<double> log_probs(const std::vector<std::vector<double>>& probs) {
  Tensor<double> t({probs.size(), probs[0].size()});
  for (std::size_t i = 0; i < probs.size(); ++i)
    for (std::size_t k = 0; k < probs[0].size(); ++k) t.at({i, k}) = std::log(probs[i][k]);
  return t;
}

struct Instance {
  Tensor<double> logits;
  std::vector<int> target;
};

// T <= 6, K <= 3, U <= 3
Instance random_instance(Rng& rng) {
  const std::size_t frames = rng.uniform_int(1, 6);
  const std::size_t k = rng.uniform_int(1, 3);
  const std::size_t u = rng.uniform_int(1, 3);
  Instance in{Tensor<double>({frames, k + 1}), std::vector<int>(u)};
  for (auto& v : in.logits.data()) v = rng.uniform(-2.0, 2.0);
  for (auto& id : in.target) id = static_cast<int>(rng.uniform_int(1, k));
  return in;
}

double logsumexp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (std::isinf(m)) return m;
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

const GradcheckOptions kCtcCheck{1e-3, 0, true};

}  // namespace

TEST(CtcLoss, SingleForcedPath) {
  const auto lp = log_probs({{0.0, 1.0}});
  const std::vector<int> target{1};
  EXPECT_EQ(ctc::ctc_loss(lp, target).nll, 0.0);
}

TEST(CtcLoss, TwoFramesUniform) {
  // alignments {aa, a-, -a}: total probability 3/4
  const auto lp = log_probs({{0.5, 0.5}, {0.5, 0.5}});
  const std::vector<int> target{1};
  EXPECT_NEAR(ctc::ctc_loss(lp, target).nll, -std::log(0.75), 1e-15);
  EXPECT_NEAR(ctc::ctc_loss(lp, target).nll, 0.2876820724517809, 1e-15);
  EXPECT_NEAR(ctc::ctc_brute_force(lp, target), -std::log(0.75), 1e-15);
}

TEST(CtcLoss, InfeasibleTargetIsInfiniteWithZeroGradient) {
  const auto lp = log_probs({{0.3, 0.7}, {0.3, 0.7}});
  const std::vector<int> repeated{1, 1};  // needs 3 frames
  const auto r = ctc::ctc_loss(lp, repeated);
  EXPECT_FALSE(r.feasible);
  EXPECT_TRUE(std::isinf(r.nll));
  for (double g : r.grad.data()) EXPECT_EQ(g, 0.0);
  EXPECT_TRUE(std::isinf(ctc::ctc_brute_force(lp, repeated)));
  EXPECT_EQ(ctc::min_frames(repeated), 3u);
}

TEST(CtcLoss, EmptyTargetRejected) {
  const auto lp = log_probs({{0.5, 0.5}});
  EXPECT_THROW(ctc::ctc_loss(lp, std::vector<int>{}), std::invalid_argument);
}

TEST(CtcBruteForce, AllBlankMassGivesInfinity) {
  const auto lp = log_probs({{1.0, 0.0}});
  EXPECT_TRUE(std::isinf(ctc::ctc_brute_force(lp, std::vector<int>{1})));
  EXPECT_TRUE(std::isinf(ctc::ctc_loss(lp, std::vector<int>{1}).nll));
}

TEST(CtcBruteForce, SizeGuard) {
  Tensor<double> lp({12, 4}, std::log(0.25));
  EXPECT_THROW(ctc::ctc_brute_force(lp, std::vector<int>{1}), std::invalid_argument);
}

TEST(CtcLoss, ExtendedLabelInterleavesBlanks) {
  EXPECT_EQ(ctc::extended_label(std::vector<int>{3, 1}), (std::vector<int>{0, 3, 0, 1, 0}));
}

// Oracle equivalence, alpha/beta consistency and per-frame gradient sums.
TEST(CtcProperty, MatchesExhaustiveEnumeration) {
  Rng rng(11);
  int feasible = 0;
  for (int i = 0; i < 1000; ++i) {
    auto in = random_instance(rng);
    const auto lp = ad::log_softmax_rows_value(in.logits);
    const auto r = ctc::ctc_loss(lp, in.target);
    const double oracle = ctc::ctc_brute_force(lp, in.target);
    if (std::isinf(oracle)) {
      EXPECT_TRUE(std::isinf(r.nll));
      continue;
    }
    ++feasible;
    ASSERT_NEAR(r.nll, oracle, 1e-9);
    EXPECT_GE(r.nll, 0.0);

    const std::size_t frames = lp.dim(0), classes = lp.dim(1);
    const auto ext = ctc::extended_label(in.target);
    for (std::size_t t = 0; t < frames; ++t) {
      std::vector<double> terms;
      for (std::size_t s = 0; s < ext.size(); ++s) {
        terms.push_back(r.tables.alpha.at({t, s}) + r.tables.beta.at({t, s}) -
                        lp.at({t, static_cast<std::size_t>(ext[s])}));
      }
      EXPECT_NEAR(logsumexp(terms), -r.nll, 1e-8);
      double gsum = 0;
      for (std::size_t k = 0; k < classes; ++k) gsum += r.grad.at({t, k});
      EXPECT_NEAR(gsum, 0.0, 1e-12);
    }
  }
  EXPECT_GT(feasible, 500);
}

TEST(CtcProperty, GradientMatchesCentralDifferences) {
  Rng rng(12);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    auto in = random_instance(rng);
    if (in.logits.dim(0) < ctc::min_frames(in.target)) continue;
    Parameter<double> p{"logits", in.logits.reshaped({1, in.logits.dim(0), in.logits.dim(1)}), Tensor<double>()};
    const std::vector<std::vector<int>> targets{in.target};
    const auto report = gradient_check(
        [&](Tape<double>& t) { return ctc::ctc_loss_mean(t.param(p), targets); }, {&p}, kCtcCheck);
    worst = std::max(worst, report.max_rel_error);
    ASSERT_LT(report.max_rel_error, 1e-6) << "instance " << i << " analytic=" << report.worst_analytic
                                          << " numeric=" << report.worst_numeric;
  }
  RecordProperty("max_rel_error", std::to_string(worst));
}

TEST(CtcLossMean, AveragesOverSamples) {
  Tape<double> t;
  Tensor<double> logits({2, 2, 2}, 0.0);
  auto loss = ctc::ctc_loss_mean(t.constant(logits), {{1}, {1}});
  EXPECT_NEAR(loss.value().item(), -std::log(0.75), 1e-15);
  std::vector<bool> feasible;
  auto bad = ctc::ctc_loss_mean(t.constant(logits), {{1}, {1, 1}}, &feasible);
  EXPECT_TRUE(std::isinf(bad.value().item()));
  EXPECT_TRUE(feasible[0]);
  EXPECT_FALSE(feasible[1]);
}

TEST(GreedyDecode, CollapseRules) {
  auto path_logp = [](const std::vector<int>& path) {
    Tensor<double> t({path.size(), 3}, -5.0);
    for (std::size_t i = 0; i < path.size(); ++i) t.at({i, static_cast<std::size_t>(path[i])}) = 0.0;
    return t;
  };
  const Charset cs(U"ab");
  EXPECT_EQ(ctc::greedy_decode(path_logp({0, 1, 1, 0, 2}), cs), "ab");
  EXPECT_EQ(ctc::greedy_decode(path_logp({1, 0, 1}), cs), "aa");
  EXPECT_EQ(ctc::greedy_decode(path_logp({0, 0, 0}), cs), "");
  // ties go to the lower id
  Tensor<double> tie({1, 3}, 0.0);
  EXPECT_TRUE(ctc::greedy_decode_ids(tie).empty());
}
