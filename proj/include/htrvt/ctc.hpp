#pragma once

#include <span>
#include <string>
#include <vector>

#include "htrvt/autodiff.hpp"
#include "htrvt/charset.hpp"

namespace htr::ctc {

inline constexpr int kBlank = Charset::kBlank;

/// Target ids interleaved with blanks: blank, l1, blank, l2, ..., lU, blank.
std::vector<int> extended_label(std::span<const int> target);

/// Fewest frames able to emit the target: one per label plus one blank
/// between each adjacent repeated pair.
std::size_t min_frames(std::span<const int> target);

/// Log-space forward/backward tables over the extended label, shape [T, 2U+1].
/// alpha[t][s] and beta[t][s] both include the emission at frame t.
struct Tables {
  Tensor<double> alpha;
  Tensor<double> beta;
};

struct LossResult {
  double nll = 0.0;
  /// d nll / d logits, shape [T, K+1], for logp = log_softmax(logits).
  Tensor<double> grad;
  Tables tables;
  bool feasible = true;
};

/// Negative log-likelihood of the target under per-frame log probabilities
/// logp[T, K+1] (blank = 0) by the forward recursion, with the posterior
/// gradient from the alpha/beta tables. An infeasible target yields +inf with
/// a zero gradient and feasible = false. An empty target is rejected.
LossResult ctc_loss(const Tensor<double>& logp, std::span<const int> target);

/// Exhaustive reference: sums the probability of every frame sequence whose
/// collapse equals the target. Rejects problems with more than 1e7 sequences.
double ctc_brute_force(const Tensor<double>& logp, std::span<const int> target);

/// Merge adjacent repeats, then drop blanks.
std::vector<int> collapse(std::span<const int> path);

/// Per-frame argmax (ties toward the lower id) followed by collapse.
template <typename T>
std::vector<int> greedy_decode_ids(const Tensor<T>& logp);
template <typename T>
std::string greedy_decode(const Tensor<T>& logp, const Charset& charset);

/// Mean CTC loss over a batch of logits[N, T, K+1], recorded on the tape.
/// Per-sample feasibility is written to *feasible when given.
template <typename T>
Var<T> ctc_loss_mean(Var<T> logits, const std::vector<std::vector<int>>& targets,
                     std::vector<bool>* feasible = nullptr);

}  // namespace htr::ctc
