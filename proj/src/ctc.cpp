#include "htrvt/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>

#include "htrvt/ops.hpp"

namespace htr::ctc {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void check_logp(const Tensor<double>& logp) {
  if (logp.rank() != 2 || logp.dim(1) < 2) {
    throw std::invalid_argument("ctc: expected log probabilities of shape [T, K+1], got " + shape_str(logp.shape()));
  }
}

void check_target(std::span<const int> target, std::size_t classes) {
  if (target.empty()) throw std::invalid_argument("ctc: empty target");
  for (int id : target) {
    if (id <= kBlank || static_cast<std::size_t>(id) >= classes) {
      throw std::invalid_argument("ctc: target id " + std::to_string(id) + " outside 1.." +
                                  std::to_string(classes - 1));
    }
  }
}

}  // namespace

std::vector<int> extended_label(std::span<const int> target) {
  std::vector<int> ext(2 * target.size() + 1, kBlank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

std::size_t min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

LossResult ctc_loss(const Tensor<double>& logp, std::span<const int> target) {
  check_logp(logp);
  const std::size_t frames = logp.dim(0), classes = logp.dim(1);
  check_target(target, classes);

  LossResult r;
  r.grad = Tensor<double>({frames, classes});
  const auto ext = extended_label(target);
  const std::size_t states = ext.size();
  r.tables.alpha = Tensor<double>({frames, states}, kNegInf);
  r.tables.beta = Tensor<double>({frames, states}, kNegInf);

  if (frames < min_frames(target)) {
    r.nll = std::numeric_limits<double>::infinity();
    r.feasible = false;
    return r;
  }

  auto lp = [&](std::size_t t, std::size_t s) { return logp[t * classes + static_cast<std::size_t>(ext[s])]; };
  // A skip from s-2 is allowed into a label that differs from the previous label.
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]; };

  auto& alpha = r.tables.alpha;
  alpha[0] = lp(0, 0);
  if (states > 1) alpha[1] = lp(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    const double* prev = alpha.ptr() + (t - 1) * states;
    double* cur = alpha.ptr() + t * states;
    for (std::size_t s = 0; s < states; ++s) {
      double a = prev[s];
      if (s >= 1) a = log_add(a, prev[s - 1]);
      if (can_skip(s)) a = log_add(a, prev[s - 2]);
      cur[s] = a == kNegInf ? kNegInf : a + lp(t, s);
    }
  }

  auto& beta = r.tables.beta;
  const std::size_t last = frames - 1;
  beta[last * states + states - 1] = lp(last, states - 1);
  beta[last * states + states - 2] = lp(last, states - 2);
  for (std::size_t t = last; t-- > 0;) {
    const double* next = beta.ptr() + (t + 1) * states;
    double* cur = beta.ptr() + t * states;
    for (std::size_t s = 0; s < states; ++s) {
      double b = next[s];
      if (s + 1 < states) b = log_add(b, next[s + 1]);
      if (s + 2 < states && can_skip(s + 2)) b = log_add(b, next[s + 2]);
      cur[s] = b == kNegInf ? kNegInf : b + lp(t, s);
    }
  }

  const double log_total = log_add(alpha[last * states + states - 1], alpha[last * states + states - 2]);
  r.nll = -log_total;
  // Zero-probability target: +inf with a zero gradient, like the infeasible case.
  if (!std::isfinite(r.nll)) return r;

  // grad = softmax - posterior occupancy of each class at each frame.
  std::vector<double> occupancy(classes);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(occupancy.begin(), occupancy.end(), kNegInf);
    for (std::size_t s = 0; s < states; ++s) {
      const double a = alpha[t * states + s];
      const double b = beta[t * states + s];
      if (a == kNegInf || b == kNegInf) continue;
      const auto k = static_cast<std::size_t>(ext[s]);
      occupancy[k] = log_add(occupancy[k], a + b - lp(t, s));
    }
    for (std::size_t k = 0; k < classes; ++k) {
      const double post = occupancy[k] == kNegInf ? 0.0 : std::exp(occupancy[k] + r.nll);
      r.grad[t * classes + k] = std::exp(logp[t * classes + k]) - post;
    }
  }
  return r;
}

double ctc_brute_force(const Tensor<double>& logp, std::span<const int> target) {
  check_logp(logp);
  const std::size_t frames = logp.dim(0), classes = logp.dim(1);
  check_target(target, classes);
  double count = 1.0;
  for (std::size_t t = 0; t < frames; ++t) count *= static_cast<double>(classes);
  if (count > 1e7) throw std::invalid_argument("ctc_brute_force: (K+1)^T exceeds 1e7 sequences");

  const std::vector<int> want(target.begin(), target.end());
  std::vector<int> path(frames, 0);
  double total = 0.0;
  while (true) {
    if (collapse(path) == want) {
      double logprob = 0.0;
      for (std::size_t t = 0; t < frames; ++t) logprob += logp[t * classes + static_cast<std::size_t>(path[t])];
      total += std::exp(logprob);
    }
    std::size_t t = 0;
    while (t < frames && ++path[t] == static_cast<int>(classes)) path[t++] = 0;
    if (t == frames) break;
  }
  return total > 0.0 ? -std::log(total) : std::numeric_limits<double>::infinity();
}

std::vector<int> collapse(std::span<const int> path) {
  std::vector<int> out;
  int prev = -1;
  for (int id : path) {
    if (id != prev && id != kBlank) out.push_back(id);
    prev = id;
  }
  return out;
}

template <typename T>
std::vector<int> greedy_decode_ids(const Tensor<T>& logp) {
  if (logp.rank() != 2) throw std::invalid_argument("greedy_decode: expected [T, K+1], got " + shape_str(logp.shape()));
  const std::size_t frames = logp.dim(0), classes = logp.dim(1);
  std::vector<int> path(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const T* row = logp.ptr() + t * classes;
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k)
      if (row[k] > row[best]) best = k;
    path[t] = static_cast<int>(best);
  }
  return collapse(path);
}

template <typename T>
std::string greedy_decode(const Tensor<T>& logp, const Charset& charset) {
  return charset.decode(greedy_decode_ids(logp));
}

template <typename T>
Var<T> ctc_loss_mean(Var<T> logits, const std::vector<std::vector<int>>& targets, std::vector<bool>* feasible) {
  const auto& lv = logits.value();
  if (lv.rank() != 3) throw std::invalid_argument("ctc_loss_mean: expected logits [N,T,K+1], got " + shape_str(lv.shape()));
  const std::size_t n = lv.dim(0), frames = lv.dim(1), classes = lv.dim(2);
  if (targets.size() != n) {
    throw std::invalid_argument("ctc_loss_mean: " + std::to_string(targets.size()) + " targets for batch of " +
                                std::to_string(n));
  }
  Tensor<T> grad(lv.shape());
  double total = 0.0;
  if (feasible) feasible->assign(n, true);
  for (std::size_t b = 0; b < n; ++b) {
    Tensor<double> row({frames, classes});
    for (std::size_t i = 0; i < frames * classes; ++i) row[i] = static_cast<double>(lv[b * frames * classes + i]);
    const auto r = ctc_loss(ad::log_softmax_rows_value(row), targets[b]);
    if (!r.feasible) {
      std::cerr << "warning: CTC target of sample " << b << " (length " << targets[b].size()
                << ") cannot be aligned to " << frames << " frames\n";
      if (feasible) (*feasible)[b] = false;
    }
    total += r.nll;
    for (std::size_t i = 0; i < frames * classes; ++i) {
      grad[b * frames * classes + i] = static_cast<T>(r.grad[i] / static_cast<double>(n));
    }
  }
  const T loss = static_cast<T>(total / static_cast<double>(n));
  return logits.tape->record(Tensor<T>::scalar(loss), {logits},
                             [logits, grad = std::move(grad)](Tape<T>& t, const Tensor<T>& g) {
                               auto& gl = t.grad(logits.id);
                               for (std::size_t i = 0; i < gl.numel(); ++i) gl[i] += g[0] * grad[i];
                             });
}

template std::vector<int> greedy_decode_ids(const Tensor<float>&);
template std::vector<int> greedy_decode_ids(const Tensor<double>&);
template std::string greedy_decode(const Tensor<float>&, const Charset&);
template std::string greedy_decode(const Tensor<double>&, const Charset&);
template Var<float> ctc_loss_mean(Var<float>, const std::vector<std::vector<int>>&, std::vector<bool>*);
template Var<double> ctc_loss_mean(Var<double>, const std::vector<std::vector<int>>&, std::vector<bool>*);

}  // namespace htr::ctc
