#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "htrvt/autodiff.hpp"

namespace htr::optim {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.5;
  /// Skip decay for rank-1 parameters (biases, norm gains, mask token).
  bool exempt_1d = false;
};

/// Moment buffers are stored in ParameterSet::params() order.
template <typename T>
struct AdamWState {
  AdamWConfig cfg;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  AdamWState() = default;
  AdamWState(const ParameterSet<T>& ps, AdamWConfig c);
};

struct StepReport {
  /// Parameters without a gradient; they were left untouched.
  std::vector<std::string> skipped;
};

/// One decoupled-decay Adam update with bias correction:
/// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
template <typename T>
StepReport adamw_step(ParameterSet<T>& ps, AdamWState<T>& state, double lr);

struct SamConfig {
  double rho = 0.05;
  void validate() const;
};

/// Runs forward and backward on the step's fixed batch, accumulating into the
/// parameter gradients, and returns the loss. The flag says whether batch-norm
/// running statistics may be updated during this pass.
using LossClosure = std::function<double(bool update_running_stats)>;

template <typename T>
using BaseStep = std::function<StepReport(ParameterSet<T>&)>;

struct SamResult {
  double loss = 0.0;         // loss of the pass whose gradient was applied
  double first_loss = 0.0;   // loss at the unperturbed parameters
  double grad_norm = 0.0;    // global norm of the first-pass gradient
  double epsilon_norm = 0.0; // norm of the applied perturbation
  bool perturbed = false;
  /// False when a pass produced a non-finite loss; parameters are then unchanged.
  bool stepped = false;
  StepReport report;
};

/// Sharpness-aware step: gradient at theta, ascend to theta + rho g/|g| (global
/// norm), gradient there, restore theta exactly, then apply base_step with the
/// second gradient. rho = 0 or a zero gradient degrade to a single pass.
template <typename T>
SamResult sam_step(ParameterSet<T>& ps, const LossClosure& closure, const SamConfig& cfg,
                   const BaseStep<T>& base_step);

template <typename T>
SamResult sam_step(ParameterSet<T>& ps, const LossClosure& closure, const SamConfig& cfg, AdamWState<T>& state,
                   double lr);

struct Schedule {
  std::uint64_t warmup_iters = 1000;
  std::uint64_t total_iters = 100000;
  double max_lr = 1e-3;
  double floor_lr = 0.0;
  void validate() const;
};

/// Linear warmup reaching max_lr at iter = warmup - 1, then half-cosine decay
/// to floor_lr at iter = total.
double lr_at(std::uint64_t iter, const Schedule& sch);

/// Shadow copies of every parameter and buffer, in set order.
template <typename T>
struct EmaState {
  double decay = 0.9999;
  std::vector<Tensor<T>> params;
  std::vector<Tensor<T>> buffers;

  EmaState() = default;
  EmaState(const ParameterSet<T>& ps, double decay);
};

/// shadow <- decay * shadow + (1 - decay) * current, for parameters and buffers.
template <typename T>
void ema_update(EmaState<T>& ema, const ParameterSet<T>& ps);

/// Exchanges the live values with the shadow. Calling it twice restores both.
template <typename T>
void ema_swap(EmaState<T>& ema, ParameterSet<T>& ps);

}  // namespace htr::optim
