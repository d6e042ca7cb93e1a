#include "htrvt/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace htr::optim {
namespace {

template <typename T>
void check_aligned(const ParameterSet<T>& ps, const std::vector<Tensor<T>>& slots, const char* what) {
  const auto params = ps.params();
  if (params.size() != slots.size()) throw std::invalid_argument(std::string(what) + ": parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->value.same_shape(slots[i])) {
      throw std::invalid_argument(std::string(what) + ": shape mismatch for " + params[i]->name + " " +
                                  shape_str(params[i]->value.shape()) + " vs " + shape_str(slots[i].shape()));
    }
  }
}

bool finite(double x) { return std::isfinite(x); }

}  // namespace

template <typename T>
AdamWState<T>::AdamWState(const ParameterSet<T>& ps, AdamWConfig c) : cfg(c) {
  for (auto* p : ps.params()) {
    m.emplace_back(p->value.shape());
    v.emplace_back(p->value.shape());
  }
}

template <typename T>
StepReport adamw_step(ParameterSet<T>& ps, AdamWState<T>& state, double lr) {
  check_aligned(ps, state.m, "adamw_step");
  StepReport report;
  const auto& c = state.cfg;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const auto params = ps.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    if (!p.has_grad) {
      report.skipped.push_back(p.name);
      continue;
    }
    const double wd = (c.exempt_1d && p.value.rank() == 1) ? 0.0 : c.weight_decay;
    T* theta = p.value.ptr();
    const T* g = p.grad.ptr();
    T* m = state.m[k].ptr();
    T* v = state.v[k].ptr();
    for (std::size_t i = 0, n = p.value.numel(); i < n; ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + c.eps) + wd * theta[i];
      theta[i] = static_cast<T>(theta[i] - lr * update);
    }
  }
  return report;
}

void SamConfig::validate() const {
  if (!(rho >= 0.0) || !std::isfinite(rho)) throw std::invalid_argument("SAM rho must be finite and >= 0");
}

template <typename T>
SamResult sam_step(ParameterSet<T>& ps, const LossClosure& closure, const SamConfig& cfg,
                   const BaseStep<T>& base_step) {
  cfg.validate();
  SamResult r;
  ps.zero_grad();
  if (cfg.rho == 0.0) {
    r.loss = r.first_loss = closure(true);
    if (!finite(r.loss)) return r;
    r.report = base_step(ps);
    r.stepped = true;
    return r;
  }

  r.first_loss = closure(false);
  if (!finite(r.first_loss)) return r;
  const auto params = ps.params();
  double sq = 0.0;
  for (auto* p : params) {
    if (!p->has_grad) continue;
    for (T g : p->grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  r.grad_norm = std::sqrt(sq);
  if (!finite(r.grad_norm)) return r;
  if (r.grad_norm == 0.0) {
    r.loss = r.first_loss;
    r.report = base_step(ps);
    r.stepped = true;
    return r;
  }

  const double scale = cfg.rho / r.grad_norm;
  std::vector<Tensor<T>> saved;
  saved.reserve(params.size());
  double eps_sq = 0.0;
  for (auto* p : params) {
    saved.push_back(p->value);
    if (!p->has_grad) continue;
    T* theta = p->value.ptr();
    const T* g = p->grad.ptr();
    for (std::size_t i = 0, n = p->value.numel(); i < n; ++i) {
      const double e = scale * static_cast<double>(g[i]);
      eps_sq += e * e;
      theta[i] = static_cast<T>(theta[i] + e);
    }
  }
  r.epsilon_norm = std::sqrt(eps_sq);
  r.perturbed = true;

  ps.zero_grad();
  r.loss = closure(true);
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = saved[k];
  if (!finite(r.loss)) return r;
  r.report = base_step(ps);
  r.stepped = true;
  return r;
}

template <typename T>
SamResult sam_step(ParameterSet<T>& ps, const LossClosure& closure, const SamConfig& cfg, AdamWState<T>& state,
                   double lr) {
  return sam_step<T>(ps, closure, cfg, [&state, lr](ParameterSet<T>& p) { return adamw_step(p, state, lr); });
}

void Schedule::validate() const {
  if (warmup_iters >= total_iters) throw std::invalid_argument("schedule: warmup must be shorter than total");
  if (!(max_lr >= floor_lr) || floor_lr < 0.0) throw std::invalid_argument("schedule: need 0 <= floor_lr <= max_lr");
}

double lr_at(std::uint64_t iter, const Schedule& sch) {
  sch.validate();
  if (iter > sch.total_iters) {
    throw std::invalid_argument("lr_at: iteration " + std::to_string(iter) + " beyond total " +
                                std::to_string(sch.total_iters));
  }
  if (iter < sch.warmup_iters) {
    return sch.max_lr * static_cast<double>(iter + 1) / static_cast<double>(sch.warmup_iters);
  }
  const double progress =
      static_cast<double>(iter - sch.warmup_iters) / static_cast<double>(sch.total_iters - sch.warmup_iters);
  return sch.floor_lr + (sch.max_lr - sch.floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
EmaState<T>::EmaState(const ParameterSet<T>& ps, double d) : decay(d) {
  if (!(d >= 0.0 && d <= 1.0)) throw std::invalid_argument("EMA decay must lie in [0, 1]");
  for (auto* p : ps.params()) params.push_back(p->value);
  for (auto* b : ps.buffers()) buffers.push_back(b->value);
}

template <typename T>
void ema_update(EmaState<T>& ema, const ParameterSet<T>& ps) {
  check_aligned(ps, ema.params, "ema_update");
  const auto bufs = ps.buffers();
  if (bufs.size() != ema.buffers.size()) throw std::invalid_argument("ema_update: buffer count changed");
  const double d = ema.decay, w = 1.0 - ema.decay;
  auto blend = [d, w](Tensor<T>& shadow, const Tensor<T>& cur) {
    T* s = shadow.ptr();
    const T* c = cur.ptr();
    for (std::size_t i = 0, n = shadow.numel(); i < n; ++i) s[i] = static_cast<T>(d * s[i] + w * c[i]);
  };
  const auto params = ps.params();
  for (std::size_t k = 0; k < params.size(); ++k) blend(ema.params[k], params[k]->value);
  for (std::size_t k = 0; k < bufs.size(); ++k) blend(ema.buffers[k], bufs[k]->value);
}

template <typename T>
void ema_swap(EmaState<T>& ema, ParameterSet<T>& ps) {
  check_aligned(ps, ema.params, "ema_swap");
  const auto params = ps.params();
  const auto bufs = ps.buffers();
  if (bufs.size() != ema.buffers.size()) throw std::invalid_argument("ema_swap: buffer count changed");
  for (std::size_t k = 0; k < params.size(); ++k) std::swap(params[k]->value, ema.params[k]);
  for (std::size_t k = 0; k < bufs.size(); ++k) std::swap(bufs[k]->value, ema.buffers[k]);
}

#define HTR_INSTANTIATE_OPTIM(T)                                                                              \
  template struct AdamWState<T>;                                                                              \
  template StepReport adamw_step(ParameterSet<T>&, AdamWState<T>&, double);                                   \
  template SamResult sam_step(ParameterSet<T>&, const LossClosure&, const SamConfig&, const BaseStep<T>&);    \
  template SamResult sam_step(ParameterSet<T>&, const LossClosure&, const SamConfig&, AdamWState<T>&, double); \
  template struct EmaState<T>;                                                                                \
  template void ema_update(EmaState<T>&, const ParameterSet<T>&);                                             \
  template void ema_swap(EmaState<T>&, ParameterSet<T>&);

HTR_INSTANTIATE_OPTIM(float)
HTR_INSTANTIATE_OPTIM(double)

}  // namespace htr::optim
