#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "htrvt/autodiff.hpp"
#include "htrvt/random.hpp"

namespace htr {

struct GradcheckOptions {
  double step = 1e-6;
  /// Upper bound on perturbed entries per parameter; 0 checks every entry.
  /// When bounded, entries are chosen on an even stride through the tensor.
  std::size_t max_entries_per_param = 0;
  /// Richardson-extrapolate two central differences, (4 D(h) - D(2h)) / 3,
  /// cancelling the h^2 truncation term. Used where tiny gradients need more
  /// accuracy than a single difference quotient can give in 64-bit.
  bool extrapolate = false;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarFn = std::function<Var<double>(Tape<double>&)>;

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h for every (selected) entry of the given
/// parameters. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator. Parameter values are restored exactly afterwards.
GradcheckReport gradient_check(const ScalarFn& f, const std::vector<Parameter<double>*>& params,
                               const GradcheckOptions& opt = {});

}  // namespace htr

namespace htr {

class Rng;

/// One randomized gradient check of a single primitive. Each call draws a
/// fresh random shape and input from the generator.
struct PrimitiveCheck {
  std::string name;
  std::function<GradcheckReport(Rng&)> run;
};

/// Every differentiable primitive, each wrapped as sum(w * op(inputs)) with a
/// random constant weighting w.
std::vector<PrimitiveCheck> primitive_checks();

/// Negative control: y = 2x recorded with an adjoint that is 1% too large.
PrimitiveCheck corrupted_adjoint_check();

}  // namespace htr

namespace htr {

/// Redraws matrices and kernels from N(0, 1/fan_in) and shifts vectors by
/// U(-0.5, 0.5). The 0.02 training initialisation leaves attention nearly
/// uniform, where key gradients are around 1e-9 and fall below what a
/// difference quotient can resolve; checks run at this generic point instead.
void randomize_for_gradcheck(ParameterSet<double>& ps, Rng& rng);

/// Key biases shift every score in a softmax row by the same amount, so their
/// exact gradient is zero and a difference quotient only measures round-off.
/// They are required to have |grad| <= 1e-12 instead; everything else goes
/// through gradient_check.
GradcheckReport gradient_check_with_invariant_biases(const ScalarFn& f, const std::vector<Parameter<double>*>& params,
                                                     const GradcheckOptions& opt = {});

/// Reduced end-to-end model (16x32 input giving 8 tokens, dim 16, 2 heads,
/// 1 block, K = 3) with a fixed span mask and the mean CTC loss, every
/// parameter checked in 64-bit.
GradcheckReport full_model_gradient_check(std::uint64_t seed, const GradcheckOptions& opt = {});

/// CTC loss gradient on random small instances (T <= 6, K <= 3, target length
/// <= 3); reports the worst instance.
GradcheckReport ctc_gradient_check(std::uint64_t seed, std::size_t instances);

}  // namespace htr
