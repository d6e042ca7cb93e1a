#include "htrvt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace htr {

GradcheckReport gradient_check(const ScalarFn& f, const std::vector<Parameter<double>*>& params,
                               const GradcheckOptions& opt) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    auto loss = f(tape);
    tape.backward(loss);
  }

  auto eval = [&f] {
    Tape<double> tape;
    return f(tape).value().item();
  };

  GradcheckReport report;
  for (auto* p : params) {
    const std::size_t n = p->value.numel();
    const std::size_t stride =
        (opt.max_entries_per_param == 0 || n <= opt.max_entries_per_param) ? 1 : n / opt.max_entries_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p->value[i];
      auto central = [&](double h) {
        p->value[i] = orig + h;
        const double up = eval();
        p->value[i] = orig - h;
        const double down = eval();
        p->value[i] = orig;
        return (up - down) / (2.0 * h);
      };
      const double numeric =
          opt.extrapolate ? (4.0 * central(opt.step) - central(2.0 * opt.step)) / 3.0 : central(opt.step);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double err = std::abs(analytic - numeric) / denom;
      ++report.entries_checked;
      if (!(err <= report.max_rel_error)) {
        report.max_rel_error = std::isnan(err) ? INFINITY : err;
        report.worst_param = p->name;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace htr
