#include <algorithm>
#include <cmath>

#include "htrvt/ctc.hpp"
#include "htrvt/gradcheck.hpp"
#include "htrvt/model.hpp"
#include "htrvt/ops.hpp"

namespace htr {

void randomize_for_gradcheck(ParameterSet<double>& ps, Rng& rng) {
  for (auto* p : ps.params()) {
    if (p->value.rank() >= 2) {
      const double fan_in = static_cast<double>(p->value.numel() / p->value.dim(0));
      for (auto& v : p->value.data()) v = rng.normal() / std::sqrt(fan_in);
    } else {
      for (auto& v : p->value.data()) v += rng.uniform(-0.5, 0.5);
    }
  }
}

GradcheckReport gradient_check_with_invariant_biases(const ScalarFn& f, const std::vector<Parameter<double>*>& params,
                                                     const GradcheckOptions& opt) {
  std::vector<Parameter<double>*> checked, invariant;
  for (auto* p : params) {
    const bool key_bias = p->name.size() >= 11 && p->name.compare(p->name.size() - 11, 11, "attn.k.bias") == 0;
    (key_bias ? invariant : checked).push_back(p);
  }
  auto report = gradient_check(f, checked, opt);
  // gradient_check left the analytic gradients of every parameter in place.
  {
    for (auto* p : invariant) p->zero_grad();
    Tape<double> t;
    t.backward(f(t));
  }
  for (auto* p : invariant) {
    for (std::size_t i = 0; i < p->grad.numel(); ++i) {
      ++report.entries_checked;
      if (std::abs(p->grad[i]) > 1e-12) {
        report.max_rel_error = INFINITY;
        report.worst_param = p->name;
        report.worst_index = i;
        report.worst_analytic = p->grad[i];
        report.worst_numeric = 0.0;
      }
    }
  }
  return report;
}

GradcheckReport full_model_gradient_check(std::uint64_t seed, const GradcheckOptions& opt) {
  ModelConfig cfg;
  cfg.extractor.input_h = 16;
  cfg.extractor.input_w = 32;
  cfg.extractor.stem = 4;
  cfg.extractor.widths = {4, 4, 8};
  cfg.extractor.blocks_per_stage = 1;
  cfg.extractor.dim = 16;
  cfg.encoder.blocks = 1;
  cfg.encoder.dim = 16;
  cfg.encoder.heads = 2;
  cfg.encoder.ffn = 32;
  cfg.num_classes = 4;
  HtrModel<double> model(cfg, seed);

  Rng rng(derive_seed(seed, 1));
  randomize_for_gradcheck(model.params(), rng);
  const std::size_t n = 2;
  Tensor<double> images({n, 1, cfg.extractor.input_h, cfg.extractor.input_w});
  for (auto& v : images.data()) v = rng.uniform();
  std::vector<std::vector<int>> targets(n);
  for (auto& t : targets) {
    t.resize(rng.uniform_int(1, 3));
    for (auto& id : t) id = static_cast<int>(rng.uniform_int(1, 3));
  }
  std::vector<SpanMask> masks;
  for (std::size_t i = 0; i < n; ++i) masks.push_back(sample_span_mask(model.token_count(), {0.25, 2}, rng));

  auto f = [&](Tape<double>& t) {
    const auto out = model.forward(t, images, masks, RunMode::train(false));
    return ctc::ctc_loss_mean(out.logits, targets);
  };
  return gradient_check_with_invariant_biases(f, model.params().params(), opt);
}

GradcheckReport ctc_gradient_check(std::uint64_t seed, std::size_t instances) {
  Rng rng(seed);
  GradcheckReport worst;
  const GradcheckOptions opt{1e-3, 0, true};
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t frames = rng.uniform_int(1, 6), k = rng.uniform_int(1, 3), u = rng.uniform_int(1, 3);
    Parameter<double> p{"logits", Tensor<double>({1, frames, k + 1}), Tensor<double>()};
    for (auto& v : p.value.data()) v = rng.uniform(-2.0, 2.0);
    std::vector<std::vector<int>> targets{std::vector<int>(u)};
    for (auto& id : targets[0]) id = static_cast<int>(rng.uniform_int(1, k));
    if (frames < ctc::min_frames(targets[0])) continue;
    const auto r = gradient_check([&](Tape<double>& t) { return ctc::ctc_loss_mean(t.param(p), targets); }, {&p}, opt);
    const std::size_t checked = worst.entries_checked + r.entries_checked;
    if (r.max_rel_error > worst.max_rel_error || worst.worst_param.empty()) worst = r;
    worst.entries_checked = checked;
  }
  return worst;
}

}  // namespace htr
