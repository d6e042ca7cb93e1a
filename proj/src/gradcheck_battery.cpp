#include <algorithm>
#include <memory>
#include <numeric>

#include "htrvt/gradcheck.hpp"
#include "htrvt/ops.hpp"
#include "htrvt/random.hpp"

namespace htr {
namespace {

using P = Parameter<double>;

class Fixture {
 public:
  explicit Fixture(Rng& rng) : rng_(rng) {}

  P& uniform(const std::string& name, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<double> v(std::move(shape));
    for (auto& x : v.data()) x = rng_.uniform(lo, hi);
    return add(name, std::move(v));
  }

  // Values bounded away from zero, for inputs of kinked primitives.
  P& away_from_zero(const std::string& name, Shape shape) {
    Tensor<double> v(std::move(shape));
    for (auto& x : v.data()) x = (rng_.bernoulli(0.5) ? 1.0 : -1.0) * rng_.uniform(0.05, 1.0);
    return add(name, std::move(v));
  }

  // Distinct values on a 0.01 grid so pooling windows never tie.
  P& distinct(const std::string& name, Shape shape) {
    Tensor<double> v(std::move(shape));
    std::vector<std::size_t> order(v.numel());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.uniform_int(0, i - 1)]);
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] = 0.01 * static_cast<double>(order[i]) - 0.5;
    return add(name, std::move(v));
  }

  Tensor<double> weights(const Shape& shape) {
    Tensor<double> w(shape);
    for (auto& x : w.data()) x = rng_.uniform(-1.0, 1.0);
    return w;
  }

  std::vector<P*> ptrs() const {
    std::vector<P*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::size_t extent(std::size_t lo, std::size_t hi) { return rng_.uniform_int(lo, hi); }
  Rng& rng() { return rng_; }

 private:
  P& add(const std::string& name, Tensor<double> v) {
    auto p = std::make_unique<P>();
    p->name = name;
    p->grad = Tensor<double>(v.shape());
    p->value = std::move(v);
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Rng& rng_;
  std::vector<std::unique_ptr<P>> params_;
};

// Reduces an op output to a scalar through a fixed random weighting, so every
// output element contributes a distinct adjoint.
Var<double> weighted(Tape<double>& t, Var<double> y, const Tensor<double>& w) {
  return ad::sum(ad::mul(y, t.constant(w)));
}

GradcheckReport run_unary(Rng& rng, Shape shape, bool kinked,
                          const std::function<Var<double>(Var<double>)>& op) {
  Fixture fx(rng);
  auto& x = kinked ? fx.away_from_zero("x", shape) : fx.uniform("x", shape, -2.0, 2.0);
  Tape<double> probe;
  const Shape out_shape = op(probe.param(x)).shape();
  const auto w = fx.weights(out_shape);
  return gradient_check([&](Tape<double>& t) { return weighted(t, op(t.param(x)), w); }, fx.ptrs());
}

Shape random_shape(Rng& rng, std::size_t min_rank, std::size_t max_rank) {
  Shape s(rng.uniform_int(min_rank, max_rank));
  for (auto& d : s) d = rng.uniform_int(1, 4);
  return s;
}

}  // namespace

std::vector<PrimitiveCheck> primitive_checks() {
  std::vector<PrimitiveCheck> checks;

  checks.push_back({"add", [](Rng& rng) {
                      Fixture fx(rng);
                      const Shape s = random_shape(rng, 1, 3);
                      auto& a = fx.uniform("a", s);
                      auto& b = fx.uniform("b", s);
                      const auto w = fx.weights(s);
                      return gradient_check(
                          [&](Tape<double>& t) { return weighted(t, ad::add(t.param(a), t.param(b)), w); }, fx.ptrs());
                    }});
  checks.push_back({"mul", [](Rng& rng) {
                      Fixture fx(rng);
                      const Shape s = random_shape(rng, 1, 3);
                      auto& a = fx.uniform("a", s);
                      auto& b = fx.uniform("b", s);
                      const auto w = fx.weights(s);
                      return gradient_check(
                          [&](Tape<double>& t) { return weighted(t, ad::mul(t.param(a), t.param(b)), w); }, fx.ptrs());
                    }});
  checks.push_back({"scale", [](Rng& rng) {
                      const double s = rng.uniform(-3.0, 3.0);
                      return run_unary(rng, random_shape(rng, 1, 3), false,
                                       [s](Var<double> x) { return ad::scale(x, s); });
                    }});
  checks.push_back({"add_bias", [](Rng& rng) {
                      Fixture fx(rng);
                      Shape s = random_shape(rng, 1, 3);
                      auto& x = fx.uniform("x", s);
                      auto& b = fx.uniform("b", {s.back()});
                      const auto w = fx.weights(s);
                      return gradient_check(
                          [&](Tape<double>& t) { return weighted(t, ad::add_bias(t.param(x), t.param(b)), w); },
                          fx.ptrs());
                    }});
  checks.push_back({"sum", [](Rng& rng) {
                      return run_unary(rng, random_shape(rng, 1, 3), false, [](Var<double> x) { return ad::sum(x); });
                    }});
  checks.push_back({"mean_axis", [](Rng& rng) {
                      const Shape s = random_shape(rng, 1, 4);
                      const std::size_t axis = rng.uniform_int(0, s.size() - 1);
                      return run_unary(rng, s, false, [axis](Var<double> x) { return ad::mean_axis(x, axis); });
                    }});
  checks.push_back({"relu", [](Rng& rng) {
                      return run_unary(rng, random_shape(rng, 1, 3), true, [](Var<double> x) { return ad::relu(x); });
                    }});
  checks.push_back({"gelu", [](Rng& rng) {
                      return run_unary(rng, random_shape(rng, 1, 3), false, [](Var<double> x) { return ad::gelu(x); });
                    }});
  checks.push_back({"matmul", [](Rng& rng) {
                      Fixture fx(rng);
                      const std::size_t m = fx.extent(1, 4), k = fx.extent(1, 4), n = fx.extent(1, 4);
                      auto& a = fx.uniform("a", {m, k});
                      auto& b = fx.uniform("b", {k, n});
                      const auto w = fx.weights({m, n});
                      return gradient_check(
                          [&](Tape<double>& t) { return weighted(t, ad::matmul(t.param(a), t.param(b)), w); },
                          fx.ptrs());
                    }});
  checks.push_back({"linear", [](Rng& rng) {
                      Fixture fx(rng);
                      Shape s = random_shape(rng, 1, 3);
                      const std::size_t out = fx.extent(1, 4);
                      auto& x = fx.uniform("x", s);
                      auto& wt = fx.uniform("w", {out, s.back()});
                      auto& b = fx.uniform("b", {out});
                      Shape os = s;
                      os.back() = out;
                      const auto w = fx.weights(os);
                      return gradient_check(
                          [&](Tape<double>& t) {
                            return weighted(t, ad::linear(t.param(x), t.param(wt), t.param(b)), w);
                          },
                          fx.ptrs());
                    }});
  checks.push_back({"bmm", [](Rng& rng) {
                      Fixture fx(rng);
                      const bool tb = rng.bernoulli(0.5);
                      const std::size_t bs = fx.extent(1, 3), m = fx.extent(1, 4), k = fx.extent(1, 4),
                                        n = fx.extent(1, 4);
                      auto& a = fx.uniform("a", {bs, m, k});
                      auto& b = tb ? fx.uniform("b", {bs, n, k}) : fx.uniform("b", {bs, k, n});
                      const auto w = fx.weights({bs, m, n});
                      return gradient_check(
                          [&](Tape<double>& t) { return weighted(t, ad::bmm(t.param(a), t.param(b), tb), w); },
                          fx.ptrs());
                    }});
  checks.push_back({"conv2d", [](Rng& rng) {
                      Fixture fx(rng);
                      const std::size_t n = fx.extent(1, 2), cin = fx.extent(1, 3), cout = fx.extent(1, 3);
                      const std::size_t kh = fx.extent(1, 3), kw = fx.extent(1, 3);
                      ad::Conv2dOptions opt{fx.extent(1, 2), fx.extent(1, 2), fx.extent(0, kh - 1),
                                            fx.extent(0, kw - 1)};
                      const std::size_t h = fx.extent(kh, kh + 3), wd = fx.extent(kw, kw + 3);
                      auto& x = fx.uniform("x", {n, cin, h, wd});
                      auto& k = fx.uniform("k", {cout, cin, kh, kw});
                      Tape<double> probe;
                      const auto w = fx.weights(ad::conv2d(probe.param(x), probe.param(k), opt).shape());
                      return gradient_check(
                          [&](Tape<double>& t) { return weighted(t, ad::conv2d(t.param(x), t.param(k), opt), w); },
                          fx.ptrs());
                    }});
  checks.push_back({"max_pool2d", [](Rng& rng) {
                      Fixture fx(rng);
                      ad::PoolOptions opt{fx.extent(1, 3), fx.extent(1, 2), 0};
                      opt.pad = fx.extent(0, opt.kernel - 1);
                      auto& x = fx.distinct(
                          "x", {fx.extent(1, 2), fx.extent(1, 2), fx.extent(opt.kernel, 6), fx.extent(opt.kernel, 6)});
                      Tape<double> probe;
                      const auto w = fx.weights(ad::max_pool2d(probe.param(x), opt).shape());
                      return gradient_check(
                          [&](Tape<double>& t) { return weighted(t, ad::max_pool2d(t.param(x), opt), w); },
                          fx.ptrs());
                    }});
  for (const bool training : {true, false}) {
    checks.push_back({training ? "batch_norm2d_train" : "batch_norm2d_eval", [training](Rng& rng) {
                        Fixture fx(rng);
                        const std::size_t n = fx.extent(1, 3), c = fx.extent(1, 3);
                        Shape s{n, c, fx.extent(1, 3), fx.extent(2, 3)};
                        auto& x = fx.uniform("x", s);
                        auto& gamma = fx.uniform("gamma", {c}, 0.5, 1.5);
                        auto& beta = fx.uniform("beta", {c});
                        Tensor<double> rm(Shape{c}), rv(Shape{c});
                        for (auto& v : rm.data()) v = rng.uniform(-0.5, 0.5);
                        for (auto& v : rv.data()) v = rng.uniform(0.5, 1.5);
                        const auto w = fx.weights(s);
                        ad::BatchNormOptions<double> opt;
                        opt.training = training;
                        opt.update_running = false;
                        return gradient_check(
                            [&](Tape<double>& t) {
                              return weighted(
                                  t, ad::batch_norm2d(t.param(x), t.param(gamma), t.param(beta), rm, rv, opt), w);
                            },
                            fx.ptrs());
                      }});
  }
  checks.push_back({"layer_norm", [](Rng& rng) {
                      Fixture fx(rng);
                      Shape s = random_shape(rng, 1, 3);
                      s.back() = fx.extent(3, 6);
                      auto& x = fx.uniform("x", s);
                      auto& gamma = fx.uniform("gamma", {s.back()}, 0.5, 1.5);
                      auto& beta = fx.uniform("beta", {s.back()});
                      const auto w = fx.weights(s);
                      return gradient_check(
                          [&](Tape<double>& t) {
                            return weighted(t, ad::layer_norm(t.param(x), t.param(gamma), t.param(beta), 1e-6), w);
                          },
                          fx.ptrs());
                    }});
  checks.push_back({"softmax_rows", [](Rng& rng) {
                      return run_unary(rng, random_shape(rng, 1, 3), false,
                                       [](Var<double> x) { return ad::softmax_rows(x); });
                    }});
  checks.push_back({"log_softmax_rows", [](Rng& rng) {
                      return run_unary(rng, random_shape(rng, 1, 3), false,
                                       [](Var<double> x) { return ad::log_softmax_rows(x); });
                    }});
  checks.push_back({"reshape", [](Rng& rng) {
                      const Shape s = random_shape(rng, 1, 3);
                      const std::size_t n = shape_numel(s);
                      return run_unary(rng, s, false, [n](Var<double> x) { return ad::reshape(x, {n}); });
                    }});
  checks.push_back({"permute", [](Rng& rng) {
                      const Shape s = random_shape(rng, 2, 4);
                      std::vector<std::size_t> axes(s.size());
                      std::iota(axes.begin(), axes.end(), 0);
                      for (std::size_t i = axes.size(); i > 1; --i) std::swap(axes[i - 1], axes[rng.uniform_int(0, i - 1)]);
                      return run_unary(rng, s, false, [axes](Var<double> x) { return ad::permute(x, axes); });
                    }});
  checks.push_back({"concat", [](Rng& rng) {
                      Fixture fx(rng);
                      Shape s = random_shape(rng, 1, 3);
                      const std::size_t axis = rng.uniform_int(0, s.size() - 1);
                      Shape s2 = s;
                      s2[axis] = fx.extent(1, 3);
                      auto& a = fx.uniform("a", s);
                      auto& b = fx.uniform("b", s2);
                      Tape<double> probe;
                      const auto w = fx.weights(ad::concat<double>({probe.param(a), probe.param(b)}, axis).shape());
                      return gradient_check(
                          [&](Tape<double>& t) {
                            return weighted(t, ad::concat<double>({t.param(a), t.param(b)}, axis), w);
                          },
                          fx.ptrs());
                    }});
  checks.push_back({"gather_rows", [](Rng& rng) {
                      Fixture fx(rng);
                      const std::size_t r = fx.extent(1, 4), c = fx.extent(1, 4);
                      std::vector<std::size_t> rows(fx.extent(1, 6));
                      for (auto& i : rows) i = rng.uniform_int(0, r - 1);
                      auto& x = fx.uniform("x", {r, c});
                      const auto w = fx.weights({rows.size(), c});
                      return gradient_check(
                          [&](Tape<double>& t) { return weighted(t, ad::gather_rows(t.param(x), rows), w); },
                          fx.ptrs());
                    }});
  return checks;
}

PrimitiveCheck corrupted_adjoint_check() {
  return {"corrupted_adjoint", [](Rng& rng) {
            Fixture fx(rng);
            auto& x = fx.uniform("x", random_shape(rng, 1, 2));
            const auto w = fx.weights(x.value.shape());
            auto op = [](Var<double> v) {
              Tensor<double> y = v.value();
              for (auto& e : y.data()) e *= 2.0;
              return v.tape->record(std::move(y), {v}, [v](Tape<double>& t, const Tensor<double>& g) {
                auto& gx = t.grad(v.id);
                for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += 2.02 * g[i];  // 1% off on purpose
              });
            };
            return gradient_check([&](Tape<double>& t) { return weighted(t, op(t.param(x)), w); }, fx.ptrs());
          }};
}

}  // namespace htr
