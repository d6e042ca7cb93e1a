#include "htrvt/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace htr::ad {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;

template <typename T>
MapM<T> as_mat(T* p, std::size_t rows, std::size_t cols) {
  return MapM<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
CMapM<T> as_mat(const T* p, std::size_t rows, std::size_t cols) {
  return CMapM<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::logic_error("operands recorded on different tapes");
}

// Adds src into the adjoint of v when v participates in differentiation.
template <typename T>
void accumulate(Tape<T>& tape, Var<T> v, const Tensor<T>& src) {
  if (!tape.requires_grad(v.id)) return;
  auto& g = tape.grad(v.id);
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += src[i];
}

std::size_t last_dim(const Shape& s, const char* op) {
  if (s.empty()) throw std::invalid_argument(std::string(op) + ": rank-0 input");
  return s.back();
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (!av.same_shape(bv)) shape_error("add", av.shape(), bv.shape());
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (!av.same_shape(bv)) shape_error("mul", av.shape(), bv.shape());
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
  });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  require_same_tape(x, b);
  const auto& xv = x.value();
  const auto& bv = b.value();
  const std::size_t c = last_dim(xv.shape(), "add_bias");
  if (bv.rank() != 1 || bv.dim(0) != c) shape_error("add_bias", xv.shape(), bv.shape());
  Tensor<T> out(xv.shape());
  const std::size_t rows = xv.numel() / c;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] + bv[j];
  return x.tape->record(std::move(out), {x, b}, [x, b, rows, c](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, x, g);
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad(b.id);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const auto& av = a.value();
  T s = T(0);
  for (auto v : av.data()) s += v;
  return a.tape->record(Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

template <typename T>
Var<T> mean_axis(Var<T> a, std::size_t axis) {
  const auto& av = a.value();
  if (axis >= av.rank()) throw std::invalid_argument("mean_axis: axis out of range for " + shape_str(av.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= av.dim(i);
  for (std::size_t i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);
  const std::size_t n = av.dim(axis);
  Shape out_shape;
  for (std::size_t i = 0; i < av.rank(); ++i)
    if (i != axis) out_shape.push_back(av.dim(i));
  Tensor<T> out(out_shape);
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * n + k) * inner + i];
  for (auto& v : out.data()) v *= inv;
  return a.tape->record(std::move(out), {a}, [a, outer, inner, n, inv](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad(a.id);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * n + k) * inner + i] += g[o * inner + i] * inv;
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a.id);
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (av[i] > T(0)) ga[i] += g[i];
  });
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
Var<T> gelu(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = gelu_value(av[i]);
  return a.tape->record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a.id);
    auto& ga = t.grad(a.id);
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T x = av[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// products

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) shape_error("matmul", av.shape(), bv.shape());
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  as_mat(out.ptr(), m, n).noalias() = as_mat(av.ptr(), m, k) * as_mat(bv.ptr(), k, n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    auto gm = as_mat(g.ptr(), m, n);
    if (t.requires_grad(a.id)) {
      as_mat(t.grad(a.id).ptr(), m, k).noalias() += gm * as_mat(t.value(b.id).ptr(), k, n).transpose();
    }
    if (t.requires_grad(b.id)) {
      as_mat(t.grad(b.id).ptr(), k, n).noalias() += as_mat(t.value(a.id).ptr(), m, k).transpose() * gm;
    }
  });
}

namespace {

template <typename T>
Var<T> linear_impl(Var<T> x, Var<T> w, const Var<T>* bias) {
  require_same_tape(x, w);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const std::size_t in = last_dim(xv.shape(), "linear");
  if (wv.rank() != 2 || wv.dim(1) != in) shape_error("linear", xv.shape(), wv.shape());
  const std::size_t out_dim = wv.dim(0);
  const std::size_t rows = xv.numel() / in;
  Shape out_shape = xv.shape();
  out_shape.back() = out_dim;
  Tensor<T> out(out_shape);
  auto om = as_mat(out.ptr(), rows, out_dim);
  om.noalias() = as_mat(xv.ptr(), rows, in) * as_mat(wv.ptr(), out_dim, in).transpose();
  std::vector<Var<T>> inputs{x, w};
  if (bias) {
    require_same_tape(x, *bias);
    const auto& bv = bias->value();
    if (bv.rank() != 1 || bv.dim(0) != out_dim) shape_error("linear bias", wv.shape(), bv.shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bv[j];
    inputs.push_back(*bias);
  }
  const bool has_bias = bias != nullptr;
  const Var<T> b = has_bias ? *bias : Var<T>{};
  return x.tape->record(std::move(out), inputs,
                        [x, w, b, has_bias, rows, in, out_dim](Tape<T>& t, const Tensor<T>& g) {
                          auto gm = as_mat(g.ptr(), rows, out_dim);
                          if (t.requires_grad(x.id)) {
                            as_mat(t.grad(x.id).ptr(), rows, in).noalias() +=
                                gm * as_mat(t.value(w.id).ptr(), out_dim, in);
                          }
                          if (t.requires_grad(w.id)) {
                            as_mat(t.grad(w.id).ptr(), out_dim, in).noalias() +=
                                gm.transpose() * as_mat(t.value(x.id).ptr(), rows, in);
                          }
                          if (has_bias && t.requires_grad(b.id)) {
                            auto& gb = t.grad(b.id);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                          }
                        });
}

}  // namespace

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  return linear_impl<T>(x, w, nullptr);
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  return linear_impl<T>(x, w, &bias);
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) shape_error("bmm", av.shape(), bv.shape());
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k) shape_error("bmm", av.shape(), bv.shape());
  Tensor<T> out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    auto am = as_mat(av.ptr() + i * m * k, m, k);
    auto om = as_mat(out.ptr() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * as_mat(bv.ptr() + i * n * k, n, k).transpose();
    } else {
      om.noalias() = am * as_mat(bv.ptr() + i * k * n, k, n);
    }
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, batch, m, k, n, transpose_b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    const bool need_a = t.requires_grad(a.id);
    const bool need_b = t.requires_grad(b.id);
    T* ga = need_a ? t.grad(a.id).ptr() : nullptr;
    T* gb = need_b ? t.grad(b.id).ptr() : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      auto gm = as_mat(g.ptr() + i * m * n, m, n);
      auto am = as_mat(av.ptr() + i * m * k, m, k);
      if (transpose_b) {
        auto bm = as_mat(bv.ptr() + i * n * k, n, k);
        if (need_a) as_mat(ga + i * m * k, m, k).noalias() += gm * bm;
        if (need_b) as_mat(gb + i * n * k, n, k).noalias() += gm.transpose() * am;
      } else {
        auto bm = as_mat(bv.ptr() + i * k * n, k, n);
        if (need_a) as_mat(ga + i * m * k, m, k).noalias() += gm * bm.transpose();
        if (need_b) as_mat(gb + i * k * n, k, n).noalias() += am.transpose() * gm;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// convolution and pooling

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, oh, ow;
  Conv2dOptions opt;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t np = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * np;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.opt.stride_h + i) - static_cast<long>(g.opt.pad_h);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.opt.stride_w + j) - static_cast<long>(g.opt.pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t np = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * np;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.opt.stride_h + i) - static_cast<long>(g.opt.pad_h);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.opt.stride_w + j) - static_cast<long>(g.opt.pad_w);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, Conv2dOptions opt) {
  require_same_tape(x, k);
  const auto& xv = x.value();
  const auto& kv = k.value();
  if (xv.rank() != 4 || kv.rank() != 4 || xv.dim(1) != kv.dim(1)) shape_error("conv2d", xv.shape(), kv.shape());
  if (opt.stride_h == 0 || opt.stride_w == 0) throw std::invalid_argument("conv2d: stride must be positive");
  ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), kv.dim(3), 0, 0, opt};
  if (g.h + 2 * opt.pad_h < g.kh || g.w + 2 * opt.pad_w < g.kw) {
    throw std::invalid_argument("conv2d: non-positive output extent for input " + shape_str(xv.shape()) +
                                " and kernel " + shape_str(kv.shape()));
  }
  g.oh = (g.h + 2 * opt.pad_h - g.kh) / opt.stride_h + 1;
  g.ow = (g.w + 2 * opt.pad_w - g.kw) / opt.stride_w + 1;

  Tensor<T> out({g.n, g.cout, g.oh, g.ow});
  std::vector<T> cols(g.patch() * g.positions());
  auto km = as_mat(kv.ptr(), g.cout, g.patch());
  for (std::size_t b = 0; b < g.n; ++b) {
    im2col(xv.ptr() + b * g.cin * g.h * g.w, g, cols.data());
    as_mat(out.ptr() + b * g.cout * g.positions(), g.cout, g.positions()).noalias() =
        km * as_mat(static_cast<const T*>(cols.data()), g.patch(), g.positions());
  }
  return x.tape->record(std::move(out), {x, k}, [x, k, g](Tape<T>& t, const Tensor<T>& gout) {
    const auto& xv = t.value(x.id);
    const auto& kv = t.value(k.id);
    const bool need_x = t.requires_grad(x.id);
    const bool need_k = t.requires_grad(k.id);
    std::vector<T> cols(g.patch() * g.positions());
    std::vector<T> dcols(need_x ? cols.size() : 0);
    auto km = as_mat(kv.ptr(), g.cout, g.patch());
    for (std::size_t b = 0; b < g.n; ++b) {
      auto gm = as_mat(gout.ptr() + b * g.cout * g.positions(), g.cout, g.positions());
      if (need_k) {
        im2col(xv.ptr() + b * g.cin * g.h * g.w, g, cols.data());
        as_mat(t.grad(k.id).ptr(), g.cout, g.patch()).noalias() +=
            gm * as_mat(static_cast<const T*>(cols.data()), g.patch(), g.positions()).transpose();
      }
      if (need_x) {
        as_mat(dcols.data(), g.patch(), g.positions()).noalias() = km.transpose() * gm;
        col2im_add(dcols.data(), g, t.grad(x.id).ptr() + b * g.cin * g.h * g.w);
      }
    }
  });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, PoolOptions opt) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw std::invalid_argument("max_pool2d: expected rank-4 input, got " + shape_str(xv.shape()));
  if (opt.kernel == 0 || opt.stride == 0 || opt.pad >= opt.kernel) {
    throw std::invalid_argument("max_pool2d: invalid kernel/stride/pad");
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h + 2 * opt.pad < opt.kernel || w + 2 * opt.pad < opt.kernel) {
    throw std::invalid_argument("max_pool2d: non-positive output extent for " + shape_str(xv.shape()));
  }
  const std::size_t oh = (h + 2 * opt.pad - opt.kernel) / opt.stride + 1;
  const std::size_t ow = (w + 2 * opt.pad - opt.kernel) / opt.stride + 1;
  Tensor<T> out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = xv.ptr() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t i = 0; i < opt.kernel; ++i) {
          const long iy = static_cast<long>(oy * opt.stride + i) - static_cast<long>(opt.pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t j = 0; j < opt.kernel; ++j) {
            const long ix = static_cast<long>(ox * opt.stride + j) - static_cast<long>(opt.pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (!found || src[idx] > best) {
              best = src[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = best;
        argmax[o] = plane * h * w + best_idx;
      }
    }
  }
  return x.tape->record(std::move(out), {x}, [x, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad(x.id);
    for (std::size_t o = 0; o < g.numel(); ++o) gx[argmax[o]] += g[o];
  });
}

// ---------------------------------------------------------------------------
// normalisation

template <typename T>
Var<T> batch_norm2d(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                    const BatchNormOptions<T>& opt) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const auto& xv = x.value();
  if (xv.rank() != 4) throw std::invalid_argument("batch_norm2d: expected rank-4 input, got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  if (gv.numel() != c || bv.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
    shape_error("batch_norm2d", xv.shape(), gv.shape());
  }
  const std::size_t count = n * hw;
  std::vector<T> mean(c), inv_std(c);
  if (opt.training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s = T(0);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xv.ptr() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const T mu = s / static_cast<T>(count);
      T ss = T(0);
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = xv.ptr() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const T var = ss / static_cast<T>(count);
      mean[ch] = mu;
      inv_std[ch] = T(1) / std::sqrt(var + opt.eps);
      if (opt.update_running) {
        running_mean[ch] = (T(1) - opt.momentum) * running_mean[ch] + opt.momentum * mu;
        running_var[ch] = (T(1) - opt.momentum) * running_var[ch] + opt.momentum * var;
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var[ch] + opt.eps);
    }
  }
  Tensor<T> out(xv.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = xv.ptr() + (b * c + ch) * hw;
      T* q = out.ptr() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) q[i] = gv[ch] * (p[i] - mean[ch]) * inv_std[ch] + bv[ch];
    }
  }
  const bool training = opt.training;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, hw, count, training, mean = std::move(mean), inv_std = std::move(inv_std)](
          Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(x.id);
        const auto& gv = t.value(gamma.id);
        const bool need_x = t.requires_grad(x.id);
        T* gx = need_x ? t.grad(x.id).ptr() : nullptr;
        T* gg = t.requires_grad(gamma.id) ? t.grad(gamma.id).ptr() : nullptr;
        T* gb = t.requires_grad(beta.id) ? t.grad(beta.id).ptr() : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t b = 0; b < n; ++b) {
            const T* p = xv.ptr() + (b * c + ch) * hw;
            const T* d = g.ptr() + (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g += d[i];
              sum_gx += d[i] * (p[i] - mean[ch]) * inv_std[ch];
            }
          }
          if (gg) gg[ch] += sum_gx;
          if (gb) gb[ch] += sum_g;
          if (!need_x) continue;
          const T scale = gv[ch] * inv_std[ch];
          const T mg = sum_g / static_cast<T>(count);
          const T mgx = sum_gx / static_cast<T>(count);
          for (std::size_t b = 0; b < n; ++b) {
            const T* p = xv.ptr() + (b * c + ch) * hw;
            const T* d = g.ptr() + (b * c + ch) * hw;
            T* q = gx + (b * c + ch) * hw;
            if (training) {
              for (std::size_t i = 0; i < hw; ++i) {
                const T xhat = (p[i] - mean[ch]) * inv_std[ch];
                q[i] += scale * (d[i] - mg - xhat * mgx);
              }
            } else {
              for (std::size_t i = 0; i < hw; ++i) q[i] += scale * d[i];
            }
          }
        }
      });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  const auto& xv = x.value();
  const std::size_t c = last_dim(xv.shape(), "layer_norm");
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  if (gv.numel() != c || bv.numel() != c) shape_error("layer_norm", xv.shape(), gv.shape());
  const std::size_t rows = xv.numel() / c;
  Tensor<T> out(xv.shape());
  std::vector<T> xhat(xv.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = xv.ptr() + r * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += p[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (p[j] - mu) * is;
      out[r * c + j] = gv[j] * xhat[r * c + j] + bv[j];
    }
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            Tape<T>& t, const Tensor<T>& g) {
                          const auto& gv = t.value(gamma.id);
                          T* gx = t.requires_grad(x.id) ? t.grad(x.id).ptr() : nullptr;
                          T* gg = t.requires_grad(gamma.id) ? t.grad(gamma.id).ptr() : nullptr;
                          T* gb = t.requires_grad(beta.id) ? t.grad(beta.id).ptr() : nullptr;
                          std::vector<T> dxhat(c);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* d = g.ptr() + r * c;
                            const T* xh = xhat.data() + r * c;
                            T m1 = T(0), m2 = T(0);
                            for (std::size_t j = 0; j < c; ++j) {
                              if (gg) gg[j] += d[j] * xh[j];
                              if (gb) gb[j] += d[j];
                              dxhat[j] = d[j] * gv[j];
                              m1 += dxhat[j];
                              m2 += dxhat[j] * xh[j];
                            }
                            if (!gx) continue;
                            m1 /= static_cast<T>(c);
                            m2 /= static_cast<T>(c);
                            for (std::size_t j = 0; j < c; ++j) {
                              gx[r * c + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> softmax_rows_value(const Tensor<T>& x) {
  const std::size_t k = last_dim(x.shape(), "softmax_rows");
  const std::size_t rows = x.numel() / k;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.ptr() + r * k;
    T* q = out.ptr() + r * k;
    const double m = *std::max_element(p, p + k);
    // Exponentials and their sum in double, so each output is rounded once
    // and float rows still sum to 1 within a few ulps.
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(p[j]) - m);
    for (std::size_t j = 0; j < k; ++j) q[j] = static_cast<T>(std::exp(static_cast<double>(p[j]) - m) / s);
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax_rows_value(const Tensor<T>& x) {
  const std::size_t k = last_dim(x.shape(), "log_softmax_rows");
  const std::size_t rows = x.numel() / k;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.ptr() + r * k;
    T* q = out.ptr() + r * k;
    const double m = *std::max_element(p, p + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(p[j]) - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) q[j] = static_cast<T>(p[j] - lse);
  }
  return out;
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  Tensor<T> out = softmax_rows_value(x.value());
  const std::size_t k = x.value().shape().back();
  return x.tape->record(std::move(out), {x}, [x, k](Tape<T>& t, const Tensor<T>& g) {
    const std::size_t rows = g.numel() / k;
    // The output node is the one being replayed; recompute y from the input.
    const Tensor<T> y = softmax_rows_value(t.value(x.id));
    auto& gx = t.grad(x.id);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = T(0);
      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> x) {
  Tensor<T> out = log_softmax_rows_value(x.value());
  const std::size_t k = x.value().shape().back();
  return x.tape->record(std::move(out), {x}, [x, k](Tape<T>& t, const Tensor<T>& g) {
    const std::size_t rows = g.numel() / k;
    const Tensor<T> y = softmax_rows_value(t.value(x.id));
    auto& gx = t.grad(x.id);
    for (std::size_t r = 0; r < rows; ++r) {
      T s = T(0);
      for (std::size_t j = 0; j < k; ++j) s += g[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r * k + j] - y[r * k + j] * s;
    }
  });
}

// ---------------------------------------------------------------------------
// layout

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) { accumulate(t, x, g); });
}

template <typename T>
Var<T> permute(Var<T> x, const std::vector<std::size_t>& axes) {
  const auto& xv = x.value();
  const std::size_t rank = xv.rank();
  if (axes.size() != rank) throw std::invalid_argument("permute: axes rank mismatch for " + shape_str(xv.shape()));
  std::vector<bool> seen(rank, false);
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw std::invalid_argument("permute: axes are not a permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * xv.dim(i);
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = xv.dim(axes[i]);
    src_strides[i] = in_strides[axes[i]];
  }
  // Maps each output element to its source offset.
  std::vector<std::size_t> src(xv.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < src.size(); ++o) {
    src[o] = off;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      off += src_strides[d];
      if (idx[d] < out_shape[d]) break;
      off -= src_strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = xv[src[o]];
  return x.tape->record(std::move(out), {x}, [x, src = std::move(src)](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad(x.id);
    for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const auto& first = xs[0].value();
  if (axis >= first.rank()) throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& v : xs) {
    if (v.tape != xs[0].tape) throw std::logic_error("operands recorded on different tapes");
    const auto& s = v.value().shape();
    if (s.size() != first.rank()) shape_error("concat", first.shape(), s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first.dim(i)) shape_error("concat", first.shape(), s);
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first.dim(i);
  for (std::size_t i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);
  const std::size_t total = out_shape[axis];
  Tensor<T> out(out_shape);
  std::size_t start = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& v = xs[k].value();
    const std::size_t e = extents[k];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.ptr() + o * e * inner, e * inner, out.ptr() + (o * total + start) * inner);
    start += e;
  }
  return xs[0].tape->record(std::move(out), xs, [xs, extents, outer, inner, total](Tape<T>& t, const Tensor<T>& g) {
    std::size_t start = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const std::size_t e = extents[k];
      if (t.requires_grad(xs[k].id)) {
        auto& gx = t.grad(xs[k].id);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < e * inner; ++i) gx[o * e * inner + i] += g[(o * total + start) * inner + i];
      }
      start += e;
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, const std::vector<std::size_t>& rows) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw std::invalid_argument("gather_rows: expected rank-2 table, got " + shape_str(tv.shape()));
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const std::size_t r = tv.dim(0), c = tv.dim(1);
  Tensor<T> out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) throw std::out_of_range("gather_rows: row index " + std::to_string(rows[i]) + " >= " + std::to_string(r));
    std::copy_n(tv.ptr() + rows[i] * c, c, out.ptr() + i * c);
  }
  return table.tape->record(std::move(out), {table}, [table, rows, c](Tape<T>& t, const Tensor<T>& g) {
    auto& gt = t.grad(table.id);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gt[rows[i] * c + j] += g[i * c + j];
  });
}

#define HTR_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> add(Var<T>, Var<T>);                                                                 \
  template Var<T> mul(Var<T>, Var<T>);                                                                 \
  template Var<T> scale(Var<T>, T);                                                                    \
  template Var<T> add_bias(Var<T>, Var<T>);                                                            \
  template Var<T> sum(Var<T>);                                                                         \
  template Var<T> mean(Var<T>);                                                                        \
  template Var<T> mean_axis(Var<T>, std::size_t);                                                      \
  template Var<T> relu(Var<T>);                                                                        \
  template Var<T> gelu(Var<T>);                                                                        \
  template T gelu_value(T);                                                                            \
  template Var<T> matmul(Var<T>, Var<T>);                                                              \
  template Var<T> linear(Var<T>, Var<T>);                                                              \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                      \
  template Var<T> bmm(Var<T>, Var<T>, bool);                                                           \
  template Var<T> conv2d(Var<T>, Var<T>, Conv2dOptions);                                               \
  template Var<T> max_pool2d(Var<T>, PoolOptions);                                                     \
  template Var<T> batch_norm2d(Var<T>, Var<T>, Var<T>, Tensor<T>&, Tensor<T>&, const BatchNormOptions<T>&); \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                               \
  template Var<T> softmax_rows(Var<T>);                                                                \
  template Var<T> log_softmax_rows(Var<T>);                                                            \
  template Tensor<T> softmax_rows_value(const Tensor<T>&);                                             \
  template Tensor<T> log_softmax_rows_value(const Tensor<T>&);                                         \
  template Var<T> reshape(Var<T>, Shape);                                                              \
  template Var<T> permute(Var<T>, const std::vector<std::size_t>&);                                    \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                     \
  template Var<T> gather_rows(Var<T>, const std::vector<std::size_t>&);

HTR_INSTANTIATE_OPS(float)
HTR_INSTANTIATE_OPS(double)

}  // namespace htr::ad
