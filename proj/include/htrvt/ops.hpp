#pragma once

#include <cstddef>
#include <vector>

#include "htrvt/autodiff.hpp"

// Differentiable primitives. Every op records its output on the tape of its
// inputs together with an exact adjoint.
namespace htr::ad {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
/// x[..., C] + b[C]
template <typename T> Var<T> add_bias(Var<T> x, Var<T> b);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
/// Mean over one axis; the axis is removed from the result shape.
template <typename T> Var<T> mean_axis(Var<T> a, std::size_t axis);

template <typename T> Var<T> relu(Var<T> a);
/// Exact x * Phi(x) with the Gaussian CDF from erf.
template <typename T> Var<T> gelu(Var<T> a);

/// a[m,k] * b[k,n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// x[..., in] * w[out, in]^T (+ bias[out])
template <typename T> Var<T> linear(Var<T> x, Var<T> w);
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> bias);
/// Batched a[B,m,k] * b[B,k,n], or b[B,n,k]^T when transpose_b is set.
template <typename T> Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false);

struct Conv2dOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};
/// Cross-correlation of x[N,Cin,H,W] with k[Cout,Cin,kh,kw], zero padding.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> k, Conv2dOptions opt = {});

struct PoolOptions {
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t pad = 1;
};
template <typename T> Var<T> max_pool2d(Var<T> x, PoolOptions opt = {});

template <typename T>
struct BatchNormOptions {
  bool training = true;
  bool update_running = true;
  T momentum = T(0.1);
  T eps = T(1e-5);
};
/// Per-channel normalisation of x[N,C,H,W]. Training mode normalises with the
/// biased batch variance and, if requested, folds the batch statistics into
/// the running buffers as new = (1 - momentum) * old + momentum * batch.
template <typename T>
Var<T> batch_norm2d(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                    const BatchNormOptions<T>& opt);

template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6));
template <typename T> Var<T> softmax_rows(Var<T> x);
template <typename T> Var<T> log_softmax_rows(Var<T> x);

template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> permute(Var<T> x, const std::vector<std::size_t>& axes);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis);
/// Rows of table[R,C] selected by index; gradients scatter-add back.
template <typename T> Var<T> gather_rows(Var<T> table, const std::vector<std::size_t>& rows);

// Value-only helpers shared with non-differentiable code paths.
template <typename T> Tensor<T> softmax_rows_value(const Tensor<T>& x);
template <typename T> Tensor<T> log_softmax_rows_value(const Tensor<T>& x);
template <typename T> T gelu_value(T x);

}  // namespace htr::ad
