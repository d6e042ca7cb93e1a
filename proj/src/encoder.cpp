#include "htrvt/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "htrvt/extractor.hpp"
#include "htrvt/ops.hpp"

namespace htr {
namespace {

template <typename T>
LinearParams<T> make_linear(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  Tensor<T> w({out, in});
  trunc_normal(w, 0.02, rng);
  return {&ps.add(name + ".weight", std::move(w)), &ps.add(name + ".bias", Tensor<T>({out}))};
}

template <typename T>
LayerNormParams<T> make_norm(ParameterSet<T>& ps, const std::string& name, std::size_t dim) {
  return {&ps.add(name + ".weight", Tensor<T>({dim}, T(1))), &ps.add(name + ".bias", Tensor<T>({dim}))};
}

template <typename T>
Var<T> apply(Tape<T>& t, const LinearParams<T>& l, Var<T> x) {
  return ad::linear(x, t.param(*l.w), t.param(*l.b));
}

template <typename T>
Var<T> apply(Tape<T>& t, const LayerNormParams<T>& n, Var<T> x, T eps) {
  return ad::layer_norm(x, t.param(*n.gamma), t.param(*n.beta), eps);
}

}  // namespace

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_positions: dim must be even, got " + std::to_string(dim));
  if (length == 0) throw std::invalid_argument("sinusoidal_positions: length must be positive");
  Tensor<T> pe({length, dim});
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle =
          static_cast<double>(p) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
      pe[p * dim + 2 * i] = static_cast<T>(std::sin(angle));
      pe[p * dim + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

void EncoderConfig::validate() const {
  if (blocks == 0 || dim == 0 || heads == 0 || ffn == 0) throw std::invalid_argument("encoder sizes must be positive");
  if (dim % heads != 0) {
    throw std::invalid_argument("encoder dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                                " heads");
  }
  if (dim % 2 != 0) throw std::invalid_argument("encoder dim must be even for sinusoidal positions");
}

template <typename T>
SelfAttention<T>::SelfAttention(ParameterSet<T>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng)
    : heads_(cfg.heads),
      head_dim_(cfg.head_dim()),
      q_(make_linear(ps, name + ".q", cfg.dim, cfg.dim, rng)),
      k_(make_linear(ps, name + ".k", cfg.dim, cfg.dim, rng)),
      v_(make_linear(ps, name + ".v", cfg.dim, cfg.dim, rng)),
      o_(make_linear(ps, name + ".out", cfg.dim, cfg.dim, rng)) {}

template <typename T>
Var<T> SelfAttention<T>::operator()(Tape<T>& t, Var<T> x, Var<T>* attention) const {
  const auto& s = x.value().shape();
  const std::size_t n = s[0], len = s[1], c = s[2];
  auto split = [&](Var<T> y) {
    y = ad::reshape(y, {n, len, heads_, head_dim_});
    y = ad::permute(y, {0, 2, 1, 3});
    return ad::reshape(y, {n * heads_, len, head_dim_});
  };
  const auto q = split(apply(t, q_, x)), k = split(apply(t, k_, x)), v = split(apply(t, v_, x));
  auto scores = ad::scale(ad::bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim_))));
  const auto attn = ad::softmax_rows(scores);  // [N*h, L, L]
  if (attention) *attention = ad::reshape(attn, {n, heads_, len, len});
  auto y = ad::bmm(attn, v);                   // [N*h, L, d]
  y = ad::reshape(y, {n, heads_, len, head_dim_});
  y = ad::permute(y, {0, 2, 1, 3});
  return apply(t, o_, ad::reshape(y, {n, len, c}));
}

template <typename T>
EncoderBlock<T>::EncoderBlock(ParameterSet<T>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng)
    : eps_(static_cast<T>(cfg.ln_eps)),
      ln1_(make_norm(ps, name + ".ln1", cfg.dim)),
      ln2_(make_norm(ps, name + ".ln2", cfg.dim)),
      attn_(ps, name + ".attn", cfg, rng),
      fc1_(make_linear(ps, name + ".fc1", cfg.dim, cfg.ffn, rng)),
      fc2_(make_linear(ps, name + ".fc2", cfg.ffn, cfg.dim, rng)) {}

template <typename T>
Var<T> EncoderBlock<T>::operator()(Tape<T>& t, Var<T> x, Var<T>* attention) const {
  const auto y = ad::add(x, attn_(t, apply(t, ln1_, x, eps_), attention));
  const auto h = ad::gelu(apply(t, fc1_, apply(t, ln2_, y, eps_)));
  return ad::add(y, apply(t, fc2_, h));
}

template <typename T>
VitEncoder<T>::VitEncoder(ParameterSet<T>& ps, const EncoderConfig& cfg, std::size_t num_classes, Rng& rng,
                          const std::string& prefix)
    : cfg_((cfg.validate(), cfg)), num_classes_(num_classes) {
  if (num_classes < 2) throw std::invalid_argument("encoder: need blank plus at least one character");
  for (std::size_t b = 0; b < cfg.blocks; ++b) blocks_.emplace_back(ps, prefix + "block" + std::to_string(b), cfg, rng);
  norm_ = make_norm(ps, prefix + "norm", cfg.dim);
  head_ = make_linear(ps, prefix + "head", cfg.dim, num_classes, rng);
}

template <typename T>
typename VitEncoder<T>::Output VitEncoder<T>::operator()(Tape<T>& t, Var<T> tokens, bool keep_attention,
                                                          bool with_positions) const {
  const auto& s = tokens.value().shape();
  if (s.size() != 3 || s[2] != cfg_.dim) {
    throw std::invalid_argument("encoder: expected tokens [N,L," + std::to_string(cfg_.dim) + "], got " + shape_str(s));
  }
  Output out;
  auto x = tokens;
  if (with_positions) {
    const std::size_t n = s[0], len = s[1], c = s[2];
    const auto pe = sinusoidal_positions<T>(len, c);
    Tensor<T> tiled({n, len, c});
    for (std::size_t b = 0; b < n; ++b) std::copy(pe.ptr(), pe.ptr() + len * c, tiled.ptr() + b * len * c);
    x = ad::add(x, t.constant(std::move(tiled)));
  }
  for (const auto& block : blocks_) {
    Var<T> attn;
    x = block(t, x, keep_attention ? &attn : nullptr);
    if (keep_attention) out.attention.push_back(attn);
  }
  out.logits = apply(t, head_, apply(t, norm_, x, static_cast<T>(cfg_.ln_eps)));
  return out;
}

#define HTR_INSTANTIATE_ENCODER(T)                                     \
  template Tensor<T> sinusoidal_positions<T>(std::size_t, std::size_t); \
  template class SelfAttention<T>;                                     \
  template class EncoderBlock<T>;                                      \
  template class VitEncoder<T>;

HTR_INSTANTIATE_ENCODER(float)
HTR_INSTANTIATE_ENCODER(double)

}  // namespace htr
