#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "htrvt/autodiff.hpp"
#include "htrvt/random.hpp"

namespace htr {

/// pe[p, 2i] = sin(p / 10000^(2i/C)), pe[p, 2i+1] = cos(p / 10000^(2i/C)).
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim);

struct EncoderConfig {
  std::size_t blocks = 4;
  std::size_t dim = 768;
  std::size_t heads = 6;
  std::size_t ffn = 3072;
  double ln_eps = 1e-6;

  std::size_t head_dim() const { return dim / heads; }
  void validate() const;
};

template <typename T>
struct LayerNormParams {
  Parameter<T>*gamma, *beta;
};

template <typename T>
struct LinearParams {
  Parameter<T>*w, *b;
};

/// Multi-head self-attention with separate query, key, value and output
/// projections.
template <typename T>
class SelfAttention {
 public:
  SelfAttention(ParameterSet<T>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng);
  /// x[N,L,C] -> out[N,L,C]; attention[N,heads,L,L] when requested.
  Var<T> operator()(Tape<T>& t, Var<T> x, Var<T>* attention = nullptr) const;

 private:
  std::size_t heads_, head_dim_;
  LinearParams<T> q_, k_, v_, o_;
};

/// Pre-LN block: y = x + MSA(LN(x)); out = y + FFN(LN(y)).
template <typename T>
class EncoderBlock {
 public:
  EncoderBlock(ParameterSet<T>& ps, const std::string& name, const EncoderConfig& cfg, Rng& rng);
  Var<T> operator()(Tape<T>& t, Var<T> x, Var<T>* attention = nullptr) const;

 private:
  T eps_;
  LayerNormParams<T> ln1_, ln2_;
  SelfAttention<T> attn_;
  LinearParams<T> fc1_, fc2_;
};

/// Adds positions, runs the blocks, applies a final LN and the per-token
/// classifier producing raw logits over blank + K characters.
template <typename T>
class VitEncoder {
 public:
  VitEncoder(ParameterSet<T>& ps, const EncoderConfig& cfg, std::size_t num_classes, Rng& rng,
             const std::string& prefix = "encoder.");

  struct Output {
    Var<T> logits;                  // [N, L, K+1]
    std::vector<Var<T>> attention;  // per block, [N, heads, L, L]
  };
  /// with_positions=false skips the position table (used by equivariance tests).
  Output operator()(Tape<T>& t, Var<T> tokens, bool keep_attention = false, bool with_positions = true) const;

  const EncoderConfig& config() const { return cfg_; }
  std::size_t num_classes() const { return num_classes_; }

 private:
  EncoderConfig cfg_;
  std::size_t num_classes_;
  std::vector<EncoderBlock<T>> blocks_;
  LayerNormParams<T> norm_;
  LinearParams<T> head_;
};

}  // namespace htr
