#pragma once

#include <cstdint>
#include <vector>

#include "htrvt/encoder.hpp"
#include "htrvt/extractor.hpp"
#include "htrvt/span_mask.hpp"

namespace htr {

struct ModelConfig {
  ExtractorConfig extractor;
  EncoderConfig encoder;
  std::size_t num_classes = 2;  // blank + K

  void validate() const;
};

/// CNN extractor, span-mask substitution, sinusoidal positions and the ViT
/// encoder with its per-token classifier. Owns all parameters and buffers.
template <typename T>
class HtrModel {
 public:
  HtrModel(const ModelConfig& cfg, std::uint64_t init_seed);
  HtrModel(const HtrModel&) = delete;
  HtrModel& operator=(const HtrModel&) = delete;

  struct Output {
    Var<T> tokens;                  // extractor output before masking
    Var<T> logits;                  // [N, L, K+1]
    std::vector<Var<T>> attention;  // per block, when requested
  };

  /// masks: one per sample, or empty for no masking. Masks are ignored in eval mode.
  Output forward(Tape<T>& t, const Tensor<T>& images, const std::vector<SpanMask>& masks, const RunMode& mode,
                 bool keep_attention = false) const;

  ParameterSet<T>& params() { return ps_; }
  const ParameterSet<T>& params() const { return ps_; }
  const ModelConfig& config() const { return cfg_; }
  Parameter<T>& mask_token() { return *mask_token_; }
  std::size_t token_count() const { return cfg_.extractor.token_count(); }

 private:
  ModelConfig cfg_;
  ParameterSet<T> ps_;
  Rng init_rng_;
  FeatureExtractor<T> extractor_;
  Parameter<T>* mask_token_;
  VitEncoder<T> encoder_;
};

extern template class HtrModel<float>;
extern template class HtrModel<double>;

}  // namespace htr
