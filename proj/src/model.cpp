#include "htrvt/model.hpp"

#include <stdexcept>

namespace htr {

void ModelConfig::validate() const {
  extractor.validate();
  encoder.validate();
  if (extractor.dim != encoder.dim) {
    throw std::invalid_argument("extractor dim " + std::to_string(extractor.dim) + " != encoder dim " +
                                std::to_string(encoder.dim));
  }
  if (num_classes < 2) throw std::invalid_argument("model needs blank plus at least one character");
}

namespace {

template <typename T>
Parameter<T>* make_mask_token(ParameterSet<T>& ps, std::size_t dim, Rng& rng) {
  Tensor<T> v({dim});
  trunc_normal(v, 0.02, rng);
  return &ps.add("mask_token", std::move(v));
}

}  // namespace

template <typename T>
HtrModel<T>::HtrModel(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_((cfg.validate(), cfg)),
      init_rng_(init_seed),
      extractor_(ps_, cfg.extractor, init_rng_),
      mask_token_(make_mask_token(ps_, cfg.encoder.dim, init_rng_)),
      encoder_(ps_, cfg.encoder, cfg.num_classes, init_rng_) {}

template <typename T>
typename HtrModel<T>::Output HtrModel<T>::forward(Tape<T>& t, const Tensor<T>& images,
                                                  const std::vector<SpanMask>& masks, const RunMode& mode,
                                                  bool keep_attention) const {
  Output out;
  out.tokens = extractor_(t, t.constant(images), mode);
  auto x = out.tokens;
  if (mode.training && !masks.empty()) x = apply_span_mask(x, masks, t.param(*mask_token_));
  auto enc = encoder_(t, x, keep_attention);
  out.logits = enc.logits;
  out.attention = std::move(enc.attention);
  return out;
}

template class HtrModel<float>;
template class HtrModel<double>;

}  // namespace htr
