#include "htrvt/extractor.hpp"

#include <cmath>
#include <stdexcept>

#include "htrvt/ops.hpp"

namespace htr {

template <typename T>
void trunc_normal(Tensor<T>& t, double std, Rng& rng) {
  for (auto& v : t.data()) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(z * std);
  }
}

void ExtractorConfig::validate() const {
  if (input_h == 0 || input_w == 0 || input_h % 16 != 0 || input_w % 4 != 0) {
    throw std::invalid_argument("extractor input must be a positive multiple of 16 (height) and 4 (width), got " +
                                std::to_string(input_h) + "x" + std::to_string(input_w));
  }
  if (stem == 0 || dim == 0 || blocks_per_stage == 0) throw std::invalid_argument("extractor widths must be positive");
  for (auto w : widths) {
    if (w == 0) throw std::invalid_argument("extractor widths must be positive");
  }
}

template <typename T>
Conv2d<T>::Conv2d(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                  std::size_t stride_h, std::size_t stride_w, std::size_t pad, Rng& rng)
    : stride_h_(stride_h), stride_w_(stride_w), pad_(pad) {
  // He initialisation with fan-out, as is usual for ReLU residual networks.
  Tensor<T> w({out, in, k, k});
  const double std = std::sqrt(2.0 / static_cast<double>(out * k * k));
  for (auto& v : w.data()) v = static_cast<T>(rng.normal() * std);
  w_ = &ps.add(name + ".weight", std::move(w));
}

template <typename T>
Var<T> Conv2d<T>::operator()(Tape<T>& t, Var<T> x) const {
  return ad::conv2d(x, t.param(*w_), ad::Conv2dOptions{stride_h_, stride_w_, pad_, pad_});
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(ParameterSet<T>& ps, const std::string& name, std::size_t channels) {
  gamma_ = &ps.add(name + ".weight", Tensor<T>({channels}, T(1)));
  beta_ = &ps.add(name + ".bias", Tensor<T>({channels}));
  mean_ = &ps.add_buffer(name + ".running_mean", Tensor<T>({channels}));
  var_ = &ps.add_buffer(name + ".running_var", Tensor<T>({channels}, T(1)));
}

template <typename T>
Var<T> BatchNorm2d<T>::operator()(Tape<T>& t, Var<T> x, const RunMode& mode) const {
  ad::BatchNormOptions<T> opt;
  opt.training = mode.training;
  opt.update_running = mode.training && mode.update_running;
  return ad::batch_norm2d(x, t.param(*gamma_), t.param(*beta_), mean_->value, var_->value, opt);
}

template <typename T>
BasicBlock<T>::BasicBlock(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
                          std::size_t stride_h, std::size_t stride_w, Rng& rng)
    : conv1_(ps, name + ".conv1", in, out, 3, stride_h, stride_w, 1, rng),
      conv2_(ps, name + ".conv2", out, out, 3, 1, 1, 1, rng),
      bn1_(ps, name + ".bn1", out),
      bn2_(ps, name + ".bn2", out),
      has_down_(in != out || stride_h != 1 || stride_w != 1) {
  if (has_down_) {
    down_conv_.emplace_back(ps, name + ".down.conv", in, out, 1, stride_h, stride_w, 0, rng);
    down_bn_.emplace_back(ps, name + ".down.bn", out);
  }
}

template <typename T>
Var<T> BasicBlock<T>::operator()(Tape<T>& t, Var<T> x, const RunMode& mode) const {
  auto y = ad::relu(bn1_(t, conv1_(t, x), mode));
  y = bn2_(t, conv2_(t, y), mode);
  const auto shortcut = has_down_ ? down_bn_[0](t, down_conv_[0](t, x), mode) : x;
  return ad::relu(ad::add(y, shortcut));
}

template <typename T>
FeatureExtractor<T>::FeatureExtractor(ParameterSet<T>& ps, const ExtractorConfig& cfg, Rng& rng,
                                      const std::string& prefix)
    : cfg_((cfg.validate(), cfg)),
      stem_conv_(ps, prefix + "stem.conv", 1, cfg.stem, 7, 2, 2, 3, rng),
      stem_bn_(ps, prefix + "stem.bn", cfg.stem) {
  const std::size_t strides_h[3] = {1, 2, 2};
  std::size_t in = cfg.stem;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string name = prefix + "stage" + std::to_string(s + 1) + "." + std::to_string(b);
      blocks_.emplace_back(ps, name, in, cfg.widths[s], b == 0 ? strides_h[s] : 1, 1, rng);
      in = cfg.widths[s];
    }
  }
  Tensor<T> w({cfg.dim, in});
  trunc_normal(w, 0.02, rng);
  proj_w_ = &ps.add(prefix + "proj.weight", std::move(w));
  proj_b_ = &ps.add(prefix + "proj.bias", Tensor<T>({cfg.dim}));
}

template <typename T>
Var<T> FeatureExtractor<T>::backbone(Tape<T>& t, Var<T> images, const RunMode& mode) const {
  const auto& s = images.value().shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.input_h || s[3] != cfg_.input_w) {
    throw std::invalid_argument("extractor: expected images [N,1," + std::to_string(cfg_.input_h) + "," +
                                std::to_string(cfg_.input_w) + "], got " + shape_str(s));
  }
  auto x = ad::relu(stem_bn_(t, stem_conv_(t, images), mode));
  x = ad::max_pool2d(x, ad::PoolOptions{3, 2, 1});
  for (const auto& b : blocks_) x = b(t, x, mode);
  return x;
}

template <typename T>
Var<T> FeatureExtractor<T>::operator()(Tape<T>& t, Var<T> images, const RunMode& mode) const {
  auto x = backbone(t, images, mode);        // [N, C, h, L]
  x = ad::mean_axis(x, 2);                   // [N, C, L]
  x = ad::permute(x, {0, 2, 1});             // [N, L, C]
  return ad::linear(x, t.param(*proj_w_), t.param(*proj_b_));
}

#define HTR_INSTANTIATE_EXTRACTOR(T)                       \
  template void trunc_normal(Tensor<T>&, double, Rng&);  \
  template class Conv2d<T>;                              \
  template class BatchNorm2d<T>;                         \
  template class BasicBlock<T>;                          \
  template class FeatureExtractor<T>;

HTR_INSTANTIATE_EXTRACTOR(float)
HTR_INSTANTIATE_EXTRACTOR(double)

}  // namespace htr
