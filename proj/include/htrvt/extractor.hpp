#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "htrvt/autodiff.hpp"
#include "htrvt/random.hpp"

namespace htr {

/// Forward-pass flavour for layers with batch statistics.
struct RunMode {
  bool training = false;
  /// Fold batch statistics into the running buffers (training only).
  bool update_running = false;

  static RunMode train(bool update = true) { return {true, update}; }
  static RunMode eval() { return {false, false}; }
};

/// Weights drawn from N(0, std^2) restricted to two standard deviations.
template <typename T>
void trunc_normal(Tensor<T>& t, double std, Rng& rng);

struct ExtractorConfig {
  std::size_t input_h = 64;
  std::size_t input_w = 512;
  std::size_t stem = 64;
  /// Channel widths of the three retained residual stages.
  std::array<std::size_t, 3> widths{192, 384, 768};
  std::size_t blocks_per_stage = 2;
  std::size_t dim = 768;

  /// The stem and pooling divide both axes by 4; stages two and three halve
  /// the height again, so tokens are columns of a height/16 x width/4 map.
  std::size_t feature_h() const { return input_h / 16; }
  std::size_t token_count() const { return input_w / 4; }
  void validate() const;
};

template <typename T>
class Conv2d {
 public:
  Conv2d(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
         std::size_t stride_h, std::size_t stride_w, std::size_t pad, Rng& rng);
  Var<T> operator()(Tape<T>& t, Var<T> x) const;

 private:
  Parameter<T>* w_;
  std::size_t stride_h_, stride_w_, pad_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d(ParameterSet<T>& ps, const std::string& name, std::size_t channels);
  Var<T> operator()(Tape<T>& t, Var<T> x, const RunMode& mode) const;
  Parameter<T>& gamma() const { return *gamma_; }

 private:
  Parameter<T>*gamma_, *beta_;
  Buffer<T>*mean_, *var_;
};

template <typename T>
class BasicBlock {
 public:
  BasicBlock(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t stride_h,
             std::size_t stride_w, Rng& rng);
  Var<T> operator()(Tape<T>& t, Var<T> x, const RunMode& mode) const;

 private:
  Conv2d<T> conv1_, conv2_;
  BatchNorm2d<T> bn1_, bn2_;
  bool has_down_;
  std::vector<Conv2d<T>> down_conv_;
  std::vector<BatchNorm2d<T>> down_bn_;
};

/// Truncated ResNet-18: 7x7 stride-2 stem, 3x3 stride-2 max pool, three
/// stages of basic blocks with strides (1,1), (2,1), (2,1), mean over the
/// remaining height and a per-token linear projection.
template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor(ParameterSet<T>& ps, const ExtractorConfig& cfg, Rng& rng, const std::string& prefix = "extractor.");

  /// images[N,1,H,W] -> tokens[N,L,dim]
  Var<T> operator()(Tape<T>& t, Var<T> images, const RunMode& mode) const;
  /// Backbone output before height pooling: [N, widths[2], H/16, W/4].
  Var<T> backbone(Tape<T>& t, Var<T> images, const RunMode& mode) const;

  const ExtractorConfig& config() const { return cfg_; }

 private:
  ExtractorConfig cfg_;
  Conv2d<T> stem_conv_;
  BatchNorm2d<T> stem_bn_;
  std::vector<BasicBlock<T>> blocks_;
  Parameter<T>*proj_w_, *proj_b_;
};

}  // namespace htr
