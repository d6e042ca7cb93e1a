#pragma once

#include "htrvt/image.hpp"
#include "htrvt/random.hpp"

namespace htr {

struct AugmentConfig {
  bool enabled = true;
  double probability = 0.5;  // per augmentation, drawn independently
  double rotation_deg = 2.0;
  double shear_deg = 5.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double translate = 0.02;  // fraction of width / height
  double brightness_min = 0.8;
  double brightness_max = 1.2;
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double elastic_alpha = 8.0;  // peak displacement in pixels
  double elastic_sigma = 6.0;  // smoothing of the displacement field

  void validate() const;
};

struct AffineParams {
  double rotation_deg = 0.0;
  double shear_deg = 0.0;
  double scale = 1.0;
  double translate_x = 0.0;  // pixels
  double translate_y = 0.0;
};

/// Rotation, horizontal shear and scale about the image centre followed by a
/// translation; inverse-mapped with bilinear sampling and white fill.
Image affine_warp(const Image& img, const AffineParams& p);

/// Thickens dark ink: 3x3 neighbourhood minimum of intensity.
Image dilate_ink(const Image& img);
/// Thins dark ink: 3x3 neighbourhood maximum of intensity.
Image erode_ink(const Image& img);

/// x <- x * brightness, then mean + contrast * (x - mean); a factor of exactly
/// 1 leaves the image untouched.
Image color_jitter(const Image& img, double brightness, double contrast);

/// Uniform noise fields smoothed by a Gaussian of width sigma and rescaled so
/// the largest displacement is alpha pixels; bilinear warp with white fill.
Image elastic_distort(const Image& img, double alpha, double sigma, Rng& rng);

/// Which augmentations fired, for logging and tests.
struct AugmentTrace {
  bool affine = false, erode = false, dilate = false, jitter = false, elastic = false;
};

/// Applies each augmentation with the configured probability, in the order
/// affine, morphology (erosion wins when both are drawn), colour jitter,
/// elastic, and clamps to [0, 1]. The five coin flips are drawn first.
Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng, AugmentTrace* trace = nullptr);

}  // namespace htr
