#include "htrvt/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace htr {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Bilinear lookup at pixel-centre coordinates; taps outside the image read white.
float sample(const Image& img, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const auto y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double wy = y - fy, wx = x - fx;
  auto px = [&img](long r, long c) -> double {
    if (r < 0 || c < 0 || r >= static_cast<long>(img.height) || c >= static_cast<long>(img.width)) return 1.0;
    return img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  };
  if (wx == 0.0 && wy == 0.0) return static_cast<float>(px(y0, x0));
  const double top = px(y0, x0) * (1.0 - wx) + px(y0, x0 + 1) * wx;
  const double bot = px(y0 + 1, x0) * (1.0 - wx) + px(y0 + 1, x0 + 1) * wx;
  return static_cast<float>(top * (1.0 - wy) + bot * wy);
}

template <typename Pick>
Image filter3(const Image& img, Pick pick) {
  Image out(img.height, img.width);
  for (std::size_t r = 0; r < img.height; ++r) {
    const std::size_t r0 = r == 0 ? 0 : r - 1, r1 = std::min(r + 1, img.height - 1);
    for (std::size_t c = 0; c < img.width; ++c) {
      const std::size_t c0 = c == 0 ? 0 : c - 1, c1 = std::min(c + 1, img.width - 1);
      float v = img.at(r, c);
      for (std::size_t y = r0; y <= r1; ++y) {
        for (std::size_t x = c0; x <= c1; ++x) v = pick(v, img.at(y, x));
      }
      out.at(r, c) = v;
    }
  }
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    total += k[i];
  }
  for (double& v : k) v /= total;
  return k;
}

// Separable Gaussian blur with clamped borders.
void smooth(std::vector<double>& f, std::size_t h, std::size_t w, const std::vector<double>& k) {
  const long radius = static_cast<long>(k.size() / 2);
  std::vector<double> tmp(f.size());
  auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(n) - 1)); };
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double s = 0.0;
      for (long t = -radius; t <= radius; ++t) s += k[t + radius] * f[r * w + clampi(static_cast<long>(c) + t, w)];
      tmp[r * w + c] = s;
    }
  }
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double s = 0.0;
      for (long t = -radius; t <= radius; ++t) s += k[t + radius] * tmp[clampi(static_cast<long>(r) + t, h) * w + c];
      f[r * w + c] = s;
    }
  }
}

}  // namespace

void AugmentConfig::validate() const {
  if (!(probability >= 0.0 && probability <= 1.0)) throw std::invalid_argument("augment probability must lie in [0, 1]");
  if (scale_min <= 0.0 || scale_min > scale_max) throw std::invalid_argument("augment scale range invalid");
  if (brightness_min < 0.0 || brightness_min > brightness_max) throw std::invalid_argument("brightness range invalid");
  if (contrast_min < 0.0 || contrast_min > contrast_max) throw std::invalid_argument("contrast range invalid");
  if (rotation_deg < 0.0 || shear_deg < 0.0 || translate < 0.0) throw std::invalid_argument("affine ranges must be >= 0");
  if (elastic_alpha < 0.0 || elastic_sigma <= 0.0) throw std::invalid_argument("elastic alpha >= 0, sigma > 0 required");
}

Image affine_warp(const Image& img, const AffineParams& p) {
  const double th = p.rotation_deg * kDeg, sh = std::tan(p.shear_deg * kDeg);
  // Forward matrix A = R * Shear * s; we need its inverse for backward mapping.
  const double a = p.scale * std::cos(th), b = p.scale * (std::cos(th) * sh - std::sin(th));
  const double c = p.scale * std::sin(th), d = p.scale * (std::sin(th) * sh + std::cos(th));
  const double det = a * d - b * c;
  if (std::abs(det) < 1e-12) throw std::invalid_argument("affine_warp: singular transform");
  const double ia = d / det, ib = -b / det, ic = -c / det, id = a / det;
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0, cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  Image out(img.height, img.width);
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t col = 0; col < img.width; ++col) {
      const double u = static_cast<double>(col) - cx - p.translate_x;
      const double v = static_cast<double>(r) - cy - p.translate_y;
      out.at(r, col) = sample(img, ic * u + id * v + cy, ia * u + ib * v + cx);
    }
  }
  return out;
}

Image dilate_ink(const Image& img) {
  return filter3(img, [](float a, float b) { return std::min(a, b); });
}

Image erode_ink(const Image& img) {
  return filter3(img, [](float a, float b) { return std::max(a, b); });
}

Image color_jitter(const Image& img, double brightness, double contrast) {
  Image out = img;
  if (brightness != 1.0) {
    for (float& v : out.pixels) v = static_cast<float>(v * brightness);
  }
  if (contrast != 1.0) {
    double mean = 0.0;
    for (float v : out.pixels) mean += v;
    mean /= static_cast<double>(out.pixels.size());
    for (float& v : out.pixels) v = static_cast<float>(mean + contrast * (v - mean));
  }
  return out;
}

Image elastic_distort(const Image& img, double alpha, double sigma, Rng& rng) {
  const std::size_t n = img.pixels.size();
  std::vector<double> dx(n), dy(n);
  for (auto& v : dx) v = rng.uniform(-1.0, 1.0);
  for (auto& v : dy) v = rng.uniform(-1.0, 1.0);
  const auto k = gaussian_kernel(sigma);
  smooth(dx, img.height, img.width, k);
  smooth(dy, img.height, img.width, k);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) peak = std::max(peak, std::hypot(dx[i], dy[i]));
  const double gain = peak > 0.0 ? alpha / peak : 0.0;
  Image out(img.height, img.width);
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      const std::size_t i = r * img.width + c;
      out.pixels[i] = sample(img, static_cast<double>(r) + gain * dy[i], static_cast<double>(c) + gain * dx[i]);
    }
  }
  return out;
}

Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng, AugmentTrace* trace) {
  cfg.validate();
  AugmentTrace t;
  if (cfg.enabled) {
    t.affine = rng.bernoulli(cfg.probability);
    t.erode = rng.bernoulli(cfg.probability);
    t.dilate = rng.bernoulli(cfg.probability);
    t.jitter = rng.bernoulli(cfg.probability);
    t.elastic = rng.bernoulli(cfg.probability);
    if (t.erode) t.dilate = false;
  }
  if (trace) *trace = t;
  Image out = img;
  if (t.affine) {
    AffineParams p;
    p.rotation_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
    p.shear_deg = rng.uniform(-cfg.shear_deg, cfg.shear_deg);
    p.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    p.translate_x = rng.uniform(-cfg.translate, cfg.translate) * static_cast<double>(img.width);
    p.translate_y = rng.uniform(-cfg.translate, cfg.translate) * static_cast<double>(img.height);
    out = affine_warp(out, p);
  }
  if (t.erode) out = erode_ink(out);
  if (t.dilate) out = dilate_ink(out);
  if (t.jitter) {
    const double b = rng.uniform(cfg.brightness_min, cfg.brightness_max);
    const double c = rng.uniform(cfg.contrast_min, cfg.contrast_max);
    out = color_jitter(out, b, c);
  }
  if (t.elastic && cfg.elastic_alpha > 0.0) out = elastic_distort(out, cfg.elastic_alpha, cfg.elastic_sigma, rng);
  for (float& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace htr
