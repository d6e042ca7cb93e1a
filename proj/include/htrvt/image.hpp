#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace htr {

/// Grayscale image with intensities in [0, 1]; 0 is black ink, 1 is blank page.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // row-major

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 1.0f) : height(h), width(w), pixels(h * w, fill) {}

  float& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  float at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
};

/// Parses a binary P5 PGM with maxval 255. Errors name the byte offset.
Image decode_pgm(std::span<const std::uint8_t> bytes);
Image load_pgm(const std::filesystem::path& path);
/// Intensities are clamped to [0, 1] and rounded to the nearest 8-bit level.
std::vector<std::uint8_t> encode_pgm(const Image& img);
void save_pgm(const Image& img, const std::filesystem::path& path);

/// Bilinear resampling with half-pixel centres; edge pixels are replicated.
Image resize_bilinear(const Image& img, std::size_t height, std::size_t width);

/// Scales to the target height keeping the aspect ratio, then pads the right
/// with white or squeezes the width down to the target width.
Image prepare(const Image& img, std::size_t height, std::size_t width);

}  // namespace htr
