#include "htrvt/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace htr {
namespace {

[[noreturn]] void pgm_error(std::size_t offset, const std::string& what) {
  throw std::runtime_error("PGM: " + what + " at byte " + std::to_string(offset));
}

bool is_ws(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Skips whitespace and '#' comments, then reads a decimal field.
std::size_t read_field(std::span<const std::uint8_t> b, std::size_t& pos, const char* name) {
  while (pos < b.size()) {
    if (is_ws(b[pos])) {
      ++pos;
    } else if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  if (pos >= b.size()) pgm_error(pos, std::string("header truncated before ") + name);
  if (!std::isdigit(b[pos])) pgm_error(pos, std::string("expected digits for ") + name);
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos] - '0');
    if (v > (1u << 24)) pgm_error(pos, std::string(name) + " too large");
    ++pos;
  }
  return v;
}

}  // namespace

Image decode_pgm(std::span<const std::uint8_t> b) {
  if (b.size() < 2) pgm_error(0, "file too short for magic");
  if (b[0] != 'P' || b[1] != '5') pgm_error(0, "bad magic (need binary P5)");
  std::size_t pos = 2;
  const std::size_t width = read_field(b, pos, "width");
  const std::size_t height = read_field(b, pos, "height");
  const std::size_t maxval_at = pos;
  const std::size_t maxval = read_field(b, pos, "maxval");
  if (width == 0 || height == 0) pgm_error(maxval_at, "zero image extent");
  if (maxval != 255) pgm_error(maxval_at, "maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= b.size() || !is_ws(b[pos])) pgm_error(pos, "missing whitespace after maxval");
  ++pos;
  const std::size_t need = width * height;
  if (b.size() - pos < need) {
    pgm_error(b.size(), "payload truncated: expected " + std::to_string(need) + " bytes, found " +
                            std::to_string(b.size() - pos));
  }
  Image img(height, width);
  for (std::size_t i = 0; i < need; ++i) img.pixels[i] = static_cast<float>(b[pos + i]) / 255.0f;
  return img;
}

Image load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_pgm(bytes);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_pgm(const Image& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + img.pixels.size());
  for (float v : img.pixels) {
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  return out;
}

void save_pgm(const Image& img, const std::filesystem::path& path) {
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
  if (img.height == 0 || img.width == 0 || height == 0 || width == 0) {
    throw std::invalid_argument("resize_bilinear: extents must be positive");
  }
  if (height == img.height && width == img.width) return img;
  auto taps = [](std::size_t out, std::size_t in) {
    struct Tap {
      std::size_t lo, hi;
      float frac;
    };
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(src);
      t[i] = {lo, std::min(lo + 1, in - 1), static_cast<float>(src - static_cast<double>(lo))};
    }
    return t;
  };
  const auto ty = taps(height, img.height), tx = taps(width, img.width);
  Image out(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const float a = img.at(ty[r].lo, tx[c].lo), b = img.at(ty[r].lo, tx[c].hi);
      const float d = img.at(ty[r].hi, tx[c].lo), e = img.at(ty[r].hi, tx[c].hi);
      const float top = a + (b - a) * tx[c].frac, bot = d + (e - d) * tx[c].frac;
      out.at(r, c) = top + (bot - top) * ty[r].frac;
    }
  }
  return out;
}

Image prepare(const Image& img, std::size_t height, std::size_t width) {
  if (img.height == 0 || img.width == 0) throw std::invalid_argument("prepare: empty image");
  const double scaled = static_cast<double>(img.width) * static_cast<double>(height) / static_cast<double>(img.height);
  const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scaled)));
  if (w >= width) return resize_bilinear(img, height, width);
  const Image r = resize_bilinear(img, height, w);
  Image out(height, width, 1.0f);
  for (std::size_t y = 0; y < height; ++y) std::copy_n(&r.pixels[y * w], w, &out.pixels[y * width]);
  return out;
}

}  // namespace htr
