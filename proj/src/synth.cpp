#include "htrvt/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <stdexcept>

#include "htrvt/charset.hpp"
#include "htrvt/random.hpp"

namespace htr {
namespace {

// Pen strokes between points of a 3x4 grid spanning the glyph box.
struct Stroke {
  int a, b;
};
using Glyph = std::array<Stroke, 3>;

constexpr int kCols = 3, kRows = 4;

// Patterns are assigned in alphabet order from one fixed generator, skipping
// repeats, so every character gets a distinct glyph.
std::vector<Glyph> glyph_table(std::size_t count) {
  Rng rng(0x5eed61f5ULL);
  std::vector<Glyph> out;
  std::set<std::array<int, 6>> used;
  while (out.size() < count) {
    Glyph g;
    std::array<int, 6> key;
    std::set<std::pair<int, int>> edges;
    bool ok = true;
    for (int s = 0; s < 3; ++s) {
      int a = static_cast<int>(rng.uniform_int(0, kCols * kRows - 1));
      int b = static_cast<int>(rng.uniform_int(0, kCols * kRows - 1));
      if (a == b) ok = false;
      if (a > b) std::swap(a, b);
      if (!edges.insert({a, b}).second) ok = false;
      g[s] = {a, b};
    }
    if (!ok) continue;
    std::vector<std::pair<int, int>> sorted(edges.begin(), edges.end());
    for (int s = 0; s < 3; ++s) {
      key[2 * s] = sorted[s].first;
      key[2 * s + 1] = sorted[s].second;
    }
    if (!used.insert(key).second) continue;
    out.push_back(g);
  }
  return out;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  const double t = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
  return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

}  // namespace

Image render_line(const std::string& text, const SynthConfig& cfg, std::uint64_t seed) {
  const auto chars = utf8_decode(text);
  const auto alphabet = utf8_decode(cfg.alphabet);
  const auto glyphs = glyph_table(alphabet.size());
  Rng rng(seed);
  const std::size_t width = 2 * cfg.margin + chars.size() * cfg.glyph_width;
  Image img(cfg.height, width, 1.0f);
  const double box_w = static_cast<double>(cfg.glyph_width) * 0.7;
  const double box_h = static_cast<double>(cfg.height) * 0.7;
  const double top = (static_cast<double>(cfg.height) - box_h) / 2.0;
  const double ink = cfg.vary ? rng.uniform(0.0, 0.25) : 0.1;
  for (std::size_t i = 0; i < chars.size(); ++i) {
    const auto pos = alphabet.find(chars[i]);
    if (pos == std::u32string::npos) throw std::invalid_argument("render_line: character outside the synth alphabet");
    const Glyph& g = glyphs[pos];
    const double ox = static_cast<double>(cfg.margin + i * cfg.glyph_width) +
                      (static_cast<double>(cfg.glyph_width) - box_w) / 2.0 + (cfg.vary ? rng.uniform(-1.5, 1.5) : 0.0);
    const double oy = top + (cfg.vary ? rng.uniform(-1.5, 1.5) : 0.0);
    const double half = (cfg.vary ? rng.uniform(1.6, 2.4) : 2.0) / 2.0;
    auto point = [&](int p, double& x, double& y) {
      x = ox + box_w * (p % kCols) / (kCols - 1);
      y = oy + box_h * (p / kCols) / (kRows - 1);
    };
    for (const auto& s : g) {
      double ax, ay, bx, by;
      point(s.a, ax, ay);
      point(s.b, bx, by);
      const auto x0 = static_cast<long>(std::floor(std::min(ax, bx) - half - 1));
      const auto x1 = static_cast<long>(std::ceil(std::max(ax, bx) + half + 1));
      const auto y0 = static_cast<long>(std::floor(std::min(ay, by) - half - 1));
      const auto y1 = static_cast<long>(std::ceil(std::max(ay, by) + half + 1));
      for (long y = std::max(0L, y0); y <= std::min<long>(y1, static_cast<long>(cfg.height) - 1); ++y) {
        for (long x = std::max(0L, x0); x <= std::min<long>(x1, static_cast<long>(width) - 1); ++x) {
          const double d = segment_distance(static_cast<double>(x), static_cast<double>(y), ax, ay, bx, by);
          const double cover = std::clamp(half + 0.5 - d, 0.0, 1.0);
          float& px = img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
          px = std::min(px, static_cast<float>(1.0 - cover * (1.0 - ink)));
        }
      }
    }
  }
  if (cfg.vary) {
    for (float& v : img.pixels) v = std::clamp(v + static_cast<float>(0.03 * rng.normal()), 0.0f, 1.0f);
  }
  // Quantise to 8 bits so the in-memory image equals what a PGM round trip gives.
  for (float& v : img.pixels) v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
  return img;
}

std::vector<SynthLine> synth_lines(std::size_t count, const SynthConfig& cfg, std::uint64_t seed) {
  const auto alphabet = utf8_decode(cfg.alphabet);
  if (alphabet.empty() || cfg.chars_per_line == 0) throw std::invalid_argument("synth: empty alphabet or line length");
  const double possible = std::pow(static_cast<double>(alphabet.size()), static_cast<double>(cfg.chars_per_line));
  if (static_cast<double>(count) > possible) throw std::invalid_argument("synth: more lines requested than distinct strings");
  Rng rng(seed);
  std::set<std::u32string> seen;
  std::vector<SynthLine> out;
  while (out.size() < count) {
    std::u32string s(cfg.chars_per_line, U' ');
    for (auto& c : s) c = alphabet[rng.uniform_int(0, alphabet.size() - 1)];
    if (!seen.insert(s).second) continue;
    const std::string text = utf8_encode(s);
    out.push_back({render_line(text, cfg, derive_seed(seed, out.size(), 7)), text});
  }
  return out;
}

Manifest write_synth_corpus(const std::vector<SynthLine>& lines, const std::filesystem::path& dir,
                            const std::string& manifest_name, const std::string& prefix) {
  std::filesystem::create_directories(dir / "images");
  Manifest m;
  m.root = dir;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string rel = "images/" + prefix + std::to_string(i) + ".pgm";
    save_pgm(lines[i].image, dir / rel);
    m.entries.push_back({rel, lines[i].text});
  }
  save_manifest(m, dir / manifest_name);
  return m;
}

}  // namespace htr
