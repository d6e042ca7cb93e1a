#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "htrvt/dataset.hpp"
#include "htrvt/image.hpp"

namespace htr {

/// Procedural handwriting stand-in: every character owns a fixed pattern of
/// three pen strokes on a small grid, so no fonts are involved.
struct SynthConfig {
  std::string alphabet = "abcdefghijkl";
  std::size_t chars_per_line = 5;
  std::size_t height = 32;
  std::size_t glyph_width = 20;
  std::size_t margin = 4;
  /// Per-sample jitter of glyph placement, stroke width, ink level and noise.
  bool vary = true;
};

struct SynthLine {
  Image image;
  std::string text;
};

/// Renders one line of text; characters outside the alphabet are rejected.
Image render_line(const std::string& text, const SynthConfig& cfg, std::uint64_t seed);

/// Distinct random strings over the alphabet, rendered with per-line seeds.
std::vector<SynthLine> synth_lines(std::size_t count, const SynthConfig& cfg, std::uint64_t seed);

/// Writes lines as PGM files under dir/images and a manifest dir/<name>.
Manifest write_synth_corpus(const std::vector<SynthLine>& lines, const std::filesystem::path& dir,
                            const std::string& manifest_name, const std::string& prefix);

}  // namespace htr
