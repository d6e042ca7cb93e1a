#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "htrvt/augment.hpp"
#include "htrvt/charset.hpp"
#include "htrvt/image.hpp"
#include "htrvt/tensor.hpp"

namespace htr {

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::string text;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
};

/// Reads `relpath<TAB>transcription` lines. Rejects missing tabs, empty
/// transcriptions and paths that do not exist.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

/// Sorted union of the training transcripts' characters.
Charset build_charset(const Manifest& m);

struct Sample {
  Image image;  // as loaded, before preparation
  std::string text;
  std::string path;
};

std::vector<Sample> load_samples(const Manifest& m);

enum class Mode { Train, Eval };

struct Batch {
  Tensor<float> images;                 // [N, 1, H, W]
  std::vector<std::vector<int>> labels;  // ids in 1..K
  std::vector<std::string> texts;
  std::vector<std::size_t> source;      // index into the input sample list
  /// Eval mode only: characters the charset cannot represent.
  std::vector<std::u32string> unknown;
};

struct BatchOptions {
  std::size_t height = 64;
  std::size_t width = 512;
  AugmentConfig augment;
};

/// Prepares (and in train mode augments with seeds[i]) each sample and stacks
/// them. Training samples with characters outside the charset are skipped
/// with a warning; evaluation samples keep the encodable part of their label.
Batch make_batch(const std::vector<const Sample*>& samples, const std::vector<std::uint64_t>& seeds,
                 const Charset& charset, Mode mode, const BatchOptions& opt);

}  // namespace htr
