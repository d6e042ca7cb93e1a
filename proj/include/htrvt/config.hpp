#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "htrvt/augment.hpp"
#include "htrvt/model.hpp"
#include "htrvt/optim.hpp"
#include "htrvt/span_mask.hpp"

namespace htr {

/// Every hyperparameter of a run. Defaults are the full-scale setting; the
/// "tiny" profile shrinks the model and schedule for desk-scale runs.
struct TrainConfig {
  std::string profile = "full";
  std::uint64_t seed = 0;

  std::string train_manifest;
  std::string val_manifest;
  std::string out_dir = "run";

  ExtractorConfig extractor;
  EncoderConfig encoder;
  MaskConfig mask;
  optim::AdamWConfig adamw;
  optim::Schedule schedule;
  optim::SamConfig sam;
  double ema_decay = 0.9999;
  AugmentConfig augment;

  std::size_t batch_size = 128;
  std::uint64_t val_every = 1000;
  std::uint64_t checkpoint_every = 1000;
  /// Also keep iter_NNNNNN.ckpt snapshots next to last.ckpt.
  bool keep_snapshots = false;
  std::uint64_t log_every = 1;

  static TrainConfig full();
  static TrainConfig tiny();

  /// Parses `key = value` lines with `#` comments. A `profile` line selects
  /// the defaults every other key overrides, wherever it appears. Unknown
  /// keys, repeated keys and bad values are errors naming the key and line.
  /// Relative manifest paths and out_dir resolve against base_dir.
  static TrainConfig parse(const std::string& text, const std::filesystem::path& base_dir = {});
  static TrainConfig load(const std::filesystem::path& path);

  /// Canonical text listing every key; parse(to_text()) reproduces the config.
  std::string to_text() const;

  ModelConfig model(std::size_t num_classes) const;
  void validate() const;
};

}  // namespace htr
