#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace htr::cli {

struct TrainArgs {
  std::filesystem::path config;
  std::filesystem::path resume;
  std::optional<std::uint64_t> until;
};

/// Each command returns a process exit code and reports failures by throwing.
int train(const TrainArgs& a, std::ostream& out);
int evaluate(const std::filesystem::path& ckpt, const std::filesystem::path& manifest, bool use_ema,
             const std::filesystem::path& csv, std::ostream& out);
int predict(const std::filesystem::path& ckpt, const std::filesystem::path& image, bool use_ema, std::ostream& out);

struct GradcheckArgs {
  std::size_t trials_per_primitive = 20;
  std::size_t ctc_instances = 200;
  std::uint64_t seed = 1;
  /// Adds the corrupted-adjoint fixture, which must make the run fail.
  bool inject_fault = false;
};
int gradcheck(const GradcheckArgs& a, std::ostream& out);

struct DumpArgs {
  std::filesystem::path ckpt;
  std::filesystem::path image;
  std::size_t block = 0;
  std::filesystem::path out_dir;
  /// Query token for the 1 x L strip; defaults to the middle token.
  std::optional<std::size_t> query;
  bool use_ema = true;
};
int dump_attention(const DumpArgs& a, std::ostream& out);

struct SynthArgs {
  std::filesystem::path out_dir;
  std::size_t train_lines = 8;
  std::size_t val_lines = 0;
  std::uint64_t seed = 1;
  bool vary = true;
};
int synth(const SynthArgs& a, std::ostream& out);

}  // namespace htr::cli
