#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "htrvt/tensor.hpp"

namespace htr {

/// Single-file training snapshot. Layout, all integers little-endian:
///   "HTRVT001" | u32 version | str charset | str config | u64 iteration |
///   u32 count, (str key, str value)*     -- generator and loop state
///   u32 count, (str name, u32 rank, u64 extent * rank, f32 * numel)*
/// where str is a u32 byte length followed by UTF-8.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::string charset;
  std::string config;
  std::uint64_t iteration = 0;
  std::vector<std::pair<std::string, std::string>> state;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const std::string& state_value(const std::string& key) const;
  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and renames, so a crash never leaves a
/// truncated checkpoint under the final name.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace htr
