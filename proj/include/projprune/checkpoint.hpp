#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "projprune/tensor.hpp"

namespace projprune {

using NamedTensors = std::map<std::string, Tensor>;

// Binary layout, all integers little-endian:
//   "PPCK" | u32 version (=1) | u64 entry count |
//   per entry (sorted by name): u64 name length | UTF-8 name | u64 rank |
//   rank x u64 extents | f64 payload in row-major order
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors);
NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

}  // namespace projprune
