#pragma once

#include <string>
#include <vector>

#include "volformer/tensor.hpp"

namespace volformer {

// One named f32 array of a "VFWT" parameter checkpoint.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// Layout (little-endian): "VFWT", u16 version, u32 count, then per tensor
// u16 name length, name bytes, u8 ndim, u32 dims[ndim], f32 payload.
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context);

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

}  // namespace volformer
