#pragma once

// Binary checkpoint, little-endian:
//   "CSEG" | u32 version | u32 length + config text | u64 epoch | u64 step
//   | u32 count, backbone tensors | bank tensor | u32 count, u64 update counts
//   | u32 count, velocity tensors
// A tensor is u32 rank, u32 dims..., f32 values in row-major order.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "centerseg/backbone.hpp"
#include "centerseg/config.hpp"
#include "centerseg/prototype.hpp"

namespace centerseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;       // effective config of the run
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;   // completed optimizer steps
  BackboneParams<float> backbone;
  PrototypeBank<float> bank;
  std::vector<std::vector<float>> velocity;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);

// IoError for truncated or foreign data, ConfigError when the stored tensors
// do not match the stored config.
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace centerseg
