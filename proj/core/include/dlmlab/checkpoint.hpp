#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlmlab/transformer.hpp"

namespace dlmlab {

// Versioned binary checkpoint: 8-byte magic, u32 version, the ModelSpec as
// length-prefixed UTF-8 key=value lines, then parameter blobs in declaration
// order (name, shape, little-endian f32 data). An optional opaque trailer
// (optimizer state and friends) follows the parameters.
inline constexpr char kCheckpointMagic[8] = {'D', 'L', 'M', 'L', 'A', 'B', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const std::vector<std::uint8_t>& trailer = {});

struct LoadedCheckpoint {
  Model<float> model;
  std::vector<std::uint8_t> trailer;  // empty when absent
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace dlmlab
