#pragma once

// Checkpoint container: magic "TFSG", u32 version, u32 config-blob length,
// canonical JSON blob (model config + training metadata), u32 tensor count,
// then per tensor {u32 name length, UTF-8 name, u8 rank, u32 dims...,
// float32 little-endian payload}, and a trailing CRC32 over all preceding
// bytes. Round trips are bit-exact.

#include <cstdint>
#include <string>
#include <vector>

#include "stereovit/model.hpp"

namespace stereovit {

inline constexpr uint32_t kCheckpointVersion = 1;

struct TrainMeta {
  int epoch = 0;
  double val_mse = 0.0;
  uint64_t seed = 0;
};

uint32_t crc32_ieee(const uint8_t* data, size_t len);

std::vector<uint8_t> checkpoint_bytes(const Model<float>& model, const TrainMeta& meta);
void save_checkpoint(const Model<float>& model, const TrainMeta& meta, const std::string& path);

struct LoadedCheckpoint {
  Model<float> model;
  TrainMeta meta;
};

LoadedCheckpoint load_checkpoint_bytes(const std::vector<uint8_t>& bytes);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace stereovit
