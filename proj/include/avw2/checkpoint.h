#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "avw2/autodiff/tensor.h"

namespace avw2 {

constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  ad::Shape shape;
  std::vector<float> data;

  bool operator==(const StoredTensor&) const = default;
};

// Layout (little endian):
//   "AVW2" | u32 version | u64 step | u32 config bytes | config JSON | u32 crc
//   u32 tensor count, then per tensor in name order:
//   u32 name bytes | name | u32 rank | i64 dims | f32 data | u32 crc
// Each crc covers the bytes of its section.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t step = 0;
  nlohmann::json config;
  std::map<std::string, StoredTensor> tensors;

  std::int64_t parameterCount(const std::string& prefixToSkip = "optim.") const;
};

std::string encodeCheckpoint(const Checkpoint& ckpt);
// Errors carry the byte offset of the damaged section.
Checkpoint decodeCheckpoint(const std::string& bytes);

void saveCheckpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint loadCheckpoint(const std::filesystem::path& path);

} // namespace avw2
