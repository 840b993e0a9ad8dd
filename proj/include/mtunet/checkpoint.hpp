#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtunet/tensor.hpp"

namespace mtunet {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  nlohmann::json config;
  std::vector<NamedTensor> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: "MTUW", u32 version, u32 header length, UTF-8 JSON header
/// {"config": ..., "tensors": [{"name","shape","offset"}]}, then the
/// parameters as little-endian f32 (offsets are bytes into that blob).
void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mtunet
