#pragma once

// Flat binary weight container:
//   "DYSP" | version u32 | count u32 | count x entry
//   entry = name_len u16 | name (UTF-8) | rank u8 | rank x extent u32 | payload f64...
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dysp/tensor.hpp"

namespace dysp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

}  // namespace dysp
