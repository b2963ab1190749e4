#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "crossing/tensor.hpp"

namespace crossing {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Container layout: magic "CXT1", then per entry
//   u32 name length | name bytes (UTF-8) | u32 rank | u64 extent * rank | f64 values
// all little-endian, entries until end of file.
inline constexpr char kCheckpointMagic[4] = {'C', 'X', 'T', '1'};

std::string encode_checkpoint(std::span<const NamedTensor> entries);
std::vector<NamedTensor> decode_checkpoint(std::string_view bytes);

// Written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace crossing
