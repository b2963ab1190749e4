#include "crossing/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "crossing/errors.hpp"
#include "crossing/io_util.hpp"

namespace crossing {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw DataError("checkpoint: truncated data");
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, bytes.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

}  // namespace

std::string encode_checkpoint(std::span<const NamedTensor> entries) {
  std::string out(kCheckpointMagic, 4);
  for (const auto& e : entries) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    const auto& shape = e.tensor.shape();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t extent : shape) put_le<std::uint64_t>(out, extent);
    for (double v : e.tensor.data()) put_le<double>(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw DataError("checkpoint: missing CXT1 magic");
  }
  std::vector<NamedTensor> out;
  std::size_t pos = 4;
  while (pos < bytes.size()) {
    const auto name_len = get_le<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw DataError("checkpoint: truncated name");
    std::string name(bytes.substr(pos, name_len));
    pos += name_len;
    const auto rank = get_le<std::uint32_t>(bytes, pos);
    Shape shape(rank);
    for (auto& extent : shape) extent = get_le<std::uint64_t>(bytes, pos);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = get_le<double>(bytes, pos);
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> entries) {
  write_file_atomic(path, encode_checkpoint(entries));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace crossing
