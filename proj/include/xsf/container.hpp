#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "xsf/tensor.hpp"

namespace xsf {

enum class Partition : std::uint8_t { LN = 0, Adapted = 1, Frozen = 2 };

const char* to_string(Partition p);

// On-disk layout shared by checkpoints (.xsfc) and tensor files (.xst):
//   "XSFC" | version u32 | header text (u32 length + UTF-8) | entry count u32 |
//   per entry: name (u32 length + UTF-8), tag u8, ndim u32, dims u64 x ndim, f32 data.
// All integers and floats little-endian.
inline constexpr char kContainerMagic[4] = {'X', 'S', 'F', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct ContainerEntry {
  std::string name;
  Partition tag = Partition::Frozen;
  Tensor value;
};

struct Container {
  std::string header;
  std::vector<ContainerEntry> entries;
};

std::string encode_container(const Container& c);
// Throws CorruptCheckpoint with the failing byte offset.
Container decode_container(std::string_view bytes);

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace xsf
