#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "cem/tensor.hpp"

// Flat binary container of named float64 tensors:
//   "CEMT" | u32 version | u64 count
//   count x ( u32 name_len | name bytes | u32 rank | u64 extents[rank] | f64 data )
// All integers and floats little-endian.
namespace cem {

inline constexpr std::uint32_t kTensorFileVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_tensors(std::ostream& out, const NamedTensors& tensors);
NamedTensors read_tensors(std::istream& in);

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

}  // namespace cem
