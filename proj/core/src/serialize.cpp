#include "cem/serialize.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>

#include "cem/error.hpp"

namespace cem {
namespace {

constexpr std::array<char, 4> kMagic{'C', 'E', 'M', 'T'};

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw DataError(std::string("truncated tensor file while reading ") + what);
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return value;
}

}  // namespace

void write_tensors(std::ostream& out, const NamedTensors& tensors) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kTensorFileVersion);
  put_le<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_le<std::uint64_t>(out, e);
    for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw DataError("failed writing tensor stream");
}

NamedTensors read_tensors(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw DataError("not a CEMT tensor file (bad magic)");
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kTensorFileVersion) {
    throw DataError("unsupported tensor file version " + std::to_string(version));
  }
  const auto count = get_le<std::uint64_t>(in, "count");
  NamedTensors out;
  for (std::uint64_t n = 0; n < count; ++n) {
    const auto len = get_le<std::uint32_t>(in, "name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw DataError("truncated tensor file while reading name");
    const auto rank = get_le<std::uint32_t>(in, "rank");
    if (rank == 0) throw DataError("tensor '" + name + "' has rank 0");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(get_le<std::uint64_t>(in, "extent"));
      if (shape.back() == 0) throw DataError("tensor '" + name + "' has a zero extent");
    }
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(in, "data"));
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_tensors(out, tensors);
}

NamedTensors load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_tensors(in);
}

}  // namespace cem
