#pragma once

// Binary parameter container:
//   "C2TCKPT1" | u32 version
//   repeated until EOF: u32 name_len | name bytes | u32 rank | rank x u64 dims | f32 payload
// All integers and floats little-endian.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "c2t/error.hpp"
#include "c2t/numerics/graph.hpp"
#include "c2t/numerics/tensor.hpp"

namespace c2t::nn {

inline constexpr char kCheckpointMagic[8] = {'C', '2', 'T', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <class T>
void put(std::ostream& os, T v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get(std::istream& is, T& v) {
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) return false;
  v = to_le(v);
  return true;
}

}  // namespace detail

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& records) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  for (const auto& [name, t] : records) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::put<std::uint64_t>(os, d);
    for (float v : t.data) detail::put<float>(os, v);
  }
  if (!os) raise(ErrorKind::IoError, "failed writing checkpoint");
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    raise(ErrorKind::FormatError, "not a checkpoint (bad magic)");
  std::uint32_t version = 0;
  if (!detail::get(is, version)) raise(ErrorKind::FormatError, "truncated checkpoint header");
  if (version != kCheckpointVersion)
    raise(ErrorKind::FormatError, "unsupported checkpoint version " + std::to_string(version));
  std::vector<NamedTensor> out;
  std::uint32_t name_len = 0;
  while (detail::get(is, name_len)) {
    NamedTensor rec;
    rec.name.resize(name_len);
    std::uint32_t rank = 0;
    if (!is.read(rec.name.data(), name_len) || !detail::get(is, rank) || rank == 0)
      raise(ErrorKind::FormatError, "truncated checkpoint record");
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!detail::get(is, v) || v == 0) raise(ErrorKind::FormatError, "bad dims in " + rec.name);
      d = static_cast<std::size_t>(v);
    }
    std::vector<float> data(shape_size(shape));
    for (auto& v : data)
      if (!detail::get(is, v)) raise(ErrorKind::FormatError, "truncated payload for " + rec.name);
    rec.tensor = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(rec));
  }
  return out;
}

template <class S>
std::vector<NamedTensor> to_records(const ParamStore<S>& params) {
  std::vector<NamedTensor> out;
  for (const auto& [name, p] : params) out.push_back({name, p.value.template cast<float>()});
  return out;
}

template <class S>
void save_params(const std::filesystem::path& path, const ParamStore<S>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) raise(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
  write_checkpoint(os, to_records(params));
}

inline std::vector<NamedTensor> load_records(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise(ErrorKind::IoError, "cannot open " + path.string());
  return read_checkpoint(is);
}

template <class S = float>
ParamStore<S> load_params(const std::filesystem::path& path) {
  ParamStore<S> out;
  for (auto& rec : load_records(path)) out.add(rec.name, rec.tensor.template cast<S>());
  return out;
}

}  // namespace c2t::nn
