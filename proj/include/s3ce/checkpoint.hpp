#pragma once

// Binary checkpoints, little-endian:
//   "S3CE" | u32 version | u32 block count
//   per block: u16 name length | name bytes | u8 ndim | u32 dims[ndim] | f32 data[]
//   u32 epoch

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "events.hpp"
#include "spiking.hpp"

namespace s3ce {

inline constexpr std::array<char, 4> kCheckpointMagic{'S', '3', 'C', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlock {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<CheckpointBlock> blocks;
  std::uint32_t epoch = 0;
};

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T)))
    throw FormatError(std::string("checkpoint truncated while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out.write(kCheckpointMagic.data(), 4);
  detail::put_le<std::uint32_t>(out, ck.version);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.blocks.size()));
  for (const auto& b : ck.blocks) {
    if (b.name.size() > UINT16_MAX) throw std::invalid_argument("checkpoint: block name too long");
    if (b.dims.size() > UINT8_MAX) throw std::invalid_argument("checkpoint: too many dimensions");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(b.name.size()));
    out.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(b.dims.size()));
    for (auto d : b.dims) detail::put_le<std::uint32_t>(out, d);
    for (float v : b.data) detail::put_le<float>(out, v);
  }
  detail::put_le<std::uint32_t>(out, ck.epoch);
}

inline Checkpoint read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kCheckpointMagic) throw FormatError("not a checkpoint: bad magic");
  Checkpoint ck;
  ck.version = detail::get_le<std::uint32_t>(in, "version");
  if (ck.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(ck.version));
  const auto count = detail::get_le<std::uint32_t>(in, "block count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointBlock b;
    const auto len = detail::get_le<std::uint16_t>(in, "name length");
    b.name.resize(len);
    if (!in.read(b.name.data(), len)) throw FormatError("checkpoint truncated in block name");
    const auto ndim = detail::get_le<std::uint8_t>(in, "ndim");
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      b.dims.push_back(detail::get_le<std::uint32_t>(in, "dims"));
      n *= b.dims.back();
    }
    b.data.resize(n);
    for (auto& v : b.data) v = detail::get_le<float>(in, ("data of " + b.name).c_str());
    ck.blocks.push_back(std::move(b));
  }
  ck.epoch = detail::get_le<std::uint32_t>(in, "epoch");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(out, ck);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

template <class Real>
Checkpoint snapshot(const ParamList<Real>& params, std::uint32_t epoch) {
  Checkpoint ck;
  ck.epoch = epoch;
  for (const auto& p : params) {
    CheckpointBlock b{p.name, {}, {}};
    for (auto d : p.tensor.shape()) b.dims.push_back(static_cast<std::uint32_t>(d));
    for (Real v : p.tensor.values()) b.data.push_back(static_cast<float>(v));
    ck.blocks.push_back(std::move(b));
  }
  return ck;
}

// Copies blocks into same-named parameters; names and shapes must match
// exactly in both directions.
template <class Real>
void restore(const ParamList<Real>& params, const Checkpoint& ck) {
  std::map<std::string, const CheckpointBlock*> by_name;
  for (const auto& b : ck.blocks) by_name[b.name] = &b;
  if (by_name.size() != params.size())
    throw FormatError("checkpoint has " + std::to_string(by_name.size()) + " blocks, model has " +
                      std::to_string(params.size()) + " parameters");
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks block " + p.name);
    const auto& b = *it->second;
    Shape shape(b.dims.begin(), b.dims.end());
    if (shape != p.tensor.shape())
      throw FormatError("block " + p.name + " has shape " + to_string(shape) + ", model expects " + to_string(p.tensor.shape()));
    Tensor<Real> target = p.tensor;
    auto dst = target.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(b.data[i]);
  }
}

}  // namespace s3ce
