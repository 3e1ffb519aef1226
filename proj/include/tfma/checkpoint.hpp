#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tfma/error.hpp"
#include "tfma/tensor.hpp"

namespace tfma {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// File layout: 8-byte tag, then per parameter
//   u64 name length, name bytes, u64 rank, rank x u64 dims, numel x f64
// with every integer and float little-endian.
inline constexpr char kCheckpointTag[8] = {'T', 'F', 'M', 'A', 'C', 'K', 'P', '1'};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw DataError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out(kCheckpointTag, sizeof(kCheckpointTag));
  for (const auto& [name, value] : tensors) {
    detail::put_u64(out, name.size());
    out += name;
    detail::put_u64(out, value.rank());
    for (std::size_t d : value.shape()) detail::put_u64(out, d);
    for (double x : value.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointTag) || std::memcmp(bytes.data(), kCheckpointTag, sizeof(kCheckpointTag)) != 0) {
    throw DataError("not a checkpoint file (bad version tag)");
  }
  std::vector<NamedTensor> out;
  std::size_t pos = sizeof(kCheckpointTag);
  while (pos < bytes.size()) {
    const std::uint64_t len = detail::get_u64(bytes, pos);
    if (pos + len > bytes.size()) throw DataError("truncated checkpoint name");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const std::uint64_t rank = detail::get_u64(bytes, pos);
    if (rank == 0 || rank > 8) throw DataError("implausible rank in checkpoint entry " + name);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u64(bytes, pos);
    std::vector<double> data(shape_numel(shape));
    for (auto& x : data) x = std::bit_cast<double>(detail::get_u64(bytes, pos));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  const std::string bytes = encode_checkpoint(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace tfma
