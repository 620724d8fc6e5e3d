#pragma once

// CYTR1 tensor file format.
//
// Layout, byte-exact:
//   magic   5 bytes  43 59 54 52 31 ("CYTR1")
//   rank    u8       1..3
//   extents rank x u32, little-endian
//   payload product(extents) x float32, little-endian, row-major
//
// Values are stored as float32 on disk regardless of the in-memory scalar
// type; float32 tensors round-trip bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cytr/tensor.hpp"

namespace cytr {

namespace detail {

inline void put_u32_le(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xFF));
  buf.push_back(static_cast<char>((v >> 8) & 0xFF));
  buf.push_back(static_cast<char>((v >> 16) & 0xFF));
  buf.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline constexpr char kTensorMagic[5] = {0x43, 0x59, 0x54, 0x52, 0x31};

/// Serializes shape + float32 values to the CYTR1 byte layout.
template <typename S>
std::string encode_cytr1(const Tensor<S>& t) {
  std::string buf;
  buf.reserve(6 + 4 * t.rank() + 4 * t.size());
  buf.append(kTensorMagic, 5);
  buf.push_back(static_cast<char>(t.rank()));
  for (std::size_t e : t.shape) detail::put_u32_le(buf, static_cast<std::uint32_t>(e));
  for (S v : t.values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32_le(buf, bits);
  }
  return buf;
}

/// Parses a CYTR1 byte buffer; throws IoError on any malformed header.
template <typename S>
Tensor<S> decode_cytr1(const std::string& buf, const std::string& origin = "<memory>") {
  const auto fail = [&origin](const std::string& why) -> Tensor<S> {
    throw IoError("bad CYTR1 data in " + origin + ": " + why);
  };
  if (buf.size() < 6) return fail("truncated header");
  if (std::memcmp(buf.data(), kTensorMagic, 5) != 0) return fail("wrong magic bytes");
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  const std::size_t rank = p[5];
  if (rank < 1 || rank > 3) return fail("rank must be 1..3");
  if (buf.size() < 6 + 4 * rank) return fail("truncated extents");
  Shape shape(rank);
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = detail::get_u32_le(p + 6 + 4 * i);
    if (shape[i] == 0) return fail("zero extent");
    count *= shape[i];
  }
  const std::size_t payload_at = 6 + 4 * rank;
  if (buf.size() != payload_at + 4 * count) return fail("payload length mismatch");
  std::vector<S> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = detail::get_u32_le(p + payload_at + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    values[i] = static_cast<S>(f);
  }
  return Tensor<S>(std::move(shape), std::move(values));
}

template <typename S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const std::string buf = encode_cytr1(t);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path);
}

template <typename S>
Tensor<S> load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_cytr1<S>(buf, path);
}

}  // namespace cytr
