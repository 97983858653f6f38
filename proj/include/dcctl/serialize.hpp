#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "dcctl/numerics/errors.hpp"
#include "dcctl/numerics/tensor.hpp"
#include "dcctl/raster.hpp"

// Named tensor records, shared by checkpoints and dataset blobs:
//   u32 name_length, name bytes, u8 dtype tag, u8 rank, u32 extent * rank,
//   payload (element count * dtype size bytes).
// All integers and floating-point payloads are little-endian.

namespace dcctl::io {

static_assert(std::endian::native == std::endian::little, "record I/O assumes a little-endian host");

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw ParseError("unknown dtype tag");
}

struct Record {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  std::size_t count() const { return numel_of(shape); }

  template <class T>
  std::vector<T> as() const {
    std::vector<T> out(count());
    switch (dtype) {
      case DType::f32: {
        std::vector<float> v(count());
        std::memcpy(v.data(), payload.data(), payload.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
        break;
      }
      case DType::f64: {
        std::vector<double> v(count());
        std::memcpy(v.data(), payload.data(), payload.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
        break;
      }
      case DType::u8:
        for (std::size_t i = 0; i < payload.size(); ++i) out[i] = static_cast<T>(payload[i]);
        break;
    }
    return out;
  }
  friend bool operator==(const Record&, const Record&) = default;
};

template <class T>
Record make_record(std::string name, const Shape& shape, const std::vector<T>& values) {
  Record r;
  r.name = std::move(name);
  r.shape = shape;
  if constexpr (std::is_same_v<T, float>)
    r.dtype = DType::f32;
  else if constexpr (std::is_same_v<T, double>)
    r.dtype = DType::f64;
  else
    r.dtype = DType::u8;
  r.payload.resize(values.size() * sizeof(T));
  std::memcpy(r.payload.data(), values.data(), r.payload.size());
  return r;
}

inline Record image_record(std::string name, const Image& img) {
  return make_record<std::uint8_t>(std::move(name), {img.channels, img.height, img.width}, img.data);
}

inline Image record_image(const Record& r) {
  if (r.dtype != DType::u8 || r.shape.size() != 3) throw ParseError("record '" + r.name + "' is not an 8-bit raster");
  Image img(r.shape[0], r.shape[1], r.shape[2]);
  img.data = r.payload;
  return img;
}

inline void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }
inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint8_t get_u8(std::istream& in) {
  const int c = in.get();
  if (c == EOF) throw ParseError("unexpected end of record stream");
  return static_cast<std::uint8_t>(c);
}
inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw ParseError("unexpected end of record stream");
  return v;
}
inline std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) throw ParseError("unexpected end of record stream");
  return v;
}

inline void write_record(std::ostream& out, const Record& r) {
  if (r.payload.size() != r.count() * dtype_size(r.dtype)) throw DimensionError("record payload size mismatch");
  put_u32(out, static_cast<std::uint32_t>(r.name.size()));
  out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
  put_u8(out, static_cast<std::uint8_t>(r.dtype));
  put_u8(out, static_cast<std::uint8_t>(r.shape.size()));
  for (auto e : r.shape) put_u32(out, static_cast<std::uint32_t>(e));
  out.write(reinterpret_cast<const char*>(r.payload.data()), static_cast<std::streamsize>(r.payload.size()));
}

inline Record read_record(std::istream& in) {
  Record r;
  const std::uint32_t len = get_u32(in);
  if (len > (1u << 16)) throw ParseError("implausible record name length");
  r.name.resize(len);
  if (len && !in.read(r.name.data(), len)) throw ParseError("truncated record name");
  const std::uint8_t tag = get_u8(in);
  if (tag < 1 || tag > 3) throw ParseError("record '" + r.name + "' has unknown dtype tag " + std::to_string(tag));
  r.dtype = static_cast<DType>(tag);
  const std::uint8_t rank = get_u8(in);
  r.shape.resize(rank);
  for (auto& e : r.shape) e = get_u32(in);
  r.payload.resize(r.count() * dtype_size(r.dtype));
  if (!r.payload.empty() && !in.read(reinterpret_cast<char*>(r.payload.data()), static_cast<std::streamsize>(r.payload.size())))
    throw ParseError("truncated payload in record '" + r.name + "'");
  return r;
}

/// Stable 64-bit FNV-1a hash, used for config fingerprints.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace dcctl::io
