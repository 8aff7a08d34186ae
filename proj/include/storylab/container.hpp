#pragma once

// Versioned little-endian binary container:
//
//   "STRYLAB\0"  u32 version  u32+bytes kind  u64+bytes metadata text
//   u32 entry count, then per entry:
//     u32+bytes name  u8 dtype  u32 rank  u64 dims[rank]  u64 byte count  raw
//
// Entries keep insertion order, so writing the same content twice yields
// identical bytes.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "storylab/errors.hpp"
#include "storylab/tensor.hpp"

namespace storylab {

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2, kI32 = 3, kI64 = 4, kU64 = 5, kU8 = 6 };

std::string to_string(DType dtype);
std::size_t dtype_size(DType dtype);

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::kF32;
  else if constexpr (std::is_same_v<T, double>) return DType::kF64;
  else if constexpr (std::is_same_v<T, std::int32_t>) return DType::kI32;
  else if constexpr (std::is_same_v<T, std::int64_t>) return DType::kI64;
  else if constexpr (std::is_same_v<T, std::uint64_t>) return DType::kU64;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::kU8;
  else static_assert(sizeof(T) == 0, "unsupported container dtype");
}

struct ArrayEntry {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::byte> bytes;  // little-endian

  template <class T>
  static ArrayEntry from(std::string name, Shape shape, std::span<const T> values) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("container entry '" + name + "': shape does not match value count");
    }
    ArrayEntry e;
    e.name = std::move(name);
    e.dtype = dtype_of<T>();
    e.shape = std::move(shape);
    e.bytes.resize(values.size() * sizeof(T));
    for (std::size_t i = 0; i < values.size(); ++i) store_le(values[i], e.bytes.data() + i * sizeof(T));
    return e;
  }

  /// Values converted to T; floating entries convert between precisions.
  template <class T>
  std::vector<T> as() const {
    const std::size_t n = shape_numel(shape);
    std::vector<T> out(n);
    auto read = [&](auto tag) {
      using S = decltype(tag);
      if (bytes.size() != n * sizeof(S)) throw FormatError("container entry '" + name + "': size mismatch");
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(load_le<S>(bytes.data() + i * sizeof(S)));
    };
    switch (dtype) {
      case DType::kF32: read(float{}); break;
      case DType::kF64: read(double{}); break;
      case DType::kI32: read(std::int32_t{}); break;
      case DType::kI64: read(std::int64_t{}); break;
      case DType::kU64: read(std::uint64_t{}); break;
      case DType::kU8: read(std::uint8_t{}); break;
    }
    return out;
  }

  template <class T>
  static void store_le(T value, std::byte* dst) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    std::memcpy(dst, raw, sizeof(T));
  }

  template <class T>
  static T load_le(const std::byte* src) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, src, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }
};

struct Container {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  std::string metadata;
  std::vector<ArrayEntry> entries;

  template <class T>
  void add(std::string name, Shape shape, std::span<const T> values) {
    entries.push_back(ArrayEntry::from<T>(std::move(name), std::move(shape), values));
  }
  bool has(std::string_view name) const;
  const ArrayEntry& get(std::string_view name) const;

  std::string serialize() const;
  /// Throws FormatError on bad magic, unknown version or truncation, and
  /// when `expected_kind` is non-empty and differs.
  static Container deserialize(std::string_view bytes, std::string_view expected_kind = {});
  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path, std::string_view expected_kind = {});
};

/// Reads a whole file; throws DataError if it cannot be opened.
std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace storylab
