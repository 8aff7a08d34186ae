#include "storylab/container.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <sstream>

namespace storylab {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'R', 'Y', 'L', 'A', 'B', '\0'};

class Writer {
 public:
  template <class T>
  void put(T value) {
    std::byte raw[sizeof(T)];
    ArrayEntry::store_le(value, raw);
    out_.append(reinterpret_cast<const char*>(raw), sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) { out_.append(static_cast<const char*>(data), n); }
  void put_string32(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v = ArrayEntry::load_le<T>(reinterpret_cast<const std::byte*>(in_.data() + pos_));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view get_bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string32() { return std::string(get_bytes(get<std::uint32_t>())); }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("container truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kI32: return "i32";
    case DType::kI64: return "i64";
    case DType::kU64: return "u64";
    case DType::kU8: return "u8";
  }
  return "unknown";
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32: case DType::kI32: return 4;
    case DType::kF64: case DType::kI64: case DType::kU64: return 8;
    case DType::kU8: return 1;
  }
  throw FormatError("unknown dtype tag");
}

bool Container::has(std::string_view name) const {
  return std::any_of(entries.begin(), entries.end(), [&](const ArrayEntry& e) { return e.name == name; });
}

const ArrayEntry& Container::get(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw FormatError("container of kind '" + kind + "' has no entry '" + std::string(name) + "'");
}

std::string Container::serialize() const {
  Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kVersion);
  w.put_string32(kind);
  w.put<std::uint64_t>(metadata.size());
  w.put_bytes(metadata.data(), metadata.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put_string32(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(e.bytes.size());
    w.put_bytes(e.bytes.data(), e.bytes.size());
  }
  return w.take();
}

Container Container::deserialize(std::string_view bytes, std::string_view expected_kind) {
  Reader r(bytes);
  if (r.get_bytes(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw FormatError("not a storylab container (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  Container c;
  c.kind = r.get_string32();
  if (!expected_kind.empty() && c.kind != expected_kind) {
    throw FormatError("expected a '" + std::string(expected_kind) + "' container, found '" + c.kind + "'");
  }
  c.metadata = std::string(r.get_bytes(r.get<std::uint64_t>()));
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ArrayEntry e;
    e.name = r.get_string32();
    const auto tag = r.get<std::uint8_t>();
    if (tag < 1 || tag > 6) throw FormatError("entry '" + e.name + "': unknown dtype tag");
    e.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint64_t>());
    const auto n = r.get<std::uint64_t>();
    if (n != shape_numel(e.shape) * dtype_size(e.dtype)) {
      throw FormatError("entry '" + e.name + "': byte count disagrees with shape");
    }
    auto raw = r.get_bytes(n);
    e.bytes.resize(n);
    std::memcpy(e.bytes.data(), raw.data(), n);
    c.entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after container");
  return c;
}

void Container::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

Container Container::load(const std::filesystem::path& path, std::string_view expected_kind) {
  return deserialize(read_file(path), expected_kind);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace storylab
