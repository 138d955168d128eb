#pragma once

// Named-array archive: 4-byte magic, u64 little-endian manifest length, JSON
// manifest, then raw little-endian array payloads in manifest order.

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "visualsplit/errors.hpp"
#include "visualsplit/tensor.hpp"

namespace vsplit {

static_assert(std::endian::native == std::endian::little, "archive payloads are written in host byte order");

namespace detail {

template <class T>
constexpr std::string_view dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else static_assert(sizeof(T) == 0, "unsupported archive dtype");
}

inline std::size_t dtype_size(std::string_view name) {
  if (name == "f32") return 4;
  if (name == "f64") return 8;
  throw FormatError("unknown dtype " + std::string(name));
}

}  // namespace detail

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for " + path);
}

class ArchiveWriter {
 public:
  explicit ArchiveWriter(std::string magic) : magic_(std::move(magic)) {
    if (magic_.size() != 4) throw std::invalid_argument("archive magic must be 4 bytes");
  }

  nlohmann::json& header() { return header_; }

  template <class T>
  void add(const std::string& name, const Tensor<T>& t) {
    add_raw(name, detail::dtype_name<T>(), t.shape(), t.data(), t.size() * sizeof(T));
  }

  void add_raw(const std::string& name, std::string_view dtype, const Shape& shape, const void* data,
               std::size_t bytes) {
    for (const auto& e : entries_) {
      if (e["name"] == name) throw FormatError("duplicate array " + name);
    }
    entries_.push_back({{"name", name}, {"dtype", dtype}, {"shape", shape}, {"offset", payload_.size()}});
    const auto* p = static_cast<const char*>(data);
    payload_.insert(payload_.end(), p, p + bytes);
  }

  std::string bytes() const {
    const nlohmann::json manifest{{"header", header_}, {"arrays", entries_}};
    const std::string text = manifest.dump();
    std::string out = magic_;
    const std::uint64_t len = text.size();
    out.append(reinterpret_cast<const char*>(&len), sizeof len);
    out += text;
    out.append(payload_.begin(), payload_.end());
    return out;
  }

  void write(const std::string& path) const { write_file(path, bytes()); }

 private:
  std::string magic_;
  nlohmann::json header_ = nlohmann::json::object();
  std::vector<nlohmann::json> entries_;
  std::vector<char> payload_;
};

class ArchiveReader {
 public:
  ArchiveReader(std::string bytes, std::string_view magic) : bytes_(std::move(bytes)) {
    if (bytes_.size() < 12 || std::string_view(bytes_).substr(0, 4) != magic) {
      throw FormatError("not a " + std::string(magic) + " archive");
    }
    std::uint64_t len = 0;
    std::memcpy(&len, bytes_.data() + 4, sizeof len);
    if (len > bytes_.size() - 12) throw FormatError("truncated manifest");
    try {
      const auto manifest = nlohmann::json::parse(bytes_.begin() + 12, bytes_.begin() + 12 + static_cast<long>(len));
      header_ = manifest.at("header");
      for (const auto& e : manifest.at("arrays")) {
        Entry entry{e.at("dtype").get<std::string>(), e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()};
        entries_.emplace(e.at("name").get<std::string>(), std::move(entry));
      }
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("malformed manifest: ") + ex.what());
    }
    payload_offset_ = 12 + len;
    for (const auto& [name, e] : entries_) {
      const auto end = e.offset + numel(e.shape) * detail::dtype_size(e.dtype);
      if (payload_offset_ + end > bytes_.size()) throw FormatError("truncated payload for " + name);
    }
  }

  static ArchiveReader from_file(const std::string& path, std::string_view magic) {
    return ArchiveReader(read_file(path), magic);
  }

  const nlohmann::json& header() const { return header_; }
  bool contains(const std::string& name) const { return entries_.contains(name); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  const Shape& shape(const std::string& name) const { return entry(name).shape; }

  /// Reads an array, converting from its stored dtype when it differs from T.
  template <class T>
  Tensor<T> get(const std::string& name) const {
    const auto& e = entry(name);
    Tensor<T> out(e.shape);
    const char* src = bytes_.data() + payload_offset_ + e.offset;
    if (e.dtype == detail::dtype_name<T>()) {
      std::memcpy(out.data(), src, out.size() * sizeof(T));
    } else if (e.dtype == "f32") {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(load<float>(src, i));
    } else {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(load<double>(src, i));
    }
    return out;
  }

  template <class T>
  Tensor<T> get(const std::string& name, const Shape& expected) const {
    const auto& s = shape(name);
    if (s != expected) {
      throw ShapeError(name + ": stored shape " + to_string(s) + ", expected " + to_string(expected));
    }
    return get<T>(name);
  }

 private:
  struct Entry {
    std::string dtype;
    Shape shape;
    std::size_t offset;
  };

  template <class U>
  static U load(const char* src, std::size_t i) {
    U v;
    std::memcpy(&v, src + i * sizeof(U), sizeof(U));
    return v;
  }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("missing array " + name);
    return it->second;
  }

  std::string bytes_;
  nlohmann::json header_;
  std::map<std::string, Entry> entries_;
  std::size_t payload_offset_ = 0;
};

}  // namespace vsplit
