// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The coda-prompt authors.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "coda/tensor.hpp"

namespace coda::io {

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return s;
}

enum class DType : std::uint8_t { kF64 = 1, kU32 = 2, kBytes = 3 };

struct Entry {
  std::string name;
  DType dtype = DType::kF64;
  Shape shape;
  std::vector<double> f64;
  std::vector<std::uint32_t> u32;
  std::string bytes;
};

/// Named arrays behind an 8-byte magic; see docs/formats.md for the layout.
class Container {
 public:
  static constexpr std::uint32_t kVersion = 1;

  explicit Container(std::string_view magic) {
    if (magic.size() != 8) throw IoError("container magic must be 8 bytes");
    std::memcpy(magic_.data(), magic.data(), 8);
  }

  std::string_view magic() const { return {magic_.data(), 8}; }
  std::uint32_t version() const { return version_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void add_tensor(std::string name, const Tensor& t) {
    Entry e{std::move(name), DType::kF64, t.shape(), {}, {}, {}};
    e.f64.assign(t.data().begin(), t.data().end());
    push(std::move(e));
  }

  void add_u32(std::string name, std::vector<std::uint32_t> values) {
    Entry e{std::move(name), DType::kU32, {values.size()}, {}, {}, {}};
    e.u32 = std::move(values);
    push(std::move(e));
  }

  void add_text(std::string name, std::string text) {
    Entry e{std::move(name), DType::kBytes, {text.size()}, {}, {}, {}};
    e.bytes = std::move(text);
    push(std::move(e));
  }

  bool contains(std::string_view name) const { return lookup(name) != nullptr; }

  const Entry& at(std::string_view name) const {
    const Entry* e = lookup(name);
    if (e == nullptr) throw IoError("missing entry '" + std::string(name) + "'");
    return *e;
  }

  Tensor tensor(std::string_view name) const {
    const Entry& e = typed(name, DType::kF64);
    return Tensor(e.shape, e.f64);
  }

  /// Reads an entry into an existing tensor, requiring an identical shape.
  void load_into(std::string_view name, Tensor& dst) const {
    const Entry& e = typed(name, DType::kF64);
    if (e.shape != dst.shape()) {
      throw IoError("entry '" + std::string(name) + "' has shape " +
                    to_string(e.shape) + ", expected " +
                    to_string(dst.shape()));
    }
    std::copy(e.f64.begin(), e.f64.end(), dst.data().begin());
  }

  const std::vector<std::uint32_t>& u32(std::string_view name) const {
    return typed(name, DType::kU32).u32;
  }

  const std::string& text(std::string_view name) const {
    return typed(name, DType::kBytes).bytes;
  }

  std::string encode() const {
    std::string out(magic_.data(), 8);
    put_u32(out, version_);
    put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const Entry& e : entries_) {
      put_u32(out, static_cast<std::uint32_t>(e.name.size()));
      out += e.name;
      out.push_back(static_cast<char>(e.dtype));
      put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
      for (std::size_t d : e.shape) put_u64(out, d);
      switch (e.dtype) {
        case DType::kF64:
          for (double v : e.f64) put_u64(out, std::bit_cast<std::uint64_t>(v));
          break;
        case DType::kU32:
          for (std::uint32_t v : e.u32) put_u32(out, v);
          break;
        case DType::kBytes:
          out += e.bytes;
          break;
      }
    }
    put_u64(out, fnv1a(out));
    return out;
  }

  static Container decode(std::string_view bytes, std::string_view magic) {
    Reader r{bytes, 0};
    if (bytes.size() < 24) throw IoError("container truncated");
    const std::string_view body = bytes.substr(0, bytes.size() - 8);
    Reader tail{bytes, bytes.size() - 8};
    if (tail.u64() != fnv1a(body)) throw IoError("container checksum mismatch");
    if (r.take(8) != magic) {
      throw IoError("bad magic, expected '" + std::string(magic) + "'");
    }
    Container c(magic);
    c.version_ = r.u32();
    if (c.version_ != kVersion) {
      throw IoError("unsupported container version " +
                    std::to_string(c.version_));
    }
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      Entry e;
      e.name = std::string(r.take(r.u32()));
      const auto code = static_cast<std::uint8_t>(r.take(1)[0]);
      if (code < 1 || code > 3) throw IoError("unknown dtype in '" + e.name + "'");
      e.dtype = static_cast<DType>(code);
      const std::uint32_t rank = r.u32();
      for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.u64());
      const std::size_t n = numel(e.shape);
      switch (e.dtype) {
        case DType::kF64:
          r.need(n * 8);
          e.f64.resize(n);
          for (auto& v : e.f64) v = std::bit_cast<double>(r.u64());
          break;
        case DType::kU32:
          r.need(n * 4);
          e.u32.resize(n);
          for (auto& v : e.u32) v = r.u32();
          break;
        case DType::kBytes:
          e.bytes = std::string(r.take(n));
          break;
      }
      c.push(std::move(e));
    }
    if (r.pos != body.size()) throw IoError("trailing bytes in container");
    return c;
  }

 private:
  struct Reader {
    std::string_view data;
    std::size_t pos;

    void need(std::size_t n) const {
      if (data.size() - pos < n) throw IoError("container truncated");
    }
    std::string_view take(std::size_t n) {
      need(n);
      auto s = data.substr(pos, n);
      pos += n;
      return s;
    }
    std::uint64_t uint(std::size_t width) {
      auto s = take(width);
      std::uint64_t v = 0;
      for (std::size_t i = 0; i < width; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i]))
             << (8 * i);
      }
      return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
    std::uint64_t u64() { return uint(8); }
  };

  static void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  const Entry* lookup(std::string_view name) const {
    for (const Entry& e : entries_) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  const Entry& typed(std::string_view name, DType dtype) const {
    const Entry& e = at(name);
    if (e.dtype != dtype) {
      throw IoError("entry '" + std::string(name) + "' has the wrong type");
    }
    return e;
  }

  void push(Entry e) {
    if (lookup(e.name) != nullptr) {
      throw IoError("duplicate entry '" + e.name + "'");
    }
    entries_.push_back(std::move(e));
  }

  std::array<char, 8> magic_{};
  std::uint32_t version_ = kVersion;
  std::vector<Entry> entries_;
};

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("file not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
inline void write_bytes(const std::filesystem::path& path,
                        std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_container(const std::filesystem::path& path,
                            const Container& c) {
  write_bytes(path, c.encode());
}

inline Container read_container(const std::filesystem::path& path,
                                std::string_view magic) {
  return Container::decode(read_bytes(path), magic);
}

}  // namespace coda::io
