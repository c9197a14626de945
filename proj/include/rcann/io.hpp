#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rcann/error.hpp"

namespace rcann::io {

// Little-endian writer into an in-memory buffer; files are written in one go.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

  void save(const std::filesystem::path& path) const;

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

// Writes to <path>.tmp and renames over <path>.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t n) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp.string() + ": " + ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline void Writer::save(const std::filesystem::path& path) const {
  write_file_atomic(path, buf_.data(), buf_.size());
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> data(size);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
  if (!in) throw Error("read failed: " + path.string());
  return data;
}

// Bounds-checked little-endian reader. Every read names the section it belongs
// to so a truncated file reports where it ran out.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  void expect_magic(std::string_view m, const std::string& section) {
    need(m.size(), section);
    if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) {
      throw FormatError(section, "bad magic (expected \"" + std::string(m) + "\")");
    }
    pos_ += m.size();
  }
  std::uint8_t u8(const std::string& section) { return static_cast<std::uint8_t>(get_le(1, section)); }
  std::uint16_t u16(const std::string& section) { return static_cast<std::uint16_t>(get_le(2, section)); }
  std::uint32_t u32(const std::string& section) { return static_cast<std::uint32_t>(get_le(4, section)); }
  std::uint64_t u64(const std::string& section) { return get_le(8, section); }
  float f32(const std::string& section) {
    const std::uint32_t u = u32(section);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  std::span<const std::uint8_t> bytes(std::size_t n, const std::string& section) {
    need(n, section);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  // Guards element counts read from a header against the bytes actually left.
  void need(std::size_t n, const std::string& section) const {
    if (n > data_.size() - pos_) {
      throw FormatError(section, "truncated (need " + std::to_string(n) + " bytes, have " +
                                     std::to_string(data_.size() - pos_) + ")");
    }
  }
  std::size_t remaining() const { return data_.size() - pos_; }

  void expect_end(const std::string& section) const {
    if (remaining() != 0) {
      throw FormatError(section, std::to_string(remaining()) + " trailing bytes");
    }
  }

 private:
  std::uint64_t get_le(int n, const std::string& section) {
    need(static_cast<std::size_t>(n), section);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace rcann::io
