// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace vqa::io {

/// Malformed or truncated binary/text input. `offset` is the byte position
/// (or line number for text formats) where the problem was detected.
class FormatError : public std::runtime_error {
public:
  FormatError(const std::string &what, std::uint64_t offset);
  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

/// Little-endian encoder appending to an in-memory buffer.
class ByteWriter {
public:
  void bytes(std::string_view raw) { buf_.append(raw); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  /// u32 length prefix followed by the raw bytes.
  void str(std::string_view s);

  const std::string &buffer() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

private:
  std::string buf_;
};

/// Little-endian decoder that reports the offset of any short read.
class ByteReader {
public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n, const char *what);
  std::uint32_t u32(const char *what);
  std::uint64_t u64(const char *what);
  float f32(const char *what);
  double f64(const char *what);
  std::string str(const char *what);

  /// Throws unless at least `n` bytes remain, naming expected vs actual.
  void require(std::uint64_t n, const char *what) const;
  void expect_magic(std::string_view magic);

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path &path);
void write_file(const std::filesystem::path &path, std::string_view contents);

} // namespace vqa::io
