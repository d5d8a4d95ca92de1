// SPDX-License-Identifier: Apache-2.0
#include "vqa/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace vqa::io {

FormatError::FormatError(const std::string &what, std::uint64_t offset)
    : std::runtime_error(what + " (at offset " + std::to_string(offset) + ")"),
      offset_(offset) {}

namespace {

template <typename T> void put_le(std::string &buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename T> T get_le(std::string_view raw) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<T>(static_cast<unsigned char>(raw[i])) << (8 * i);
  return v;
}

} // namespace

void ByteWriter::u32(std::uint32_t v) { put_le(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(buf_, v); }
void ByteWriter::f32(float v) { put_le(buf_, std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { put_le(buf_, std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.append(s);
}

void ByteReader::require(std::uint64_t n, const char *what) const {
  if (remaining() < n)
    throw FormatError(std::string("truncated ") + what + ": expected " + std::to_string(n) +
                          " more bytes, found " + std::to_string(remaining()),
                      pos_);
}

std::string_view ByteReader::bytes(std::size_t n, const char *what) {
  require(n, what);
  auto out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t ByteReader::u32(const char *what) {
  return get_le<std::uint32_t>(bytes(4, what));
}

std::uint64_t ByteReader::u64(const char *what) {
  return get_le<std::uint64_t>(bytes(8, what));
}

float ByteReader::f32(const char *what) { return std::bit_cast<float>(u32(what)); }

double ByteReader::f64(const char *what) { return std::bit_cast<double>(u64(what)); }

std::string ByteReader::str(const char *what) {
  const auto n = u32(what);
  return std::string(bytes(n, what));
}

void ByteReader::expect_magic(std::string_view magic) {
  const auto start = pos_;
  auto got = bytes(magic.size(), "magic");
  if (got != magic)
    throw FormatError("bad magic: expected '" + std::string(magic) + "'", start);
}

std::string read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path &path, std::string_view contents) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out)
    throw std::runtime_error("short write to '" + path.string() + "'");
}

} // namespace vqa::io
