#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace eqreg {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Little-endian byte sink.
class ByteWriter {
 public:
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void magic(std::string_view m);
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  /// u32 length followed by the raw characters.
  void str(std::string_view s);
  /// Appends the CRC32 of everything written so far.
  void crc_trailer();

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source; running past the end throws ErrorKind::Truncated.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  /// Expects exactly a CRC32 of all preceding bytes to remain; throws
  /// Truncated, Format (trailing bytes) or Checksum.
  void finish_with_crc();
  bool expect_magic(std::string_view m);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  const std::uint8_t* take(std::size_t n);
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames it into place.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace eqreg
