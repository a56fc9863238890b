#include "eqreg/binary_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "eqreg/error.hpp"

namespace eqreg {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(
      ::crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

void ByteWriter::magic(std::string_view m) {
  for (char ch : m) buf_.push_back(static_cast<std::uint8_t>(ch));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  for (char ch : s) buf_.push_back(static_cast<std::uint8_t>(ch));
}

void ByteWriter::crc_trailer() { u32(crc32(buf_)); }

const std::uint8_t* ByteReader::take(std::size_t n) {
  if (data_.size() - pos_ < n) {
    throw Error(ErrorKind::Truncated, "needed " + std::to_string(n) + " bytes at offset " +
                                          std::to_string(pos_) + ", file has " +
                                          std::to_string(data_.size()));
  }
  const std::uint8_t* p = data_.data() + pos_;
  pos_ += n;
  return p;
}

void ByteReader::finish_with_crc() {
  if (remaining() < 4) throw Error(ErrorKind::Truncated, "file ends before its checksum");
  if (remaining() > 4) throw Error(ErrorKind::Format, "unexpected bytes before checksum");
  const std::size_t body = pos_;
  const std::uint32_t stored = u32();
  if (crc32(data_.first(body)) != stored) throw Error(ErrorKind::Checksum, "CRC32 mismatch");
}

bool ByteReader::expect_magic(std::string_view m) {
  if (data_.size() - pos_ < m.size()) return false;
  const bool ok = std::memcmp(data_.data() + pos_, m.data(), m.size()) == 0;
  if (ok) pos_ += m.size();
  return ok;
}

std::uint8_t ByteReader::u8() { return *take(1); }

std::uint32_t ByteReader::u32() {
  const std::uint8_t* p = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  const std::uint8_t* p = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  const std::uint8_t* p = take(n);
  return std::string(reinterpret_cast<const char*>(p), n);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw Error(ErrorKind::Io, "cannot read " + path.string());
  }
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot rename into " + path.string() + ": " + ec.message());
}

}  // namespace eqreg
