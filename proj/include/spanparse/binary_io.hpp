#pragma once

// Little-endian primitives shared by the CTXV1 and SPCK1 formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "spanparse/error.hpp"

namespace spanparse::io {

template <typename UInt>
void write_le(std::ostream& out, UInt v) {
  char buf[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf, sizeof(UInt));
}

inline void write_f32(std::ostream& out, float f) { write_le(out, std::bit_cast<std::uint32_t>(f)); }

template <typename UInt>
UInt read_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(UInt)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(UInt)))
    throw FormatError("TruncatedFile", std::string("unexpected end of file reading ") + what);
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(buf[i]) << (8 * i);
  return v;
}

inline float read_f32(std::istream& in, const char* what) {
  return std::bit_cast<float>(read_le<std::uint32_t>(in, what));
}

inline std::string read_bytes(std::istream& in, std::size_t n, const char* what) {
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n)))
    throw FormatError("TruncatedFile", std::string("unexpected end of file reading ") + what);
  return s;
}

// Magic strings are stored with their terminating NUL ("SPCK1\0").
inline void expect_magic(std::istream& in, std::string_view magic) {
  const std::string got = read_bytes(in, magic.size() + 1, "magic");
  if (got.compare(0, magic.size(), magic) != 0 || got.back() != '\0')
    throw FormatError("BadMagic", "expected " + std::string(magic) + " header");
}

inline void write_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  out.put('\0');
}

}  // namespace spanparse::io
