#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mvr/errors.hpp"

// Byte-level helpers for the binary artifact formats. All formats are
// little-endian; scalar values are memcpy'd, which targets little-endian
// hosts.

namespace mvr::bin {

inline void write_raw(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_raw(out, &v, 4); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_raw(out, &v, 8); }
inline void write_f64(std::ostream& out, double v) { write_raw(out, &v, 8); }

inline void write_f64s(std::ostream& out, const std::vector<double>& v) {
  write_raw(out, v.data(), v.size() * 8);
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  write_raw(out, s.data(), s.size());
}

inline void read_raw(std::istream& in, void* p, std::size_t n, const std::string& what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw DataError(what + ": truncated file");
  }
}

inline std::uint32_t read_u32(std::istream& in, const std::string& what) {
  std::uint32_t v;
  read_raw(in, &v, 4, what);
  return v;
}

inline std::uint64_t read_u64(std::istream& in, const std::string& what) {
  std::uint64_t v;
  read_raw(in, &v, 8, what);
  return v;
}

inline double read_f64(std::istream& in, const std::string& what) {
  double v;
  read_raw(in, &v, 8, what);
  return v;
}

inline std::vector<double> read_f64s(std::istream& in, std::size_t n, const std::string& what) {
  std::vector<double> v(n);
  read_raw(in, v.data(), n * 8, what);
  return v;
}

inline std::string read_string(std::istream& in, const std::string& what) {
  const std::uint32_t len = read_u32(in, what);
  if (len > (1u << 20)) throw DataError(what + ": unreasonable string length");
  std::string s(len, '\0');
  read_raw(in, s.data(), len, what);
  return s;
}

inline void write_magic(std::ostream& out, const char magic[5]) { write_raw(out, magic, 4); }

inline void expect_magic(std::istream& in, const char magic[5], const std::string& what) {
  char got[4];
  read_raw(in, got, 4, what);
  if (std::memcmp(got, magic, 4) != 0) {
    throw DataError(what + ": bad magic, expected " + std::string(magic, 4));
  }
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open for reading");
  return in;
}

/// FNV-1a over a byte stream, used for index build checksums.
inline std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open for checksum");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace mvr::bin
