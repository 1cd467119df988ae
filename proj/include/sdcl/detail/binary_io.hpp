#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sdcl/error.hpp"

namespace sdcl::detail {

inline void write_f64_le(std::ostream& os, std::span<const double> values) {
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void decode_f64_le(const unsigned char* src, std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{src[i * 8 + b]} << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
}

/// Reads a whole stream into memory.
inline std::vector<unsigned char> slurp(std::istream& is) {
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

/// Returns the line starting at `pos` (without the newline) and advances pos
/// past it. Throws FormatError if no newline is found.
inline std::string take_line(const std::vector<unsigned char>& bytes, std::size_t& pos, const char* what) {
  const std::size_t start = pos;
  while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
  if (pos >= bytes.size()) throw FormatError(std::string(what) + ": unterminated header line", start);
  std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  ++pos;
  return line;
}

}  // namespace sdcl::detail
