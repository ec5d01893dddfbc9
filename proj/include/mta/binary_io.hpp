#pragma once

// Little-endian scalar I/O independent of host byte order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "mta/tensor.hpp"

namespace mta::binio {

template <typename U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(U));
}

inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }
inline void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<std::uint32_t>(v)); }

// Reads an unsigned little-endian value; throws with the byte offset when the
// stream ends early.
template <typename U>
U read_le(std::istream& is, const char* what) {
  static_assert(std::is_unsigned_v<U>);
  const auto offset = is.tellg();
  unsigned char buf[sizeof(U)];
  is.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(U))) {
    throw Error(std::string("truncated input reading ") + what + " at byte offset " +
                std::to_string(static_cast<long long>(offset)));
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is, const char* what) {
  return std::bit_cast<double>(read_le<std::uint64_t>(is, what));
}
inline float read_f32(std::istream& is, const char* what) {
  return std::bit_cast<float>(read_le<std::uint32_t>(is, what));
}

}  // namespace mta::binio
