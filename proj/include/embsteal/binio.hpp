#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "embsteal/errors.hpp"

namespace embsteal::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void put_f32(std::ostream& out, double v) { put(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

inline void put_bytes(std::ostream& out, std::string_view s) { out.write(s.data(), static_cast<std::streamsize>(s.size())); }

// Reads exactly sizeof(T) bytes; returns false on a short read.
template <typename T>
bool try_get(std::istream& in, T& v) {
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) return false;
  v = to_little(v);
  return true;
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v{};
  if (!try_get(in, v)) throw DataError(std::string("truncated file while reading ") + what);
  return v;
}

inline double get_f32(std::istream& in, const char* what) {
  return static_cast<double>(std::bit_cast<float>(get<std::uint32_t>(in, what)));
}

inline void expect_magic(std::istream& in, std::string_view magic, const char* what) {
  std::string buf(magic.size(), '\0');
  if (!in.read(buf.data(), static_cast<std::streamsize>(buf.size())) || buf != magic) {
    throw DataError(std::string("bad magic in ") + what + ", expected " + std::string(magic));
  }
}

}  // namespace embsteal::binio
