#pragma once

// Binary tensor files: "SLID", u16 version, u8 dtype (0 f32, 1 f64), u8 ndim, ndim x u64 dims,
// row-major little-endian payload.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <variant>

#include "slotid/tensor.hpp"

namespace slotid::io {

inline constexpr char kMagic[4] = {'S', 'L', 'I', 'D'};
inline constexpr std::uint16_t kVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void put(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw FormatError("tensor file truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else static_assert(sizeof(T) == 0, "tensor files hold float or double");
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.ndim() > 255) throw FormatError("too many dimensions");
  os.write(kMagic, 4);
  detail::put<std::uint16_t>(os, kVersion);
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(detail::dtype_of<T>()));
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) detail::put<std::uint64_t>(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) detail::put<T>(os, t[i]);
  }
  if (!os) throw FormatError("write failed");
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline AnyTensor read_any(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic");
  const auto version = detail::get<std::uint16_t>(is);
  if (version != kVersion) throw FormatError("unsupported version " + std::to_string(version));
  const auto code = detail::get<std::uint8_t>(is);
  const auto nd = detail::get<std::uint8_t>(is);
  Shape s(nd);
  for (auto& d : s) d = static_cast<std::size_t>(detail::get<std::uint64_t>(is));
  auto load = [&](auto tag) -> AnyTensor {
    using T = decltype(tag);
    Tensor<T> t(s);
    if constexpr (std::endian::native == std::endian::little) {
      const auto bytes = static_cast<std::streamsize>(t.size() * sizeof(T));
      if (!is.read(reinterpret_cast<char*>(t.data()), bytes)) throw FormatError("payload truncated");
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = detail::get<T>(is);
    }
    return t;
  };
  switch (static_cast<DType>(code)) {
    case DType::f32: return load(float{});
    case DType::f64: return load(double{});
  }
  throw FormatError("unknown dtype code " + std::to_string(code));
}

/// Reads a tensor and converts it to T if the stored dtype differs.
template <class T>
Tensor<T> read_tensor(std::istream& is) {
  return std::visit([](auto&& t) { return t.template cast<T>(); }, read_any(is));
}

template <class T>
void save(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <class T>
Tensor<T> load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_tensor<T>(is);
}

}  // namespace slotid::io
