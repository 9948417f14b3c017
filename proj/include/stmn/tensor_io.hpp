#pragma once

#include <filesystem>
#include <iosfwd>
#include <variant>
#include <vector>

#include "stmn/tensor.hpp"

namespace stmn {

// Binary tensor file layout (all integers little-endian):
//   "STMN" | u8 version | u8 dtype (0 = f32, 1 = f64) | u8 ndim | u32 dims[ndim] | payload
inline constexpr unsigned char kTensorFormatVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
std::vector<unsigned char> encode_tensor(const Tensor<T>& t);

AnyTensor decode_tensor(const std::vector<unsigned char>& bytes);

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

AnyTensor read_any_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

AnyTensor load_any_tensor(const std::filesystem::path& path);

// Loads and converts to the requested precision.
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

template <typename T>
Tensor<T> as_precision(const AnyTensor& any) {
  return std::visit([](const auto& t) { return t.template cast<T>(); }, any);
}

}  // namespace stmn
