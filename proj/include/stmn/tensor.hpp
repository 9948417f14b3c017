#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "stmn/errors.hpp"

namespace stmn {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& dims) {
  std::string out = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i != 0) out += "x";
    out += std::to_string(dims[i]);
  }
  return out + "]";
}

inline std::size_t shape_count(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

enum class DType : unsigned char { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return DType::f32;
  } else {
    return DType::f64;
  }
}

// Dense row-major tensor. Feature and memory maps are rank 3 (H x W x C);
// kernels are rank 4 (kh x kw x Cin x Cout).
template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "Tensor supports f32 and f64 only");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims) : dims_(std::move(dims)) {
    check_dims();
    data_.assign(shape_count(dims_), T{0});
  }

  Tensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (shape_count(dims_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + shape_string(dims_));
    }
  }

  static Tensor filled(Shape dims, T value) {
    Tensor t(std::move(dims));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const T> values() const { return data_; }
  std::span<T> values() { return data_; }
  const T* raw() const { return data_.data(); }
  T* raw() { return data_.data(); }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  // Rank-3 (H x W x C) helpers.
  std::size_t height() const { return dims_[0]; }
  std::size_t width() const { return dims_[1]; }
  std::size_t channels() const { return dims_[2]; }

  std::size_t offset(std::size_t h, std::size_t w, std::size_t c) const {
    return (h * dims_[1] + w) * dims_[2] + c;
  }
  T at(std::size_t h, std::size_t w, std::size_t c) const { return data_[offset(h, w, c)]; }
  T& at(std::size_t h, std::size_t w, std::size_t c) { return data_[offset(h, w, c)]; }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_dims() const {
    if (dims_.empty()) throw ShapeError("tensor must have at least one dimension");
    for (std::size_t d : dims_) {
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(dims_));
    }
  }

  Shape dims_;
  std::vector<T> data_;
};

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.dims()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.dims()) + " vs " +
                     shape_string(b.dims()));
  }
}

}  // namespace stmn
