#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "stmn/tensor.hpp"

namespace stmn {

// Largest supported matching radius; (2k+1)^2 offsets must fit the 64-bit valid mask.
inline constexpr std::size_t kMaxMatchRadius = 3;
inline constexpr double kGammaDegenerateThreshold = 1e-12;

// Per-location affinity weights over the (2k+1)^2 window around each cell.
// Offset index o = (di + k) * (2k + 1) + (dj + k), where di moves along rows.
template <typename T>
struct TransformField {
  std::size_t k = 0;
  Tensor<T> gamma;                       // H x W x (2k+1)^2, zero at out-of-bounds offsets
  std::vector<std::uint64_t> valid_mask;  // bit o set when offset o is in bounds
  std::vector<std::uint8_t> degenerate;   // 1 where the uniform fallback was used
  std::vector<T> denominator;            // affinity sum per location (0 when degenerate)

  std::size_t window() const { return 2 * k + 1; }
  std::size_t offsets() const { return window() * window(); }
  std::size_t height() const { return gamma.height(); }
  std::size_t width() const { return gamma.width(); }
  bool is_degenerate(std::size_t h, std::size_t w) const { return degenerate[h * width() + w] != 0; }
  std::size_t degenerate_count() const;
};

template <typename T>
TransformField<T> compute_gamma(const Tensor<T>& f_cur, const Tensor<T>& f_prev, std::size_t k);

// M'(x, y) = sum over in-bounds offsets of gamma(x, y, o) * M(x + di, y + dj).
template <typename T>
Tensor<T> align_memory(const Tensor<T>& m_prev, const TransformField<T>& field);

template <typename T>
struct MatchTransGrads {
  Tensor<T> grad_f_cur;
  Tensor<T> grad_f_prev;
  Tensor<T> grad_m_prev;
};

// Gradients of align_memory(m_prev, compute_gamma(f_cur, f_prev, k)). `field` is the
// forward result for the same inputs. With stop_gamma_grad the feature gradients are
// zero, and with want_feature_grad == false they are left empty.
template <typename T>
MatchTransGrads<T> matchtrans_backward(const Tensor<T>& f_cur, const Tensor<T>& f_prev,
                                       const Tensor<T>& m_prev, const TransformField<T>& field,
                                       const Tensor<T>& grad_aligned, bool stop_gamma_grad = false,
                                       bool want_feature_grad = true);

}  // namespace stmn
