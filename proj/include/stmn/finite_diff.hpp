#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "stmn/tensor.hpp"

namespace stmn {

template <typename T>
using ScalarFn = std::function<T(const Tensor<T>&)>;

// Signed quantities whose zero crossings are kinks of the function under test
// (ReLU pre-activations, BN* clip margins). Empty means "smooth everywhere".
template <typename T>
using KinkProbe = std::function<std::vector<T>(const Tensor<T>&)>;

// central: (f(x + eps) - f(x - eps)) / 2eps, error O(eps^2).
// richardson: (4 D(eps/2) - D(eps)) / 3 from the same stencil family, error O(eps^4).
enum class FdScheme { central, richardson };

template <typename T>
struct FiniteDiffResult {
  Tensor<T> grad;
  // accepted[i] == false when the stencil around coordinate i straddles a kink.
  std::vector<bool> accepted;

  std::size_t accepted_count() const {
    return static_cast<std::size_t>(std::count(accepted.begin(), accepted.end(), true));
  }
};

namespace detail {

template <typename T>
T checked_eval(const ScalarFn<T>& f, const Tensor<T>& x) {
  const T v = f(x);
  if (!std::isfinite(v)) throw OracleError("finite_diff: non-finite function evaluation");
  return v;
}

template <typename T>
bool stencil_crosses_kink(const std::vector<T>& lo, const std::vector<T>& mid,
                          const std::vector<T>& hi) {
  for (std::size_t k = 0; k < mid.size(); ++k) {
    const bool s_lo = lo[k] > T{0};
    const bool s_mid = mid[k] > T{0};
    const bool s_hi = hi[k] > T{0};
    if (s_lo != s_mid || s_mid != s_hi || lo[k] == T{0} || mid[k] == T{0} || hi[k] == T{0}) {
      return true;
    }
  }
  return false;
}

}  // namespace detail

// Per-coordinate difference quotients. A coordinate is rejected when any probe
// quantity changes sign (or hits zero) across the stencil points.
template <typename T>
FiniteDiffResult<T> finite_diff(const ScalarFn<T>& f, const Tensor<T>& x, T eps,
                                const KinkProbe<T>& probe = {},
                                FdScheme scheme = FdScheme::central) {
  if (!(eps > T{0})) throw UsageError("finite_diff: eps must be positive");
  FiniteDiffResult<T> out{Tensor<T>(x.dims()), std::vector<bool>(x.size(), true)};
  std::vector<T> mid;
  if (probe) mid = probe(x);
  Tensor<T> work = x;
  auto quotient = [&](std::size_t i, T h, bool& kink) {
    const T orig = x[i];
    work[i] = orig + h;
    const T f_hi = detail::checked_eval(f, work);
    std::vector<T> hi;
    if (probe) hi = probe(work);
    work[i] = orig - h;
    const T f_lo = detail::checked_eval(f, work);
    std::vector<T> lo;
    if (probe) lo = probe(work);
    work[i] = orig;
    if (probe && detail::stencil_crosses_kink(lo, mid, hi)) kink = true;
    return (f_hi - f_lo) / (T{2} * h);
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    bool kink = false;
    const T wide = quotient(i, eps, kink);
    if (scheme == FdScheme::central) {
      out.grad[i] = wide;
    } else {
      const T narrow = quotient(i, eps / T{2}, kink);
      out.grad[i] = (T{4} * narrow - wide) / T{3};
    }
    if (kink) out.accepted[i] = false;
  }
  return out;
}

// Max elementwise |a - n| over accepted coordinates, divided by the larger of the
// two gradients' infinity norms. When both norms are below kGradientFloor the gradient is
// round-off and the absolute difference is returned instead.
inline constexpr double kGradientFloor = 1e-12;

template <typename T>
double max_relative_error(const Tensor<T>& analytic, const Tensor<T>& numeric,
                          const std::vector<bool>& accepted = {}) {
  require_same_shape(analytic, numeric, "max_relative_error");
  double err = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (!accepted.empty() && !accepted[i]) continue;
    const double a = analytic[i];
    const double n = numeric[i];
    err = std::max(err, std::abs(a - n));
    scale = std::max({scale, std::abs(a), std::abs(n)});
  }
  if (scale < kGradientFloor) return err;
  return err / scale;
}

}  // namespace stmn
