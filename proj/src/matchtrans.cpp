#include "stmn/matchtrans.hpp"

#include <algorithm>
#include <string>

namespace stmn {

namespace {

template <typename T>
void check_nonnegative(const Tensor<T>& x, const char* what) {
  for (T v : x.values()) {
    if (v < T{0}) throw ContractError(std::string(what) + ": features must be nonnegative");
  }
}

template <typename T>
void check_field(const TransformField<T>& field, std::size_t h, std::size_t w, const char* what) {
  if (field.gamma.empty()) throw UsageError(std::string(what) + ": transform field is missing");
  if (field.height() != h || field.width() != w) {
    throw ShapeError(std::string(what) + ": transform field is " +
                     shape_string(field.gamma.dims()) + ", map is " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  if (field.valid_mask.size() != h * w || field.degenerate.size() != h * w ||
      field.denominator.size() != h * w) {
    throw UsageError(std::string(what) + ": transform field is incomplete");
  }
}

}  // namespace

template <typename T>
std::size_t TransformField<T>::degenerate_count() const {
  return static_cast<std::size_t>(std::count(degenerate.begin(), degenerate.end(), 1));
}

template <typename T>
TransformField<T> compute_gamma(const Tensor<T>& f_cur, const Tensor<T>& f_prev, std::size_t k) {
  if (k < 1 || k > kMaxMatchRadius) {
    throw ConfigError("compute_gamma: radius k must be in [1, " + std::to_string(kMaxMatchRadius) +
                      "], got " + std::to_string(k));
  }
  require_rank(f_cur, 3, "compute_gamma");
  require_same_shape(f_cur, f_prev, "compute_gamma");
  check_nonnegative(f_cur, "compute_gamma");
  check_nonnegative(f_prev, "compute_gamma");

  const std::size_t H = f_cur.height();
  const std::size_t W = f_cur.width();
  const std::size_t D = f_cur.channels();
  const auto kk = static_cast<std::ptrdiff_t>(k);
  const std::size_t win = 2 * k + 1;

  TransformField<T> field;
  field.k = k;
  field.gamma = Tensor<T>({H, W, win * win});
  field.valid_mask.assign(H * W, 0);
  field.degenerate.assign(H * W, 0);
  field.denominator.assign(H * W, T{0});

  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t w = 0; w < W; ++w) {
      const std::size_t loc = h * W + w;
      const T* fc = f_cur.raw() + loc * D;
      T* g = field.gamma.raw() + loc * win * win;
      std::uint64_t mask = 0;
      std::size_t n_valid = 0;
      T total{0};
      for (std::ptrdiff_t di = -kk; di <= kk; ++di) {
        const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h) + di;
        if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::ptrdiff_t dj = -kk; dj <= kk; ++dj) {
          const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(w) + dj;
          if (sw < 0 || sw >= static_cast<std::ptrdiff_t>(W)) continue;
          const std::size_t o = static_cast<std::size_t>((di + kk) * static_cast<std::ptrdiff_t>(win) + dj + kk);
          const T* fp = f_prev.raw() + (static_cast<std::size_t>(sh) * W + static_cast<std::size_t>(sw)) * D;
          T dot{0};
          for (std::size_t d = 0; d < D; ++d) dot += fc[d] * fp[d];
          g[o] = dot;
          total += dot;
          mask |= std::uint64_t{1} << o;
          ++n_valid;
        }
      }
      field.valid_mask[loc] = mask;
      if (total < static_cast<T>(kGammaDegenerateThreshold)) {
        field.degenerate[loc] = 1;
        const T u = T{1} / static_cast<T>(n_valid);
        for (std::size_t o = 0; o < win * win; ++o) g[o] = (mask >> o) & 1u ? u : T{0};
      } else {
        field.denominator[loc] = total;
        for (std::size_t o = 0; o < win * win; ++o) g[o] /= total;
      }
    }
  }
  return field;
}

template <typename T>
Tensor<T> align_memory(const Tensor<T>& m_prev, const TransformField<T>& field) {
  require_rank(m_prev, 3, "align_memory");
  const std::size_t H = m_prev.height();
  const std::size_t W = m_prev.width();
  const std::size_t D = m_prev.channels();
  check_field(field, H, W, "align_memory");
  const auto kk = static_cast<std::ptrdiff_t>(field.k);
  const std::size_t win = field.window();

  Tensor<T> out({H, W, D});
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t w = 0; w < W; ++w) {
      const std::size_t loc = h * W + w;
      const T* g = field.gamma.raw() + loc * win * win;
      const std::uint64_t mask = field.valid_mask[loc];
      T* dst = out.raw() + loc * D;
      for (std::ptrdiff_t di = -kk; di <= kk; ++di) {
        for (std::ptrdiff_t dj = -kk; dj <= kk; ++dj) {
          const std::size_t o = static_cast<std::size_t>((di + kk) * static_cast<std::ptrdiff_t>(win) + dj + kk);
          if (!((mask >> o) & 1u)) continue;
          const T coef = g[o];
          if (coef == T{0}) continue;
          const std::size_t src_loc = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(h) + di) * W +
                                      static_cast<std::size_t>(static_cast<std::ptrdiff_t>(w) + dj);
          const T* src = m_prev.raw() + src_loc * D;
          for (std::size_t d = 0; d < D; ++d) dst[d] += coef * src[d];
        }
      }
    }
  }
  return out;
}

template <typename T>
MatchTransGrads<T> matchtrans_backward(const Tensor<T>& f_cur, const Tensor<T>& f_prev,
                                       const Tensor<T>& m_prev, const TransformField<T>& field,
                                       const Tensor<T>& grad_aligned, bool stop_gamma_grad,
                                       bool want_feature_grad) {
  require_rank(m_prev, 3, "matchtrans_backward");
  require_same_shape(m_prev, grad_aligned, "matchtrans_backward");
  require_same_shape(f_cur, f_prev, "matchtrans_backward");
  const std::size_t H = m_prev.height();
  const std::size_t W = m_prev.width();
  const std::size_t D = m_prev.channels();
  const std::size_t Df = f_cur.channels();
  if (f_cur.height() != H || f_cur.width() != W) {
    throw ShapeError("matchtrans_backward: feature and memory spatial dims differ");
  }
  check_field(field, H, W, "matchtrans_backward");

  const auto kk = static_cast<std::ptrdiff_t>(field.k);
  const std::size_t win = field.window();
  const std::size_t n_off = win * win;

  MatchTransGrads<T> grads;
  grads.grad_m_prev = Tensor<T>(m_prev.dims());
  if (want_feature_grad) {
    grads.grad_f_cur = Tensor<T>(f_cur.dims());
    grads.grad_f_prev = Tensor<T>(f_prev.dims());
  }
  const bool through_gamma = want_feature_grad && !stop_gamma_grad;

  std::vector<T> g_gamma(n_off);
  std::vector<std::size_t> src_of(n_off);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t w = 0; w < W; ++w) {
      const std::size_t loc = h * W + w;
      const T* g = field.gamma.raw() + loc * n_off;
      const std::uint64_t mask = field.valid_mask[loc];
      const T* gy = grad_aligned.raw() + loc * D;
      std::fill(g_gamma.begin(), g_gamma.end(), T{0});
      for (std::ptrdiff_t di = -kk; di <= kk; ++di) {
        for (std::ptrdiff_t dj = -kk; dj <= kk; ++dj) {
          const std::size_t o = static_cast<std::size_t>((di + kk) * static_cast<std::ptrdiff_t>(win) + dj + kk);
          if (!((mask >> o) & 1u)) continue;
          const std::size_t src_loc = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(h) + di) * W +
                                      static_cast<std::size_t>(static_cast<std::ptrdiff_t>(w) + dj);
          src_of[o] = src_loc;
          const T* m = m_prev.raw() + src_loc * D;
          T* gm = grads.grad_m_prev.raw() + src_loc * D;
          T acc{0};
          for (std::size_t d = 0; d < D; ++d) {
            acc += gy[d] * m[d];
            gm[d] += g[o] * gy[d];
          }
          g_gamma[o] = acc;
        }
      }
      if (!through_gamma || field.degenerate[loc]) continue;

      // Quotient rule for gamma_o = dot_o / sum_o' dot_o'.
      T weighted{0};
      for (std::size_t o = 0; o < n_off; ++o) {
        if ((mask >> o) & 1u) weighted += g_gamma[o] * g[o];
      }
      const T inv = T{1} / field.denominator[loc];
      const T* fc = f_cur.raw() + loc * Df;
      T* gfc = grads.grad_f_cur.raw() + loc * Df;
      for (std::size_t o = 0; o < n_off; ++o) {
        if (!((mask >> o) & 1u)) continue;
        const T g_dot = (g_gamma[o] - weighted) * inv;
        if (g_dot == T{0}) continue;
        const T* fp = f_prev.raw() + src_of[o] * Df;
        T* gfp = grads.grad_f_prev.raw() + src_of[o] * Df;
        for (std::size_t d = 0; d < Df; ++d) {
          gfc[d] += g_dot * fp[d];
          gfp[d] += g_dot * fc[d];
        }
      }
    }
  }
  return grads;
}

template struct TransformField<float>;
template struct TransformField<double>;
template TransformField<float> compute_gamma(const Tensor<float>&, const Tensor<float>&, std::size_t);
template TransformField<double> compute_gamma(const Tensor<double>&, const Tensor<double>&, std::size_t);
template Tensor<float> align_memory(const Tensor<float>&, const TransformField<float>&);
template Tensor<double> align_memory(const Tensor<double>&, const TransformField<double>&);
template MatchTransGrads<float> matchtrans_backward(const Tensor<float>&, const Tensor<float>&,
                                                    const Tensor<float>&, const TransformField<float>&,
                                                    const Tensor<float>&, bool, bool);
template MatchTransGrads<double> matchtrans_backward(const Tensor<double>&, const Tensor<double>&,
                                                     const Tensor<double>&, const TransformField<double>&,
                                                     const Tensor<double>&, bool, bool);

}  // namespace stmn
