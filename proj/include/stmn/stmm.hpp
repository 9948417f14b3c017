#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "stmn/ops.hpp"
#include "stmn/tensor.hpp"

namespace stmn {

inline constexpr double kBnStarK = 3.0;
inline constexpr double kBnStarDegenerate = 1e-12;

// Which elements share one (mu, sigma) pair in BN*.
enum class BnScope { pooled, per_channel };

BnScope parse_bn_scope(std::string_view s);
std::string_view to_string(BnScope s);

template <typename T>
struct BnStarStats {
  // One entry for pooled scope, one per channel otherwise.
  std::vector<T> mu;
  std::vector<T> sigma;
  T k = static_cast<T>(kBnStarK);

  T threshold(std::size_t group) const { return mu[group] + k * sigma[group]; }
};

template <typename T>
struct BnStarResult {
  Tensor<T> gate;  // every value in [0, 1]
  BnStarStats<T> stats;
};

// Squashes nonnegative x to [0, 1] as min(x / (mu + K sigma), 1), statistics taken over
// the current input only. A threshold below 1e-12 yields all zeros.
template <typename T>
BnStarResult<T> bn_star(const Tensor<T>& x, BnScope scope = BnScope::pooled);

// Gradient flows through mu and sigma for unclipped outputs; clipped and degenerate
// outputs pass no gradient.
template <typename T>
Tensor<T> bn_star_backward(const Tensor<T>& x, const BnStarStats<T>& stats,
                           const Tensor<T>& grad_gate, BnScope scope = BnScope::pooled);

// The six recurrent kernels. W* read the D_feat input features, U* read the D_mem memory;
// all produce D_mem channels and share one spatial size.
template <typename T>
struct StmmParams {
  ConvParams<T> wz, uz, wr, ur, w, u;

  static StmmParams zeros(std::size_t kh, std::size_t kw, std::size_t d_feat, std::size_t d_mem);

  std::size_t feature_channels() const { return w.in_channels(); }
  std::size_t memory_channels() const { return w.out_channels(); }

  void validate() const;

  template <typename F>
  void for_each(F&& f) {
    f("wz", wz); f("uz", uz); f("wr", wr); f("ur", ur); f("w", w); f("u", u);
  }
  template <typename F>
  void for_each(F&& f) const {
    f("wz", wz); f("uz", uz); f("wr", wr); f("ur", ur); f("w", w); f("u", u);
  }

  template <typename U>
  StmmParams<U> cast() const {
    StmmParams<U> out;
    out.wz = ConvParams<U>(wz.kernel.template cast<U>());
    out.uz = ConvParams<U>(uz.kernel.template cast<U>());
    out.wr = ConvParams<U>(wr.kernel.template cast<U>());
    out.ur = ConvParams<U>(ur.kernel.template cast<U>());
    out.w = ConvParams<U>(w.kernel.template cast<U>());
    out.u = ConvParams<U>(u.kernel.template cast<U>());
    return out;
  }

  bool operator==(const StmmParams&) const = default;
};

// Recurrent cell variants sharing the kernel layout of StmmParams.
enum class CellKind { stmm, convgru };

CellKind parse_cell_kind(std::string_view s);
std::string_view to_string(CellKind c);

// Forward intermediates of one recurrent step, consumed by the backward pass.
template <typename T>
struct StepCache {
  CellKind cell = CellKind::stmm;
  BnScope scope = BnScope::pooled;
  Tensor<T> f;       // input features
  Tensor<T> m_prev;  // (aligned) previous memory
  Patches<T> f_patches;
  Patches<T> m_patches;
  Patches<T> g_patches;  // patches of m_prev * r
  Tensor<T> a_z, a_r, a_c;  // gate / candidate pre-activations
  Tensor<T> p_z, p_r;       // ReLU(a_z), ReLU(a_r); STMM only
  BnStarStats<T> stats_z, stats_r;
  Tensor<T> z, r, gated, cand;
  Tensor<T> memory;  // M_t

  bool valid() const { return !memory.empty(); }
};

template <typename T>
struct StepGrads {
  Tensor<T> grad_f;  // empty when feature gradients were not requested
  Tensor<T> grad_m_prev;
  StmmParams<T> grad_params;
};

// z = BN*(ReLU(Wz*F + Uz*M)), r = BN*(ReLU(Wr*F + Ur*M)),
// M~ = ReLU(W*F + U*(M . r)), M_t = (1 - z) . M + z . M~
template <typename T>
StepCache<T> stmm_step_cached(const Tensor<T>& f, const Tensor<T>& m_prev, const StmmParams<T>& p,
                              BnScope scope = BnScope::pooled);

template <typename T>
Tensor<T> stmm_step(const Tensor<T>& f, const Tensor<T>& m_prev, const StmmParams<T>& p,
                    BnScope scope = BnScope::pooled);

// Baseline ConvGRU: sigmoid gates, tanh candidate, same blend as the STMM.
template <typename T>
StepCache<T> convgru_step_cached(const Tensor<T>& f, const Tensor<T>& m_prev,
                                 const StmmParams<T>& p);

template <typename T>
Tensor<T> convgru_step(const Tensor<T>& f, const Tensor<T>& m_prev, const StmmParams<T>& p);

template <typename T>
StepCache<T> cell_step_cached(CellKind cell, const Tensor<T>& f, const Tensor<T>& m_prev,
                              const StmmParams<T>& p, BnScope scope = BnScope::pooled);

// Backward for either cell kind; dispatches on cache.cell.
template <typename T>
StepGrads<T> cell_step_backward(const StepCache<T>& cache, const StmmParams<T>& p,
                                const Tensor<T>& grad_memory, bool want_feature_grad = true);

template <typename T>
StepGrads<T> stmm_step_backward(const StepCache<T>& cache, const StmmParams<T>& p,
                                const Tensor<T>& grad_memory, bool want_feature_grad = true);

// Copies a trained static conv (D_feat -> d_mem) into W, Wz and Wr. The U kernels are
// centered uniform with RMS 0.1x that of the static kernel.
template <typename T>
StmmParams<T> transfer_weights(const ConvParams<T>& static_conv, std::size_t d_mem,
                               std::uint64_t seed);

// Fresh Glorot-uniform initialization of all six kernels.
template <typename T>
StmmParams<T> random_stmm_params(std::size_t kh, std::size_t kw, std::size_t d_feat,
                                 std::size_t d_mem, std::uint64_t seed);

}  // namespace stmn
