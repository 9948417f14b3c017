#pragma once

#include <cstddef>
#include <vector>

#include "stmn/matchtrans.hpp"
#include "stmn/stmm.hpp"

namespace stmn {

struct RecurrenceOptions {
  CellKind cell = CellKind::stmm;
  BnScope scope = BnScope::pooled;
  bool align = true;           // MatchTrans before every step after the first
  std::size_t radius = 2;      // MatchTrans k
  bool stop_gamma_grad = false;
};

template <typename T>
struct DirectionCache {
  std::vector<std::size_t> order;          // frame index processed at each step
  std::vector<StepCache<T>> steps;
  std::vector<TransformField<T>> fields;   // fields[s] aligns into step s; empty at s == 0
  std::vector<Tensor<T>> unaligned_prev;   // memory before alignment, per step
};

template <typename T>
struct BidirectionalCache {
  DirectionCache<T> forward;
  DirectionCache<T> backward;
  std::vector<Tensor<T>> outputs;  // concat(M_fwd_t, M_bwd_t) per frame
};

template <typename T>
struct BidirectionalGrads {
  std::vector<Tensor<T>> grad_features;  // empty unless requested
  StmmParams<T> grad_forward;
  StmmParams<T> grad_backward;
};

// Runs one cell over the sequence in each direction from zero memory and concatenates
// the two memories per frame: output[t] has 2 * D_mem channels.
template <typename T>
std::vector<Tensor<T>> run_bidirectional(const std::vector<Tensor<T>>& features,
                                         const StmmParams<T>& p_fwd, const StmmParams<T>& p_bwd,
                                         const RecurrenceOptions& opts);

template <typename T>
BidirectionalCache<T> run_bidirectional_cached(const std::vector<Tensor<T>>& features,
                                               const StmmParams<T>& p_fwd,
                                               const StmmParams<T>& p_bwd,
                                               const RecurrenceOptions& opts);

// One direction only; `reverse` processes frames T..1.
template <typename T>
DirectionCache<T> run_direction_cached(const std::vector<Tensor<T>>& features,
                                       const StmmParams<T>& p, const RecurrenceOptions& opts,
                                       bool reverse);

// Full backpropagation through time over the window.
template <typename T>
BidirectionalGrads<T> run_bidirectional_backward(const std::vector<Tensor<T>>& features,
                                                 const BidirectionalCache<T>& cache,
                                                 const StmmParams<T>& p_fwd,
                                                 const StmmParams<T>& p_bwd,
                                                 const RecurrenceOptions& opts,
                                                 const std::vector<Tensor<T>>& grad_outputs,
                                                 bool want_feature_grad = true);

}  // namespace stmn
