#include "stmn/bidirectional.hpp"

namespace stmn {

namespace {

template <typename T>
void add_params(StmmParams<T>& dst, const StmmParams<T>& src) {
  accumulate(dst.wz.kernel, src.wz.kernel);
  accumulate(dst.uz.kernel, src.uz.kernel);
  accumulate(dst.wr.kernel, src.wr.kernel);
  accumulate(dst.ur.kernel, src.ur.kernel);
  accumulate(dst.w.kernel, src.w.kernel);
  accumulate(dst.u.kernel, src.u.kernel);
}

template <typename T>
void direction_backward(const std::vector<Tensor<T>>& features, const DirectionCache<T>& dc,
                        const StmmParams<T>& p, const RecurrenceOptions& opts,
                        const std::vector<Tensor<T>>& grad_memory, bool want_feature_grad,
                        StmmParams<T>& grad_params, std::vector<Tensor<T>>& grad_features) {
  const std::size_t steps = dc.steps.size();
  Tensor<T> carry;
  for (std::size_t s = steps; s-- > 0;) {
    const std::size_t t = dc.order[s];
    Tensor<T> g = grad_memory[t];
    if (!carry.empty()) accumulate(g, carry);
    StepGrads<T> sg = cell_step_backward(dc.steps[s], p, g, want_feature_grad);
    add_params(grad_params, sg.grad_params);
    if (want_feature_grad) accumulate(grad_features[t], sg.grad_f);
    if (s == 0) break;
    const std::size_t prev = dc.order[s - 1];
    if (opts.align) {
      auto mg = matchtrans_backward(features[t], features[prev], dc.unaligned_prev[s], dc.fields[s],
                                    sg.grad_m_prev, opts.stop_gamma_grad, want_feature_grad);
      carry = std::move(mg.grad_m_prev);
      if (want_feature_grad) {
        accumulate(grad_features[t], mg.grad_f_cur);
        accumulate(grad_features[prev], mg.grad_f_prev);
      }
    } else {
      carry = std::move(sg.grad_m_prev);
    }
  }
}

}  // namespace

template <typename T>
DirectionCache<T> run_direction_cached(const std::vector<Tensor<T>>& features,
                                       const StmmParams<T>& p, const RecurrenceOptions& opts,
                                       bool reverse) {
  if (features.empty()) throw UsageError("run_bidirectional: empty sequence");
  require_rank(features.front(), 3, "run_bidirectional");
  const std::size_t n = features.size();
  DirectionCache<T> dc;
  dc.order.resize(n);
  dc.steps.reserve(n);
  dc.fields.resize(n);
  dc.unaligned_prev.resize(n);
  Tensor<T> memory({features.front().height(), features.front().width(), p.memory_channels()});
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t t = reverse ? n - 1 - s : s;
    dc.order[s] = t;
    Tensor<T> m_in = memory;
    if (s > 0 && opts.align) {
      const std::size_t prev = dc.order[s - 1];
      dc.fields[s] = compute_gamma(features[t], features[prev], opts.radius);
      m_in = align_memory(memory, dc.fields[s]);
    }
    dc.unaligned_prev[s] = std::move(memory);
    dc.steps.push_back(cell_step_cached(opts.cell, features[t], m_in, p, opts.scope));
    memory = dc.steps.back().memory;
  }
  return dc;
}

template <typename T>
BidirectionalCache<T> run_bidirectional_cached(const std::vector<Tensor<T>>& features,
                                               const StmmParams<T>& p_fwd,
                                               const StmmParams<T>& p_bwd,
                                               const RecurrenceOptions& opts) {
  BidirectionalCache<T> c;
  c.forward = run_direction_cached(features, p_fwd, opts, false);
  c.backward = run_direction_cached(features, p_bwd, opts, true);
  const std::size_t n = features.size();
  c.outputs.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    c.outputs[t] = concat_channels(c.forward.steps[t].memory, c.backward.steps[n - 1 - t].memory);
  }
  return c;
}

template <typename T>
std::vector<Tensor<T>> run_bidirectional(const std::vector<Tensor<T>>& features,
                                         const StmmParams<T>& p_fwd, const StmmParams<T>& p_bwd,
                                         const RecurrenceOptions& opts) {
  return run_bidirectional_cached(features, p_fwd, p_bwd, opts).outputs;
}

template <typename T>
BidirectionalGrads<T> run_bidirectional_backward(const std::vector<Tensor<T>>& features,
                                                 const BidirectionalCache<T>& cache,
                                                 const StmmParams<T>& p_fwd,
                                                 const StmmParams<T>& p_bwd,
                                                 const RecurrenceOptions& opts,
                                                 const std::vector<Tensor<T>>& grad_outputs,
                                                 bool want_feature_grad) {
  const std::size_t n = features.size();
  if (cache.outputs.size() != n || cache.forward.steps.size() != n ||
      cache.backward.steps.size() != n) {
    throw UsageError("run_bidirectional_backward: cache does not match the sequence");
  }
  if (grad_outputs.size() != n) {
    throw ShapeError("run_bidirectional_backward: need one gradient per frame");
  }
  const std::size_t dm = p_fwd.memory_channels();
  std::vector<Tensor<T>> g_fwd(n), g_bwd(n);
  for (std::size_t t = 0; t < n; ++t) {
    require_same_shape(cache.outputs[t], grad_outputs[t], "run_bidirectional_backward");
    auto [a, b] = concat_channels_backward(grad_outputs[t], dm);
    g_fwd[t] = std::move(a);
    g_bwd[t] = std::move(b);
  }

  BidirectionalGrads<T> g;
  const std::size_t kh = p_fwd.w.kh();
  const std::size_t kw = p_fwd.w.kw();
  g.grad_forward = StmmParams<T>::zeros(kh, kw, p_fwd.feature_channels(), dm);
  g.grad_backward = StmmParams<T>::zeros(p_bwd.w.kh(), p_bwd.w.kw(), p_bwd.feature_channels(),
                                         p_bwd.memory_channels());
  if (want_feature_grad) {
    g.grad_features.reserve(n);
    for (const auto& f : features) g.grad_features.emplace_back(f.dims());
  }
  direction_backward(features, cache.forward, p_fwd, opts, g_fwd, want_feature_grad,
                     g.grad_forward, g.grad_features);
  direction_backward(features, cache.backward, p_bwd, opts, g_bwd, want_feature_grad,
                     g.grad_backward, g.grad_features);
  return g;
}

#define STMN_INSTANTIATE_BIDIR(T)                                                             \
  template std::vector<Tensor<T>> run_bidirectional(const std::vector<Tensor<T>>&,           \
                                                    const StmmParams<T>&, const StmmParams<T>&, \
                                                    const RecurrenceOptions&);               \
  template BidirectionalCache<T> run_bidirectional_cached(                                    \
      const std::vector<Tensor<T>>&, const StmmParams<T>&, const StmmParams<T>&,              \
      const RecurrenceOptions&);                                                              \
  template DirectionCache<T> run_direction_cached(const std::vector<Tensor<T>>&,             \
                                                  const StmmParams<T>&,                      \
                                                  const RecurrenceOptions&, bool);           \
  template BidirectionalGrads<T> run_bidirectional_backward(                                  \
      const std::vector<Tensor<T>>&, const BidirectionalCache<T>&, const StmmParams<T>&,      \
      const StmmParams<T>&, const RecurrenceOptions&, const std::vector<Tensor<T>>&, bool);

STMN_INSTANTIATE_BIDIR(float)
STMN_INSTANTIATE_BIDIR(double)

#undef STMN_INSTANTIATE_BIDIR

}  // namespace stmn
