#include "stmn/stmm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stmn/random.hpp"

namespace stmn {

BnScope parse_bn_scope(std::string_view s) {
  if (s == "pooled") return BnScope::pooled;
  if (s == "per_channel") return BnScope::per_channel;
  throw ConfigError("unknown BN* scope '" + std::string(s) + "'");
}

std::string_view to_string(BnScope s) {
  return s == BnScope::pooled ? "pooled" : "per_channel";
}

CellKind parse_cell_kind(std::string_view s) {
  if (s == "stmm") return CellKind::stmm;
  if (s == "convgru") return CellKind::convgru;
  throw ConfigError("unknown cell kind '" + std::string(s) + "'");
}

std::string_view to_string(CellKind c) {
  return c == CellKind::stmm ? "stmm" : "convgru";
}

namespace {

// Number of statistic groups and the group of flat index i.
template <typename T>
std::size_t group_count(const Tensor<T>& x, BnScope scope) {
  return scope == BnScope::pooled ? 1 : x.dim(x.rank() - 1);
}

template <typename T>
std::size_t group_of(const Tensor<T>& x, BnScope scope, std::size_t i) {
  return scope == BnScope::pooled ? 0 : i % x.dim(x.rank() - 1);
}

template <typename T>
Tensor<T> sum_conv(const Patches<T>& a, const ConvParams<T>& ka, const Patches<T>& b,
                   const ConvParams<T>& kb) {
  Tensor<T> y = conv2d_patches(a, ka);
  accumulate(y, conv2d_patches(b, kb));
  return y;
}

template <typename T>
void check_step_inputs(const Tensor<T>& f, const Tensor<T>& m_prev, const StmmParams<T>& p,
                       const char* what) {
  require_rank(f, 3, what);
  require_rank(m_prev, 3, what);
  p.validate();
  if (f.height() != m_prev.height() || f.width() != m_prev.width()) {
    throw ShapeError(std::string(what) + ": feature " + shape_string(f.dims()) +
                     " and memory " + shape_string(m_prev.dims()) + " differ spatially");
  }
  if (f.channels() != p.feature_channels()) {
    throw ShapeError(std::string(what) + ": features have " + std::to_string(f.channels()) +
                     " channels, parameters expect " + std::to_string(p.feature_channels()));
  }
  if (m_prev.channels() != p.memory_channels()) {
    throw ShapeError(std::string(what) + ": memory has " + std::to_string(m_prev.channels()) +
                     " channels, parameters expect " + std::to_string(p.memory_channels()));
  }
}

template <typename T>
ConvParams<T> uniform_conv(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                           double amplitude, Rng& rng) {
  return ConvParams<T>(uniform_tensor<T>({kh, kw, cin, cout}, -amplitude, amplitude, rng));
}

}  // namespace

template <typename T>
BnStarResult<T> bn_star(const Tensor<T>& x, BnScope scope) {
  const std::size_t groups = group_count(x, scope);
  std::vector<double> mean(groups, 0.0);
  std::vector<double> sq(groups, 0.0);
  std::vector<std::size_t> n(groups, 0);
  std::vector<T> lo(groups, x[0]), hi(groups, x[0]);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < T{0}) throw ContractError("bn_star: input must be nonnegative");
    const std::size_t g = group_of(x, scope, i);
    mean[g] += static_cast<double>(x[i]);
    lo[g] = std::min(lo[g], x[i]);
    hi[g] = std::max(hi[g], x[i]);
    ++n[g];
  }
  for (std::size_t g = 0; g < groups; ++g) mean[g] /= static_cast<double>(n[g]);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t g = group_of(x, scope, i);
    const double d = static_cast<double>(x[i]) - mean[g];
    sq[g] += d * d;
  }

  BnStarResult<T> out;
  out.stats.mu.resize(groups);
  out.stats.sigma.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    // A constant group has exactly zero spread; summation rounding would say otherwise.
    if (lo[g] == hi[g]) {
      out.stats.mu[g] = lo[g];
      out.stats.sigma[g] = T{0};
      continue;
    }
    out.stats.mu[g] = static_cast<T>(mean[g]);
    out.stats.sigma[g] = static_cast<T>(std::sqrt(sq[g] / static_cast<double>(n[g])));
  }
  out.gate = Tensor<T>(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T thr = out.stats.threshold(group_of(x, scope, i));
    if (thr < static_cast<T>(kBnStarDegenerate)) continue;
    out.gate[i] = x[i] < thr ? x[i] / thr : T{1};
  }
  return out;
}

template <typename T>
Tensor<T> bn_star_backward(const Tensor<T>& x, const BnStarStats<T>& stats,
                           const Tensor<T>& grad_gate, BnScope scope) {
  require_same_shape(x, grad_gate, "bn_star_backward");
  const std::size_t groups = group_count(x, scope);
  if (stats.mu.size() != groups || stats.sigma.size() != groups) {
    throw UsageError("bn_star_backward: statistics do not match input scope");
  }
  std::vector<double> n(groups, 0.0);
  std::vector<double> coupling(groups, 0.0);  // sum_j g_j x_j / thr^2 over unclipped j
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t g = group_of(x, scope, i);
    n[g] += 1.0;
    const double thr = stats.threshold(g);
    if (thr < kBnStarDegenerate || !(x[i] < stats.threshold(g))) continue;
    coupling[g] += static_cast<double>(grad_gate[i]) * static_cast<double>(x[i]) / (thr * thr);
  }
  Tensor<T> gx(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t g = group_of(x, scope, i);
    const double thr = stats.threshold(g);
    if (thr < kBnStarDegenerate) continue;
    double v = 0.0;
    if (x[i] < stats.threshold(g)) v += static_cast<double>(grad_gate[i]) / thr;
    // d thr / d x_i = 1/n + K (x_i - mu) / (n sigma)
    double dthr = 1.0 / n[g];
    const double sigma = stats.sigma[g];
    if (sigma > 0.0) {
      dthr += static_cast<double>(stats.k) * (static_cast<double>(x[i]) - stats.mu[g]) / (n[g] * sigma);
    }
    v -= coupling[g] * dthr;
    gx[i] = static_cast<T>(v);
  }
  return gx;
}

template <typename T>
StmmParams<T> StmmParams<T>::zeros(std::size_t kh, std::size_t kw, std::size_t d_feat,
                                   std::size_t d_mem) {
  StmmParams<T> p;
  p.wz = p.wr = p.w = ConvParams<T>::zeros(kh, kw, d_feat, d_mem);
  p.uz = p.ur = p.u = ConvParams<T>::zeros(kh, kw, d_mem, d_mem);
  return p;
}

template <typename T>
void StmmParams<T>::validate() const {
  const std::size_t kh = w.kh();
  const std::size_t kw = w.kw();
  const std::size_t df = w.in_channels();
  const std::size_t dm = w.out_channels();
  auto check = [&](const char* name, const ConvParams<T>& c, std::size_t cin) {
    if (c.kernel.rank() != 4 || c.kh() != kh || c.kw() != kw || c.in_channels() != cin ||
        c.out_channels() != dm) {
      throw ShapeError(std::string("StmmParams: kernel ") + name + " has shape " +
                       shape_string(c.kernel.dims()));
    }
  };
  if (w.kernel.rank() != 4) throw ShapeError("StmmParams: kernel w is not rank 4");
  check("wz", wz, df);
  check("wr", wr, df);
  check("uz", uz, dm);
  check("ur", ur, dm);
  check("u", u, dm);
}

template <typename T>
StepCache<T> stmm_step_cached(const Tensor<T>& f, const Tensor<T>& m_prev, const StmmParams<T>& p,
                              BnScope scope) {
  check_step_inputs(f, m_prev, p, "stmm_step");
  StepCache<T> c;
  c.cell = CellKind::stmm;
  c.scope = scope;
  c.f = f;
  c.m_prev = m_prev;
  c.f_patches = im2col(f, p.w.kh(), p.w.kw());
  c.m_patches = im2col(m_prev, p.w.kh(), p.w.kw());

  c.a_z = sum_conv(c.f_patches, p.wz, c.m_patches, p.uz);
  c.p_z = relu(c.a_z);
  auto bz = bn_star(c.p_z, scope);
  c.z = std::move(bz.gate);
  c.stats_z = std::move(bz.stats);

  c.a_r = sum_conv(c.f_patches, p.wr, c.m_patches, p.ur);
  c.p_r = relu(c.a_r);
  auto br = bn_star(c.p_r, scope);
  c.r = std::move(br.gate);
  c.stats_r = std::move(br.stats);

  c.gated = mul(m_prev, c.r);
  c.g_patches = im2col(c.gated, p.u.kh(), p.u.kw());
  c.a_c = sum_conv(c.f_patches, p.w, c.g_patches, p.u);
  c.cand = relu(c.a_c);
  c.memory = blend(m_prev, c.cand, c.z);
  return c;
}

template <typename T>
Tensor<T> stmm_step(const Tensor<T>& f, const Tensor<T>& m_prev, const StmmParams<T>& p,
                    BnScope scope) {
  return stmm_step_cached(f, m_prev, p, scope).memory;
}

template <typename T>
StepCache<T> convgru_step_cached(const Tensor<T>& f, const Tensor<T>& m_prev,
                                 const StmmParams<T>& p) {
  check_step_inputs(f, m_prev, p, "convgru_step");
  StepCache<T> c;
  c.cell = CellKind::convgru;
  c.f = f;
  c.m_prev = m_prev;
  c.f_patches = im2col(f, p.w.kh(), p.w.kw());
  c.m_patches = im2col(m_prev, p.w.kh(), p.w.kw());
  c.a_z = sum_conv(c.f_patches, p.wz, c.m_patches, p.uz);
  c.z = sigmoid(c.a_z);
  c.a_r = sum_conv(c.f_patches, p.wr, c.m_patches, p.ur);
  c.r = sigmoid(c.a_r);
  c.gated = mul(m_prev, c.r);
  c.g_patches = im2col(c.gated, p.u.kh(), p.u.kw());
  c.a_c = sum_conv(c.f_patches, p.w, c.g_patches, p.u);
  c.cand = tanh(c.a_c);
  c.memory = blend(m_prev, c.cand, c.z);
  return c;
}

template <typename T>
Tensor<T> convgru_step(const Tensor<T>& f, const Tensor<T>& m_prev, const StmmParams<T>& p) {
  return convgru_step_cached(f, m_prev, p).memory;
}

template <typename T>
StepCache<T> cell_step_cached(CellKind cell, const Tensor<T>& f, const Tensor<T>& m_prev,
                              const StmmParams<T>& p, BnScope scope) {
  return cell == CellKind::stmm ? stmm_step_cached(f, m_prev, p, scope)
                                : convgru_step_cached(f, m_prev, p);
}

template <typename T>
StepGrads<T> cell_step_backward(const StepCache<T>& c, const StmmParams<T>& p,
                                const Tensor<T>& grad_memory, bool want_feature_grad) {
  if (!c.valid()) throw UsageError("step backward: forward cache is missing");
  require_same_shape(c.memory, grad_memory, "step backward");
  const bool stmm = c.cell == CellKind::stmm;

  StepGrads<T> g;
  g.grad_params = StmmParams<T>::zeros(p.w.kh(), p.w.kw(), p.feature_channels(),
                                       p.memory_channels());
  auto blend_g = blend_backward(c.m_prev, c.cand, c.z, grad_memory);
  Tensor<T> grad_prev = std::move(blend_g.grad_prev);

  std::vector<T> grad_fp;
  if (want_feature_grad) grad_fp.assign(c.f_patches.rows() * c.f_patches.cols(), T{0});
  std::vector<T> grad_mp(c.m_patches.rows() * c.m_patches.cols(), T{0});

  // Candidate path.
  const Tensor<T> g_ac = stmm ? relu_backward(c.a_c, blend_g.grad_cand)
                              : tanh_backward(c.cand, blend_g.grad_cand);
  accumulate_kernel_grad(c.f_patches, g_ac, g.grad_params.w.kernel);
  accumulate_kernel_grad(c.g_patches, g_ac, g.grad_params.u.kernel);
  if (want_feature_grad) accumulate_patch_grad(g_ac, p.w, grad_fp);
  std::vector<T> grad_gp(c.g_patches.rows() * c.g_patches.cols(), T{0});
  accumulate_patch_grad(g_ac, p.u, grad_gp);
  const Tensor<T> g_gated = col2im(grad_gp, c.gated.height(), c.gated.width(), p.u.kh(),
                                   p.u.kw(), c.gated.channels());
  auto [g_prev_from_gate, g_r] = mul_backward(c.m_prev, c.r, g_gated);
  accumulate(grad_prev, g_prev_from_gate);

  // Gate paths.
  auto gate_backward = [&](const Tensor<T>& a, const Tensor<T>& pre, const Tensor<T>& gate,
                           const BnStarStats<T>& stats, const Tensor<T>& g_gate,
                           const ConvParams<T>& wk, const ConvParams<T>& uk,
                           ConvParams<T>& gw, ConvParams<T>& gu) {
    Tensor<T> g_a = stmm ? relu_backward(a, bn_star_backward(pre, stats, g_gate, c.scope))
                         : sigmoid_backward(gate, g_gate);
    accumulate_kernel_grad(c.f_patches, g_a, gw.kernel);
    accumulate_kernel_grad(c.m_patches, g_a, gu.kernel);
    if (want_feature_grad) accumulate_patch_grad(g_a, wk, grad_fp);
    accumulate_patch_grad(g_a, uk, grad_mp);
  };
  gate_backward(c.a_r, c.p_r, c.r, c.stats_r, g_r, p.wr, p.ur, g.grad_params.wr, g.grad_params.ur);
  gate_backward(c.a_z, c.p_z, c.z, c.stats_z, blend_g.grad_z, p.wz, p.uz, g.grad_params.wz,
                g.grad_params.uz);

  accumulate(grad_prev, col2im(grad_mp, c.m_prev.height(), c.m_prev.width(), p.w.kh(), p.w.kw(),
                               c.m_prev.channels()));
  g.grad_m_prev = std::move(grad_prev);
  if (want_feature_grad) {
    g.grad_f = col2im(grad_fp, c.f.height(), c.f.width(), p.w.kh(), p.w.kw(), c.f.channels());
  }
  return g;
}

template <typename T>
StepGrads<T> stmm_step_backward(const StepCache<T>& cache, const StmmParams<T>& p,
                                const Tensor<T>& grad_memory, bool want_feature_grad) {
  if (cache.valid() && cache.cell != CellKind::stmm) {
    throw UsageError("stmm_step_backward: cache was produced by a different cell");
  }
  return cell_step_backward(cache, p, grad_memory, want_feature_grad);
}

template <typename T>
StmmParams<T> transfer_weights(const ConvParams<T>& static_conv, std::size_t d_mem,
                               std::uint64_t seed) {
  if (static_conv.kernel.rank() != 4) throw ConfigError("transfer_weights: kernel is not rank 4");
  if (static_conv.out_channels() != d_mem) {
    throw ConfigError("transfer_weights: static conv produces " +
                      std::to_string(static_conv.out_channels()) +
                      " channels but the memory is configured for " + std::to_string(d_mem));
  }
  const double rms = std::sqrt(static_cast<double>(sum_of_squares(static_conv.kernel)) /
                               static_cast<double>(static_conv.kernel.size()));
  const double amplitude = 0.1 * std::sqrt(3.0) * rms;
  Rng rng(seed);
  StmmParams<T> p;
  p.wz = p.wr = p.w = static_conv;
  const std::size_t kh = static_conv.kh();
  const std::size_t kw = static_conv.kw();
  p.uz = uniform_conv<T>(kh, kw, d_mem, d_mem, amplitude, rng);
  p.ur = uniform_conv<T>(kh, kw, d_mem, d_mem, amplitude, rng);
  p.u = uniform_conv<T>(kh, kw, d_mem, d_mem, amplitude, rng);
  return p;
}

template <typename T>
StmmParams<T> random_stmm_params(std::size_t kh, std::size_t kw, std::size_t d_feat,
                                 std::size_t d_mem, std::uint64_t seed) {
  Rng rng(seed);
  auto glorot = [&](std::size_t cin) {
    const double a = std::sqrt(6.0 / static_cast<double>(kh * kw * (cin + d_mem)));
    return uniform_conv<T>(kh, kw, cin, d_mem, a, rng);
  };
  StmmParams<T> p;
  p.wz = glorot(d_feat);
  p.uz = glorot(d_mem);
  p.wr = glorot(d_feat);
  p.ur = glorot(d_mem);
  p.w = glorot(d_feat);
  p.u = glorot(d_mem);
  return p;
}

#define STMN_INSTANTIATE_STMM(T)                                                                  \
  template struct StmmParams<T>;                                                                  \
  template BnStarResult<T> bn_star(const Tensor<T>&, BnScope);                                    \
  template Tensor<T> bn_star_backward(const Tensor<T>&, const BnStarStats<T>&, const Tensor<T>&,  \
                                      BnScope);                                                   \
  template StepCache<T> stmm_step_cached(const Tensor<T>&, const Tensor<T>&,                      \
                                         const StmmParams<T>&, BnScope);                          \
  template Tensor<T> stmm_step(const Tensor<T>&, const Tensor<T>&, const StmmParams<T>&, BnScope); \
  template StepCache<T> convgru_step_cached(const Tensor<T>&, const Tensor<T>&,                   \
                                            const StmmParams<T>&);                                \
  template Tensor<T> convgru_step(const Tensor<T>&, const Tensor<T>&, const StmmParams<T>&);      \
  template StepCache<T> cell_step_cached(CellKind, const Tensor<T>&, const Tensor<T>&,            \
                                         const StmmParams<T>&, BnScope);                          \
  template StepGrads<T> cell_step_backward(const StepCache<T>&, const StmmParams<T>&,             \
                                           const Tensor<T>&, bool);                               \
  template StepGrads<T> stmm_step_backward(const StepCache<T>&, const StmmParams<T>&,             \
                                           const Tensor<T>&, bool);                               \
  template StmmParams<T> transfer_weights(const ConvParams<T>&, std::size_t, std::uint64_t);      \
  template StmmParams<T> random_stmm_params(std::size_t, std::size_t, std::size_t, std::size_t,   \
                                            std::uint64_t);

STMN_INSTANTIATE_STMM(float)
STMN_INSTANTIATE_STMM(double)

#undef STMN_INSTANTIATE_STMM

}  // namespace stmn
