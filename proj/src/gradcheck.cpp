#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "stmn/bidirectional.hpp"
#include "stmn/errors.hpp"
#include "stmn/finite_diff.hpp"
#include "stmn/harness.hpp"
#include "stmn/matchtrans.hpp"
#include "stmn/ops.hpp"
#include "stmn/random.hpp"
#include "stmn/stmm.hpp"

namespace stmn {
namespace {

using Td = Tensor<double>;
constexpr double kEps = 1e-3;

double dot(const Td& y, const Td& c) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * c[i];
  return acc;
}

Td uniform(Shape dims, Rng& rng, double lo, double hi) { return uniform_tensor<double>(std::move(dims), lo, hi, rng); }

// Values in [-1, -0.1] U [0.1, 1], keeping elementwise kinks out of reach of the stencil.
Td signed_away(Shape dims, Rng& rng) {
  Td t = uniform(std::move(dims), rng, 0.1, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (auto& v : t.values())
    if (flip(rng)) v = -v;
  return t;
}

void append(std::vector<double>& out, const Td& t) { out.insert(out.end(), t.values().begin(), t.values().end()); }

void step_kinks(const StepCache<double>& c, std::vector<double>& out) {
  append(out, c.a_c);
  if (c.cell != CellKind::stmm) return;
  append(out, c.a_z);
  append(out, c.a_r);
  const std::size_t ch = c.p_z.channels();
  for (std::size_t i = 0; i < c.p_z.size(); ++i) {
    const std::size_t g = c.scope == BnScope::pooled ? 0 : i % ch;
    out.push_back(c.stats_z.threshold(g) - c.p_z[i]);
    out.push_back(c.stats_r.threshold(g) - c.p_r[i]);
  }
}

class Checker {
 public:
  Checker(std::string op, double tol) { e_.op = std::move(op); tol_ = tol; }

  // Compares `analytic` against finite differences of `loss` w.r.t. `x`, which both closures read.
  void input(Td& x, const Td& analytic, const std::function<double()>& loss,
             const std::function<std::vector<double>()>& kinks = {}) {
    const Td orig = x;
    KinkProbe<double> probe;
    if (kinks) probe = [&](const Td& t) { x = t; auto v = kinks(); x = orig; return v; };
    const auto fd = finite_diff<double>([&](const Td& t) { x = t; const double v = loss(); x = orig; return v; }, orig,
                                        kEps, probe, FdScheme::richardson);
    e_.max_rel_error = std::max(e_.max_rel_error, max_relative_error(analytic, fd.grad, fd.accepted));
    e_.accepted += fd.accepted_count();
    e_.total += x.size();
  }

  GradcheckEntry done() {
    e_.pass = e_.accepted > 0 && e_.max_rel_error < tol_;
    return e_;
  }

 private:
  GradcheckEntry e_;
  double tol_ = 0.0;
};

GradcheckEntry check_conv(Rng& rng, double tol) {
  Checker ck("conv2d", tol);
  Td x = uniform({6, 6, 3}, rng, -1, 1);
  ConvParams<double> p(uniform({3, 3, 3, 4}, rng, -0.5, 0.5));
  const Td c = uniform({6, 6, 4}, rng, -1, 1);
  const auto g = conv2d_backward(x, p, c);
  auto loss = [&] { return dot(conv2d(x, p), c); };
  ck.input(x, g.grad_x, loss);
  ck.input(p.kernel, g.grad_kernel, loss);
  return ck.done();
}

GradcheckEntry check_relu(Rng& rng, double tol) {
  Checker ck("relu", tol);
  Td x = signed_away({5, 5, 4}, rng);
  const Td c = uniform(x.dims(), rng, -1, 1);
  ck.input(x, relu_backward(x, c), [&] { return dot(relu(x), c); }, [&] { return std::vector<double>(x.values().begin(), x.values().end()); });
  return ck.done();
}

GradcheckEntry check_sigmoid(Rng& rng, double tol) {
  Checker ck("sigmoid", tol);
  Td x = uniform({5, 5, 4}, rng, -3, 3);
  const Td c = uniform(x.dims(), rng, -1, 1);
  ck.input(x, sigmoid_backward(sigmoid(x), c), [&] { return dot(sigmoid(x), c); });
  return ck.done();
}

GradcheckEntry check_tanh(Rng& rng, double tol) {
  Checker ck("tanh", tol);
  Td x = uniform({5, 5, 4}, rng, -3, 3);
  const Td c = uniform(x.dims(), rng, -1, 1);
  ck.input(x, tanh_backward(stmn::tanh(x), c), [&] { return dot(stmn::tanh(x), c); });
  return ck.done();
}

GradcheckEntry check_mul(Rng& rng, double tol) {
  Checker ck("mul", tol);
  Td x = uniform({5, 5, 4}, rng, -1, 1), y = uniform({5, 5, 4}, rng, -1, 1);
  const Td c = uniform(x.dims(), rng, -1, 1);
  const auto [gx, gy] = mul_backward(x, y, c);
  auto loss = [&] { return dot(mul(x, y), c); };
  ck.input(x, gx, loss);
  ck.input(y, gy, loss);
  return ck.done();
}

GradcheckEntry check_blend(Rng& rng, double tol) {
  Checker ck("blend", tol);
  Td prev = uniform({5, 5, 4}, rng, -1, 1), cand = uniform({5, 5, 4}, rng, -1, 1), z = uniform({5, 5, 4}, rng, 0, 1);
  const Td c = uniform(prev.dims(), rng, -1, 1);
  const auto g = blend_backward(prev, cand, z, c);
  auto loss = [&] { return dot(blend(prev, cand, z), c); };
  ck.input(prev, g.grad_prev, loss);
  ck.input(cand, g.grad_cand, loss);
  ck.input(z, g.grad_z, loss);
  return ck.done();
}

GradcheckEntry check_avg_pool(Rng& rng, double tol) {
  Checker ck("avg_pool2", tol);
  Td x = uniform({6, 6, 4}, rng, -1, 1);
  const Td c = uniform({3, 3, 4}, rng, -1, 1);
  ck.input(x, avg_pool2_backward(c), [&] { return dot(avg_pool2(x), c); });
  return ck.done();
}

GradcheckEntry check_concat(Rng& rng, double tol) {
  Checker ck("concat_channels", tol);
  Td x = uniform({5, 5, 2}, rng, -1, 1), y = uniform({5, 5, 3}, rng, -1, 1);
  const Td c = uniform({5, 5, 5}, rng, -1, 1);
  const auto [gx, gy] = concat_channels_backward(c, 2);
  auto loss = [&] { return dot(concat_channels(x, y), c); };
  ck.input(x, gx, loss);
  ck.input(y, gy, loss);
  return ck.done();
}

GradcheckEntry check_bn_star(Rng& rng, double tol, BnScope scope) {
  Checker ck(std::string("bn_star/") + std::string(to_string(scope)), tol);
  Td x = uniform({5, 5, 4}, rng, 0.1, 1.0);
  for (std::size_t i = 0; i < 6; ++i) x[i * 7] = 3.0;  // a few clipped outputs
  const Td c = uniform(x.dims(), rng, -1, 1);
  const auto r = bn_star(x, scope);
  auto kinks = [&] {
    const auto s = bn_star(x, scope).stats;
    std::vector<double> k;
    for (std::size_t i = 0; i < x.size(); ++i) k.push_back(s.threshold(scope == BnScope::pooled ? 0 : i % 4) - x[i]);
    return k;
  };
  ck.input(x, bn_star_backward(x, r.stats, c, scope), [&] { return dot(bn_star(x, scope).gate, c); }, kinks);
  return ck.done();
}

GradcheckEntry check_matchtrans(Rng& rng, double tol) {
  Checker ck("matchtrans", tol);
  Td fc = uniform({5, 6, 3}, rng, 0.1, 1.0), fp = uniform({5, 6, 3}, rng, 0.1, 1.0);
  Td m = uniform({5, 6, 2}, rng, -1, 1);
  const Td c = uniform(m.dims(), rng, -1, 1);
  const std::size_t k = 2;
  const auto g = matchtrans_backward(fc, fp, m, compute_gamma(fc, fp, k), c);
  auto loss = [&] { return dot(align_memory(m, compute_gamma(fc, fp, k)), c); };
  ck.input(fc, g.grad_f_cur, loss);
  ck.input(fp, g.grad_f_prev, loss);
  ck.input(m, g.grad_m_prev, loss);
  return ck.done();
}

GradcheckEntry check_cell(Rng& rng, double tol, CellKind cell, std::uint64_t seed) {
  Checker ck(std::string(to_string(cell)) + "_step", tol);
  Td f = uniform({5, 5, 3}, rng, 0.0, 1.0);
  Td m = uniform({5, 5, 2}, rng, cell == CellKind::stmm ? 0.0 : -1.0, 1.0);
  auto p = random_stmm_params<double>(3, 3, 3, 2, seed);
  const Td c = uniform(m.dims(), rng, -1, 1);
  const auto cache = cell_step_cached(cell, f, m, p);
  const auto g = cell_step_backward(cache, p, c);
  auto loss = [&] { return dot(cell_step_cached(cell, f, m, p).memory, c); };
  auto kinks = [&] {
    std::vector<double> k;
    step_kinks(cell_step_cached(cell, f, m, p), k);
    return k;
  };
  ck.input(f, g.grad_f, loss, kinks);
  ck.input(m, g.grad_m_prev, loss, kinks);
  std::vector<Td*> kernels;
  std::vector<const Td*> grads;
  p.for_each([&](const char*, ConvParams<double>& cp) { kernels.push_back(&cp.kernel); });
  g.grad_params.for_each([&](const char*, const ConvParams<double>& cp) { grads.push_back(&cp.kernel); });
  for (std::size_t i = 0; i < kernels.size(); ++i) ck.input(*kernels[i], *grads[i], loss, kinks);
  return ck.done();
}

GradcheckEntry check_bidirectional(Rng& rng, double tol, std::uint64_t seed) {
  Checker ck("bidirectional_stmm", tol);
  RecurrenceOptions opts;
  opts.radius = 1;
  std::vector<Td> feats;
  for (int t = 0; t < 3; ++t) feats.push_back(uniform({5, 5, 3}, rng, 0.1, 1.0));
  auto pf = random_stmm_params<double>(3, 3, 3, 2, derive_seed(seed, 1));
  auto pb = random_stmm_params<double>(3, 3, 3, 2, derive_seed(seed, 2));
  std::vector<Td> cs;
  for (int t = 0; t < 3; ++t) cs.push_back(uniform({5, 5, 4}, rng, -1, 1));
  const auto cache = run_bidirectional_cached(feats, pf, pb, opts);
  const auto g = run_bidirectional_backward(feats, cache, pf, pb, opts, cs, true);
  auto loss = [&] {
    const auto out = run_bidirectional(feats, pf, pb, opts);
    double s = 0.0;
    for (std::size_t t = 0; t < out.size(); ++t) s += dot(out[t], cs[t]);
    return s;
  };
  auto kinks = [&] {
    const auto c = run_bidirectional_cached(feats, pf, pb, opts);
    std::vector<double> k;
    for (const auto& st : c.forward.steps) step_kinks(st, k);
    for (const auto& st : c.backward.steps) step_kinks(st, k);
    return k;
  };
  for (std::size_t t = 0; t < feats.size(); ++t) ck.input(feats[t], g.grad_features[t], loss, kinks);
  auto params = [&](StmmParams<double>& p, const StmmParams<double>& gp) {
    std::vector<Td*> kernels;
    std::vector<const Td*> grads;
    p.for_each([&](const char*, ConvParams<double>& cp) { kernels.push_back(&cp.kernel); });
    gp.for_each([&](const char*, const ConvParams<double>& cp) { grads.push_back(&cp.kernel); });
    for (std::size_t i = 0; i < kernels.size(); ++i) ck.input(*kernels[i], *grads[i], loss, kinks);
  };
  params(pf, g.grad_forward);
  params(pb, g.grad_backward);
  return ck.done();
}

GradcheckEntry check_roi_head(Rng& rng, double tol, std::uint64_t seed) {
  Checker ck("roi_pool_head_loss", tol);
  const std::vector<Box> boxes{{2, 3, 20, 25}, {10, 0, 28, 14}, {0, 12, 16, 28}};
  const std::vector<ProposalTarget> targets{{1, {0.1, -0.3, 0.2, 0.05}}, {0, {}}, {3, {2.0, 0.4, -1.5, 0.3}}};
  const std::size_t g = 3;
  Td map = uniform({7, 7, 4}, rng, -1, 1);
  auto hp = HeadParams<double>::random(g * g * 4, 3, seed);
  hp.cls_w = uniform(hp.cls_w.dims(), rng, -0.5, 0.5);
  hp.reg_w = uniform(hp.reg_w.dims(), rng, -0.5, 0.5);
  hp.reg_b = uniform(hp.reg_b.dims(), rng, -0.5, 0.5);

  auto preds_of = [&] {
    std::vector<Prediction<double>> preds;
    for (const auto& b : boxes) preds.push_back(predict(roi_pool(map, b, g, 0.25).pooled, hp));
    return preds;
  };
  std::vector<RoiPooled<double>> ref;
  for (const auto& b : boxes) ref.push_back(roi_pool(map, b, g, 0.25));
  auto kinks = [&] {
    std::vector<double> k;
    for (std::size_t bi = 0; bi < boxes.size(); ++bi) {
      const auto cur = roi_pool(map, boxes[bi], g, 0.25);
      for (std::size_t i = 0; i < cur.pooled.size(); ++i) {
        const double margin = map[static_cast<std::size_t>(ref[bi].argmax[i])] - cur.pooled[i];
        k.push_back(cur.argmax[i] == ref[bi].argmax[i] ? 1.0 : (margin == 0.0 ? -1.0 : margin));
      }
    }
    const auto preds = preds_of();
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (targets[i].label == 0) continue;
      for (std::size_t j = 0; j < 4; ++j)
        k.push_back(std::abs(preds[i].deltas[4 * static_cast<std::size_t>(targets[i].label - 1) + j] - targets[i].deltas[j]) - 1.0);
    }
    return k;
  };
  auto loss = [&] { return detection_loss(preds_of(), targets).total; };

  const auto lr = detection_loss(preds_of(), targets);
  auto grads = HeadParams<double>::zeros(g * g * 4, 3);
  Td gmap(map.dims());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto gp = predict_backward(ref[i].pooled, hp, lr.grad_logits[i], lr.grad_deltas[i], grads);
    roi_pool_backward(ref[i], gp, gmap);
  }
  ck.input(map, gmap, loss, kinks);
  ck.input(hp.cls_w, grads.cls_w, loss, kinks);
  ck.input(hp.cls_b, grads.cls_b, loss, kinks);
  ck.input(hp.reg_w, grads.reg_w, loss, kinks);
  ck.input(hp.reg_b, grads.reg_b, loss, kinks);
  return ck.done();
}

}  // namespace

bool GradcheckReport::all_pass() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
}

std::string GradcheckReport::text() const {
  std::ostringstream os;
  char buf[160];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%-22s max_rel_err %.3e  accepted %zu/%zu  %s\n", e.op.c_str(), e.max_rel_error,
                  e.accepted, e.total, e.pass ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "tolerance %.1e: %s\n", tolerance, all_pass() ? "all passed" : "FAILED");
  os << buf;
  return os.str();
}

GradcheckReport gradcheck_all(std::uint64_t seed, double tolerance) {
  const double tol = tolerance;
  const std::vector<std::function<GradcheckEntry(Rng&)>> checks{
      [&](Rng& g) { return check_conv(g, tol); },
      [&](Rng& g) { return check_relu(g, tol); },
      [&](Rng& g) { return check_sigmoid(g, tol); },
      [&](Rng& g) { return check_tanh(g, tol); },
      [&](Rng& g) { return check_mul(g, tol); },
      [&](Rng& g) { return check_blend(g, tol); },
      [&](Rng& g) { return check_avg_pool(g, tol); },
      [&](Rng& g) { return check_concat(g, tol); },
      [&](Rng& g) { return check_bn_star(g, tol, BnScope::pooled); },
      [&](Rng& g) { return check_bn_star(g, tol, BnScope::per_channel); },
      [&](Rng& g) { return check_matchtrans(g, tol); },
      [&](Rng& g) { return check_cell(g, tol, CellKind::stmm, derive_seed(seed, 100)); },
      [&](Rng& g) { return check_cell(g, tol, CellKind::convgru, derive_seed(seed, 101)); },
      [&](Rng& g) { return check_bidirectional(g, tol, derive_seed(seed, 102)); },
      [&](Rng& g) { return check_roi_head(g, tol, derive_seed(seed, 103)); },
  };
  GradcheckReport r;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    r.entries.push_back(checks[i](rng));
  }
  return r;
}

}  // namespace stmn
