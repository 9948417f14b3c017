#include "stmn/head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace stmn {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, double img_w, double img_h) {
  return {std::clamp(b.x1, 0.0, img_w), std::clamp(b.y1, 0.0, img_h), std::clamp(b.x2, 0.0, img_w),
          std::clamp(b.y2, 0.0, img_h)};
}

std::vector<Box> anchor_grid(std::size_t img_h, std::size_t img_w, const ProposalConfig& cfg) {
  if (img_h == 0 || img_w == 0) throw UsageError("anchor_grid: empty image dims");
  if (cfg.stride == 0 || cfg.scales.empty()) throw ConfigError("anchor_grid: need a stride and scales");
  std::vector<Box> out;
  const double half = static_cast<double>(cfg.stride) / 2.0;
  for (std::size_t y = 0; y * cfg.stride < img_h; ++y) {
    for (std::size_t x = 0; x * cfg.stride < img_w; ++x) {
      const double cx = static_cast<double>(x * cfg.stride) + half;
      const double cy = static_cast<double>(y * cfg.stride) + half;
      for (double s : cfg.scales) {
        const Box b = clip_box({cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2},
                               static_cast<double>(img_w), static_cast<double>(img_h));
        if (b.valid()) out.push_back(b);
      }
    }
  }
  return out;
}

std::vector<Box> generate_proposals(const std::vector<Box>& gt, std::size_t img_h,
                                    std::size_t img_w, Rng& rng, const ProposalConfig& cfg) {
  std::vector<Box> out = anchor_grid(img_h, img_w, cfg);
  if (cfg.jitter_per_gt == 0) throw UsageError("generate_proposals: n must be at least 1");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (const Box& b : gt) {
    for (std::size_t i = 0; i < cfg.jitter_per_gt; ++i) {
      Box j = b;
      if (cfg.jitter > 0.0) {
        const double w = b.width() * (1.0 + cfg.jitter * u(rng));
        const double h = b.height() * (1.0 + cfg.jitter * u(rng));
        const double cx = (b.x1 + b.x2) / 2 + cfg.jitter * u(rng) * b.width();
        const double cy = (b.y1 + b.y2) / 2 + cfg.jitter * u(rng) * b.height();
        j = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
      }
      j = clip_box(j, static_cast<double>(img_w), static_cast<double>(img_h));
      if (j.valid()) out.push_back(j);
    }
  }
  return out;
}

Deltas encode_deltas(const Box& p, const Box& t) {
  const double pw = p.width(), ph = p.height();
  return {((t.x1 + t.x2) - (p.x1 + p.x2)) / (2 * pw), ((t.y1 + t.y2) - (p.y1 + p.y2)) / (2 * ph),
          std::log(t.width() / pw), std::log(t.height() / ph)};
}

Box decode_deltas(const Box& p, const Deltas& d) {
  const double pw = p.width(), ph = p.height();
  const double cx = (p.x1 + p.x2) / 2 + d[0] * pw;
  const double cy = (p.y1 + p.y2) / 2 + d[1] * ph;
  // Bound the size ratio so untrained heads cannot overflow.
  const double lim = std::log(1000.0 / 16.0);
  const double w = pw * std::exp(std::min(d[2], lim));
  const double h = ph * std::exp(std::min(d[3], lim));
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

std::optional<Box> apply_deltas(const Box& p, const Deltas& d, double img_w, double img_h) {
  const Box b = clip_box(decode_deltas(p, d), img_w, img_h);
  if (!b.valid()) return std::nullopt;
  return b;
}

double smooth_l1(double u) {
  const double a = std::abs(u);
  return a < 1.0 ? 0.5 * u * u : a - 0.5;
}

double smooth_l1_grad(double u) {
  if (u >= 1.0) return 1.0;
  if (u <= -1.0) return -1.0;
  return u;
}

template <typename T>
RoiPooled<T> roi_pool(const Tensor<T>& map, const Box& box, std::size_t g, double spatial_scale) {
  require_rank(map, 3, "roi_pool");
  if (g == 0) throw UsageError("roi_pool: grid must be positive");
  if (!box.valid()) throw UsageError("roi_pool: degenerate box");
  const auto H = static_cast<std::ptrdiff_t>(map.height());
  const auto W = static_cast<std::ptrdiff_t>(map.width());
  const std::size_t D = map.channels();
  const auto ys = static_cast<std::ptrdiff_t>(std::floor(box.y1 * spatial_scale));
  const auto ye = static_cast<std::ptrdiff_t>(std::ceil(box.y2 * spatial_scale));
  const auto xs = static_cast<std::ptrdiff_t>(std::floor(box.x1 * spatial_scale));
  const auto xe = static_cast<std::ptrdiff_t>(std::ceil(box.x2 * spatial_scale));
  if (ye <= 0 || xe <= 0 || ys >= H || xs >= W) {
    throw UsageError("roi_pool: box does not intersect the feature map");
  }
  const std::ptrdiff_t len_h = std::max<std::ptrdiff_t>(ye - ys, 1);
  const std::ptrdiff_t len_w = std::max<std::ptrdiff_t>(xe - xs, 1);
  const auto G = static_cast<std::ptrdiff_t>(g);

  RoiPooled<T> out;
  out.pooled = Tensor<T>({g, g, D});
  out.argmax.assign(g * g * D, -1);
  for (std::ptrdiff_t py = 0; py < G; ++py) {
    const std::ptrdiff_t h0 = std::max<std::ptrdiff_t>(ys + py * len_h / G, 0);
    const std::ptrdiff_t h1 = std::min<std::ptrdiff_t>(ys + ((py + 1) * len_h + G - 1) / G, H);
    for (std::ptrdiff_t px = 0; px < G; ++px) {
      const std::ptrdiff_t w0 = std::max<std::ptrdiff_t>(xs + px * len_w / G, 0);
      const std::ptrdiff_t w1 = std::min<std::ptrdiff_t>(xs + ((px + 1) * len_w + G - 1) / G, W);
      const std::size_t obase = static_cast<std::size_t>(py * G + px) * D;
      if (h1 <= h0 || w1 <= w0) continue;
      for (std::size_t d = 0; d < D; ++d) {
        T best = -std::numeric_limits<T>::infinity();
        std::ptrdiff_t arg = -1;
        for (std::ptrdiff_t y = h0; y < h1; ++y) {
          for (std::ptrdiff_t x = w0; x < w1; ++x) {
            const auto idx = (y * W + x) * static_cast<std::ptrdiff_t>(D) + static_cast<std::ptrdiff_t>(d);
            const T v = map[static_cast<std::size_t>(idx)];
            if (v > best) {
              best = v;
              arg = idx;
            }
          }
        }
        out.pooled[obase + d] = best;
        out.argmax[obase + d] = arg;
      }
    }
  }
  return out;
}

template <typename T>
void roi_pool_backward(const RoiPooled<T>& fwd, const Tensor<T>& grad_pooled, Tensor<T>& grad_map) {
  require_same_shape(fwd.pooled, grad_pooled, "roi_pool_backward");
  for (std::size_t i = 0; i < fwd.argmax.size(); ++i) {
    if (fwd.argmax[i] < 0) continue;
    grad_map[static_cast<std::size_t>(fwd.argmax[i])] += grad_pooled[i];
  }
}

template <typename T>
HeadParams<T> HeadParams<T>::zeros(std::size_t features, std::size_t num_classes) {
  HeadParams<T> hp;
  hp.cls_w = Tensor<T>({features, num_classes + 1});
  hp.cls_b = Tensor<T>({num_classes + 1});
  hp.reg_w = Tensor<T>({features, 4 * num_classes});
  hp.reg_b = Tensor<T>({4 * num_classes});
  return hp;
}

template <typename T>
HeadParams<T> HeadParams<T>::random(std::size_t features, std::size_t num_classes,
                                    std::uint64_t seed) {
  Rng rng(seed);
  HeadParams<T> hp = zeros(features, num_classes);
  // Standard deviations 0.01 (classifier) and 0.001 (regressor), uniform.
  hp.cls_w = uniform_tensor<T>(hp.cls_w.dims(), -0.01 * std::sqrt(3.0), 0.01 * std::sqrt(3.0), rng);
  hp.reg_w = uniform_tensor<T>(hp.reg_w.dims(), -0.001 * std::sqrt(3.0), 0.001 * std::sqrt(3.0), rng);
  return hp;
}

template <typename T>
Prediction<T> predict(const Tensor<T>& pooled, const HeadParams<T>& hp) {
  const std::size_t F = hp.in_features();
  if (pooled.size() != F) {
    throw ShapeError("predict: pooled features have " + std::to_string(pooled.size()) +
                     " values, head expects " + std::to_string(F));
  }
  const std::size_t K = hp.cls_w.dim(1);
  const std::size_t R = hp.reg_w.dim(1);
  Prediction<T> p;
  p.logits.assign(hp.cls_b.values().begin(), hp.cls_b.values().end());
  p.deltas.assign(hp.reg_b.values().begin(), hp.reg_b.values().end());
  for (std::size_t f = 0; f < F; ++f) {
    const T x = pooled[f];
    if (x == T{0}) continue;
    const T* wc = hp.cls_w.raw() + f * K;
    for (std::size_t k = 0; k < K; ++k) p.logits[k] += x * wc[k];
    const T* wr = hp.reg_w.raw() + f * R;
    for (std::size_t r = 0; r < R; ++r) p.deltas[r] += x * wr[r];
  }
  const T mx = *std::max_element(p.logits.begin(), p.logits.end());
  p.probs.resize(K);
  T z{0};
  for (std::size_t k = 0; k < K; ++k) z += p.probs[k] = std::exp(p.logits[k] - mx);
  for (auto& v : p.probs) v /= z;
  return p;
}

template <typename T>
Tensor<T> predict_backward(const Tensor<T>& pooled, const HeadParams<T>& hp,
                           const std::vector<T>& grad_logits, const std::vector<T>& grad_deltas,
                           HeadParams<T>& grads) {
  const std::size_t F = hp.in_features();
  const std::size_t K = hp.cls_w.dim(1);
  const std::size_t R = hp.reg_w.dim(1);
  if (pooled.size() != F || grad_logits.size() != K || grad_deltas.size() != R) {
    throw ShapeError("predict_backward: gradient sizes do not match the head");
  }
  Tensor<T> gx(pooled.dims());
  for (std::size_t k = 0; k < K; ++k) grads.cls_b[k] += grad_logits[k];
  for (std::size_t r = 0; r < R; ++r) grads.reg_b[r] += grad_deltas[r];
  for (std::size_t f = 0; f < F; ++f) {
    const T x = pooled[f];
    const T* wc = hp.cls_w.raw() + f * K;
    const T* wr = hp.reg_w.raw() + f * R;
    T* gwc = grads.cls_w.raw() + f * K;
    T* gwr = grads.reg_w.raw() + f * R;
    T acc{0};
    for (std::size_t k = 0; k < K; ++k) {
      acc += wc[k] * grad_logits[k];
      gwc[k] += x * grad_logits[k];
    }
    for (std::size_t r = 0; r < R; ++r) {
      acc += wr[r] * grad_deltas[r];
      gwr[r] += x * grad_deltas[r];
    }
    gx[f] = acc;
  }
  return gx;
}

std::vector<LabeledProposal> sample_targets(const std::vector<Box>& proposals,
                                            const std::vector<Box>& gt,
                                            const std::vector<int>& gt_classes, Rng& rng,
                                            const LabelingConfig& cfg) {
  if (gt.size() != gt_classes.size()) throw ShapeError("sample_targets: one class per gt box");
  std::vector<LabeledProposal> fg, bg;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best = 0.0;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = iou(proposals[i], gt[j]);
      if (v > best) {
        best = v;
        arg = j;
      }
    }
    if (best >= cfg.fg_iou) {
      fg.push_back({i, {gt_classes[arg], encode_deltas(proposals[i], gt[arg])}});
    } else if (best < cfg.bg_iou) {
      bg.push_back({i, {0, {}}});
    }
  }
  std::shuffle(fg.begin(), fg.end(), rng);
  std::shuffle(bg.begin(), bg.end(), rng);
  const std::size_t n_fg = std::min(cfg.max_fg, fg.size());
  const std::size_t n_bg = std::min(bg.size(), std::max(cfg.bg_per_fg * n_fg, cfg.min_bg));
  std::vector<LabeledProposal> out(fg.begin(), fg.begin() + static_cast<std::ptrdiff_t>(n_fg));
  out.insert(out.end(), bg.begin(), bg.begin() + static_cast<std::ptrdiff_t>(n_bg));
  return out;
}

template <typename T>
LossResult<T> detection_loss(const std::vector<Prediction<T>>& preds,
                             const std::vector<ProposalTarget>& targets) {
  if (preds.empty()) throw UsageError("detection_loss: no proposals");
  if (preds.size() != targets.size()) throw ShapeError("detection_loss: one target per prediction");
  const std::size_t n = preds.size();
  std::size_t n_fg = 0;
  for (const auto& t : targets) n_fg += t.label > 0 ? 1 : 0;

  LossResult<T> out;
  out.grad_logits.resize(n);
  out.grad_deltas.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = preds[i];
    const auto& t = targets[i];
    const std::size_t K = p.logits.size();
    if (t.label < 0 || static_cast<std::size_t>(t.label) >= K) {
      throw UsageError("detection_loss: label out of range");
    }
    const auto label = static_cast<std::size_t>(t.label);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : p.logits) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (T v : p.logits) z += std::exp(static_cast<double>(v) - mx);
    out.cls += (std::log(z) + mx - static_cast<double>(p.logits[label])) / static_cast<double>(n);

    auto& gl = out.grad_logits[i];
    gl.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      gl[k] = static_cast<T>((static_cast<double>(p.probs[k]) - (k == label ? 1.0 : 0.0)) /
                             static_cast<double>(n));
    }
    auto& gd = out.grad_deltas[i];
    gd.assign(p.deltas.size(), T{0});
    if (label == 0) continue;
    for (std::size_t j = 0; j < 4; ++j) {
      const std::size_t r = 4 * (label - 1) + j;
      const double u = static_cast<double>(p.deltas[r]) - t.deltas[j];
      out.reg += smooth_l1(u) / static_cast<double>(n_fg);
      gd[r] = static_cast<T>(smooth_l1_grad(u) / static_cast<double>(n_fg));
    }
  }
  out.total = out.cls + out.reg;
  return out;
}

#define STMN_INSTANTIATE_HEAD(T)                                                               \
  template struct HeadParams<T>;                                                               \
  template RoiPooled<T> roi_pool(const Tensor<T>&, const Box&, std::size_t, double);           \
  template void roi_pool_backward(const RoiPooled<T>&, const Tensor<T>&, Tensor<T>&);          \
  template Prediction<T> predict(const Tensor<T>&, const HeadParams<T>&);                      \
  template Tensor<T> predict_backward(const Tensor<T>&, const HeadParams<T>&,                  \
                                      const std::vector<T>&, const std::vector<T>&,            \
                                      HeadParams<T>&);                                         \
  template LossResult<T> detection_loss(const std::vector<Prediction<T>>&,                     \
                                        const std::vector<ProposalTarget>&);

STMN_INSTANTIATE_HEAD(float)
STMN_INSTANTIATE_HEAD(double)

#undef STMN_INSTANTIATE_HEAD

}  // namespace stmn
