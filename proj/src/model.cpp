#include "stmn/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "stmn/errors.hpp"
#include "stmn/random.hpp"

namespace stmn {

namespace {

constexpr double kFeatureStride = 4.0;
constexpr std::size_t kPreNmsCap = 200;

// Per-image, per-channel median subtraction: the dominant background level maps to zero.
template <typename T>
Tensor<T> centred(const Tensor<T>& image) {
  Tensor<T> x = image;
  const std::size_t C = x.channels(), n = x.height() * x.width();
  std::vector<T> v(n);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < n; ++i) v[i] = x[i * C + c];
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
    const T med = v[n / 2];
    for (std::size_t i = 0; i < n; ++i) x[i * C + c] -= med;
  }
  return x;
}

}  // namespace

template <typename T>
ConvParams<T> he_conv(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout, std::uint64_t seed) {
  Rng rng(seed);
  const double limit = std::sqrt(6.0 / static_cast<double>(kh * kw * cin));
  return ConvParams<T>(uniform_tensor<T>({kh, kw, cin, cout}, -limit, limit, rng));
}

template <typename T>
ConvParams<T> averaging_reduce(std::size_t d) {
  auto p = ConvParams<T>::zeros(1, 1, 2 * d, d);
  for (std::size_t c = 0; c < d; ++c) {
    p.kernel[c * d + c] = static_cast<T>(0.5);
    p.kernel[(d + c) * d + c] = static_cast<T>(0.5);
  }
  return p;
}

template <typename T>
BackboneParams<T> BackboneParams<T>::random(std::size_t hidden, std::size_t d_feat, std::uint64_t seed) {
  BackboneParams p;
  p.c1 = he_conv<T>(3, 3, 3, hidden, derive_seed(seed, 1));
  p.c2 = he_conv<T>(3, 3, hidden, d_feat, derive_seed(seed, 2));
  return p;
}

template <typename T>
BackboneCache<T> backbone_forward(const Tensor<T>& image, const BackboneParams<T>& p) {
  require_rank(image, 3, "backbone_forward");
  if (image.channels() != 3) throw ShapeError("backbone_forward: expected an RGB image");
  BackboneCache<T> c;
  c.x = centred(image);
  c.a1 = conv2d(c.x, p.c1);
  c.p1 = avg_pool2(relu(c.a1));
  c.a2 = conv2d(c.p1, p.c2);
  c.f = avg_pool2(relu(c.a2));
  return c;
}

template <typename T>
Tensor<T> backbone_features(const Tensor<T>& image, const BackboneParams<T>& p) {
  return backbone_forward(image, p).f;
}

template <typename T>
void backbone_backward(const BackboneCache<T>& c, const BackboneParams<T>& p, const Tensor<T>& grad_f,
                       BackboneParams<T>& grads) {
  const auto g_a2 = relu_backward(c.a2, avg_pool2_backward(grad_f));
  const auto cg2 = conv2d_backward(c.p1, p.c2, g_a2);
  accumulate(grads.c2.kernel, cg2.grad_kernel);
  const auto g_a1 = relu_backward(c.a1, avg_pool2_backward(cg2.grad_x));
  const auto cg1 = conv2d_backward(c.x, p.c1, g_a1);
  accumulate(grads.c1.kernel, cg1.grad_kernel);
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros_like() const {
  ModelParams out = *this;
  out.for_each([](const char*, Tensor<T>& t) { std::fill(t.values().begin(), t.values().end(), T{0}); });
  return out;
}

template <typename T>
ModelParams<T> init_static_detector(const ModelShape& s, std::uint64_t seed) {
  if (s.hidden == 0 || s.d_feat == 0 || s.d_mem == 0 || s.num_classes == 0 || s.pool == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  ModelParams<T> p;
  p.backbone = BackboneParams<T>::random(s.hidden, s.d_feat, derive_seed(seed, 1));
  p.static_conv = he_conv<T>(3, 3, s.d_feat, s.d_mem, derive_seed(seed, 2));
  p.head = HeadParams<T>::random(s.pool * s.pool * s.d_mem, s.num_classes, derive_seed(seed, 3));
  return p;
}

template <typename T>
ModelParams<T> init_recurrent_detector(const ModelParams<T>& base, const RecurrentInit& init, std::uint64_t seed) {
  if (base.recurrent) throw UsageError("init_recurrent_detector: base must be a per-frame detector");
  ModelParams<T> p = base;
  p.recurrent = true;
  const std::size_t d_mem = base.memory_channels(), d_feat = base.static_conv.in_channels();
  if (init.transfer) {
    p.fwd = transfer_weights(base.static_conv, d_mem, derive_seed(seed, 11));
    p.bwd = transfer_weights(base.static_conv, d_mem, derive_seed(seed, 12));
  } else {
    const std::size_t kh = base.static_conv.kh(), kw = base.static_conv.kw();
    p.fwd = random_stmm_params<T>(kh, kw, d_feat, d_mem, derive_seed(seed, 11));
    p.bwd = random_stmm_params<T>(kh, kw, d_feat, d_mem, derive_seed(seed, 12));
  }
  p.reduce = averaging_reduce<T>(d_mem);
  if (!init.pretrained_head) {
    p.head = HeadParams<T>::random(base.head.in_features(), base.head.num_classes(), derive_seed(seed, 13));
  }
  return p;
}

template <typename T>
WindowForward<T> forward_window(const ModelParams<T>& p, const ForwardOptions& opts, const WindowInput<T>& in) {
  const std::size_t n = in.length();
  if (n == 0) throw UsageError("forward_window: empty window");
  WindowForward<T> out;
  out.spatial_scale = 1.0 / kFeatureStride;
  if (!p.recurrent) {
    if (in.images.empty()) throw UsageError("forward_window: the per-frame detector needs images");
    for (const auto& img : in.images) {
      out.backbone.push_back(backbone_forward(img, p.backbone));
      out.features.push_back(out.backbone.back().f);
      out.static_pre.push_back(conv2d(out.features.back(), p.static_conv));
      out.maps.push_back(relu(out.static_pre.back()));
    }
    return out;
  }
  if (!in.features.empty()) {
    out.features = in.features;
  } else {
    for (const auto& img : in.images) out.features.push_back(backbone_features(img, p.backbone));
  }
  out.memory = run_bidirectional_cached(out.features, p.fwd, p.bwd, opts.recurrence);
  for (const auto& m : out.memory.outputs) out.maps.push_back(conv2d(m, p.reduce));
  return out;
}

template <typename T>
double window_loss(const ModelParams<T>& p, const ForwardOptions& opts, const WindowInput<T>& in,
                   const std::vector<FrameTargets>& targets, ModelParams<T>* grads) {
  const auto fwd = forward_window(p, opts, in);
  const std::size_t n = fwd.maps.size();
  if (targets.size() != n) throw ShapeError("window_loss: one target set per frame");

  double total = 0.0;
  std::vector<Tensor<T>> grad_maps;
  for (std::size_t t = 0; t < n; ++t) {
    const auto& ft = targets[t];
    if (ft.boxes.size() != ft.targets.size()) throw ShapeError("window_loss: one target per box");
    Tensor<T> gmap(fwd.maps[t].dims());
    if (ft.boxes.empty()) {
      grad_maps.push_back(std::move(gmap));
      continue;
    }
    std::vector<RoiPooled<T>> pooled;
    std::vector<Prediction<T>> preds;
    for (const auto& b : ft.boxes) {
      pooled.push_back(roi_pool(fwd.maps[t], b, opts.pool, fwd.spatial_scale));
      preds.push_back(predict(pooled.back().pooled, p.head));
    }
    const auto lr = detection_loss(preds, ft.targets);
    total += lr.total;
    if (grads) {
      for (std::size_t i = 0; i < pooled.size(); ++i) {
        const auto gp = predict_backward(pooled[i].pooled, p.head, lr.grad_logits[i], lr.grad_deltas[i], grads->head);
        roi_pool_backward(pooled[i], gp, gmap);
      }
    }
    grad_maps.push_back(std::move(gmap));
  }
  if (!grads) return total;

  if (!p.recurrent) {
    for (std::size_t t = 0; t < n; ++t) {
      const auto g_pre = relu_backward(fwd.static_pre[t], grad_maps[t]);
      const auto cg = conv2d_backward(fwd.features[t], p.static_conv, g_pre);
      accumulate(grads->static_conv.kernel, cg.grad_kernel);
      backbone_backward(fwd.backbone[t], p.backbone, cg.grad_x, grads->backbone);
    }
    return total;
  }
  std::vector<Tensor<T>> grad_outputs;
  for (std::size_t t = 0; t < n; ++t) {
    const auto cg = conv2d_backward(fwd.memory.outputs[t], p.reduce, grad_maps[t]);
    accumulate(grads->reduce.kernel, cg.grad_kernel);
    grad_outputs.push_back(cg.grad_x);
  }
  const auto rb = run_bidirectional_backward(fwd.features, fwd.memory, p.fwd, p.bwd, opts.recurrence, grad_outputs, false);
  auto add_cell = [](StmmParams<T>& dst, const StmmParams<T>& src) {
    std::vector<Tensor<T>*> d;
    dst.for_each([&](const char*, ConvParams<T>& c) { d.push_back(&c.kernel); });
    std::size_t i = 0;
    src.for_each([&](const char*, const ConvParams<T>& c) { accumulate(*d[i++], c.kernel); });
  };
  add_cell(grads->fwd, rb.grad_forward);
  add_cell(grads->bwd, rb.grad_backward);
  return total;
}

template <typename T>
DetectionSequence detect_window(const ModelParams<T>& p, const WindowForward<T>& fwd, const std::vector<Box>& anchors,
                                std::size_t img_w, std::size_t img_h, const DetectConfig& cfg,
                                std::size_t first_frame) {
  const std::size_t C = p.head.num_classes();
  const std::size_t g = static_cast<std::size_t>(std::lround(std::sqrt(
      static_cast<double>(p.head.in_features() / p.memory_channels()))));
  DetectionSequence out(fwd.maps.size());
  for (std::size_t t = 0; t < fwd.maps.size(); ++t) {
    std::vector<Detection> dets;
    for (const auto& a : anchors) {
      const auto pred = predict(roi_pool(fwd.maps[t], a, g, fwd.spatial_scale).pooled, p.head);
      for (std::size_t c = 1; c <= C; ++c) {
        const double s = static_cast<double>(pred.probs[c]);
        if (s < cfg.score_threshold) continue;
        Deltas d;
        for (std::size_t j = 0; j < 4; ++j) d[j] = static_cast<double>(pred.deltas[4 * (c - 1) + j]);
        const auto box = apply_deltas(a, d, static_cast<double>(img_w), static_cast<double>(img_h));
        if (!box) continue;
        dets.push_back({*box, static_cast<int>(c), s, first_frame + t});
      }
    }
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (dets.size() > kPreNmsCap) dets.resize(kPreNmsCap);
    auto kept = per_frame_nms(dets, cfg.nms_iou);
    if (kept.size() > cfg.max_per_frame) kept.resize(cfg.max_per_frame);
    out[t] = std::move(kept);
  }
  return out;
}

template <typename T>
void Sgd<T>::step(ModelParams<T>& p, const ModelParams<T>& grads, double lr) {
  std::vector<Tensor<T>*> params;
  std::vector<const Tensor<T>*> gs;
  p.for_each_trainable([&](const char*, Tensor<T>& t) { params.push_back(&t); });
  grads.for_each_trainable([&](const char*, const Tensor<T>& t) { gs.push_back(&t); });
  if (params.size() != gs.size()) throw ShapeError("Sgd: gradient layout does not match parameters");
  if (velocity_.empty()) {
    for (const auto* t : params) velocity_.emplace_back(t->dims());
  }
  const T mu = static_cast<T>(momentum_), rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], *gs[i], "Sgd::step");
    auto v = velocity_[i].values();
    auto w = params[i]->values();
    const auto g = gs[i]->values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = mu * v[j] + g[j];
      w[j] -= rate * v[j];
    }
  }
}

template <typename T>
double grad_norm(const ModelParams<T>& grads) {
  double s = 0.0;
  grads.for_each_trainable([&](const char*, const Tensor<T>& t) {
    for (T v : t.values()) s += static_cast<double>(v) * static_cast<double>(v);
  });
  return std::sqrt(s);
}

#define STMN_INSTANTIATE(T)                                                                                    \
  template ConvParams<T> he_conv<T>(std::size_t, std::size_t, std::size_t, std::size_t, std::uint64_t);       \
  template ConvParams<T> averaging_reduce<T>(std::size_t);                                                    \
  template struct BackboneParams<T>;                                                                          \
  template BackboneCache<T> backbone_forward(const Tensor<T>&, const BackboneParams<T>&);                     \
  template Tensor<T> backbone_features(const Tensor<T>&, const BackboneParams<T>&);                           \
  template void backbone_backward(const BackboneCache<T>&, const BackboneParams<T>&, const Tensor<T>&,        \
                                  BackboneParams<T>&);                                                        \
  template ModelParams<T> ModelParams<T>::zeros_like() const;                                                 \
  template ModelParams<T> init_static_detector<T>(const ModelShape&, std::uint64_t);                          \
  template ModelParams<T> init_recurrent_detector(const ModelParams<T>&, const RecurrentInit&, std::uint64_t); \
  template WindowForward<T> forward_window(const ModelParams<T>&, const ForwardOptions&, const WindowInput<T>&); \
  template double window_loss(const ModelParams<T>&, const ForwardOptions&, const WindowInput<T>&,            \
                              const std::vector<FrameTargets>&, ModelParams<T>*);                             \
  template DetectionSequence detect_window(const ModelParams<T>&, const WindowForward<T>&,                    \
                                           const std::vector<Box>&, std::size_t, std::size_t,                 \
                                           const DetectConfig&, std::size_t);                                 \
  template class Sgd<T>;                                                                                      \
  template double grad_norm(const ModelParams<T>&);

STMN_INSTANTIATE(float)
STMN_INSTANTIATE(double)

}  // namespace stmn
