#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stmn/bidirectional.hpp"
#include "stmn/head.hpp"
#include "stmn/ops.hpp"
#include "stmn/seqnms.hpp"
#include "stmn/stmm.hpp"

namespace stmn {

// Two conv3x3 + ReLU + avg-pool stages: H x W x 3 image -> H/4 x W/4 x D_feat features.
template <typename T>
struct BackboneParams {
  ConvParams<T> c1, c2;

  static BackboneParams random(std::size_t hidden, std::size_t d_feat, std::uint64_t seed);
  std::size_t feature_channels() const { return c2.out_channels(); }

  template <typename F>
  void for_each(F&& f) { f("c1", c1); f("c2", c2); }
  template <typename F>
  void for_each(F&& f) const { f("c1", c1); f("c2", c2); }
  bool operator==(const BackboneParams&) const = default;
};

template <typename T>
struct BackboneCache {
  Tensor<T> x;   // centred image
  Tensor<T> a1;  // conv1 output
  Tensor<T> p1;  // pooled ReLU(a1)
  Tensor<T> a2;  // conv2 output
  Tensor<T> f;   // pooled ReLU(a2)
};

template <typename T>
BackboneCache<T> backbone_forward(const Tensor<T>& image, const BackboneParams<T>& p);

template <typename T>
Tensor<T> backbone_features(const Tensor<T>& image, const BackboneParams<T>& p);

// Accumulates kernel gradients into grads.
template <typename T>
void backbone_backward(const BackboneCache<T>& cache, const BackboneParams<T>& p,
                       const Tensor<T>& grad_f, BackboneParams<T>& grads);

// He-uniform kernel.
template <typename T>
ConvParams<T> he_conv(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                      std::uint64_t seed);

// 1x1 kernel 2D -> D mapping concat(a, b) to (a + b) / 2.
template <typename T>
ConvParams<T> averaging_reduce(std::size_t d);

// Per-frame detector (recurrent == false) or the recurrent memory detector built on top of it.
// The recurrent detector maps frozen backbone features through the bidirectional cell and a
// 1x1 reduce conv; the per-frame detector uses ReLU(static_conv * F).
template <typename T>
struct ModelParams {
  BackboneParams<T> backbone;
  ConvParams<T> static_conv;
  HeadParams<T> head;
  bool recurrent = false;
  StmmParams<T> fwd, bwd;
  ConvParams<T> reduce;

  std::size_t memory_channels() const { return static_conv.out_channels(); }

  // Every stored tensor, with a stable name.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }
  // Tensors updated by training: backbone, static conv and head for the per-frame detector;
  // both cells, reduce and head for the recurrent one.
  template <typename F>
  void for_each_trainable(F&& f) {
    visit_trainable(*this, f);
  }
  template <typename F>
  void for_each_trainable(F&& f) const {
    visit_trainable(*this, f);
  }

  ModelParams zeros_like() const;
  template <typename U>
  ModelParams<U> cast() const;
  bool operator==(const ModelParams&) const = default;

 private:
  template <typename Self, typename F>
  static void visit(Self& s, F& f) {
    f("backbone.c1", s.backbone.c1.kernel);
    f("backbone.c2", s.backbone.c2.kernel);
    f("static_conv", s.static_conv.kernel);
    visit_head(s, f);
    if (s.recurrent) visit_recurrent(s, f);
  }
  template <typename Self, typename F>
  static void visit_trainable(Self& s, F& f) {
    if (s.recurrent) {
      visit_recurrent(s, f);
    } else {
      f("backbone.c1", s.backbone.c1.kernel);
      f("backbone.c2", s.backbone.c2.kernel);
      f("static_conv", s.static_conv.kernel);
    }
    visit_head(s, f);
  }
  template <typename Self, typename F>
  static void visit_head(Self& s, F& f) {
    f("head.cls_w", s.head.cls_w);
    f("head.cls_b", s.head.cls_b);
    f("head.reg_w", s.head.reg_w);
    f("head.reg_b", s.head.reg_b);
  }
  template <typename Self, typename F>
  static void visit_recurrent(Self& s, F& f) {
    const std::string names[] = {"wz", "uz", "wr", "ur", "w", "u"};
    int i = 0;
    s.fwd.for_each([&](const char*, auto& c) { f(("fwd." + names[i++]).c_str(), c.kernel); });
    i = 0;
    s.bwd.for_each([&](const char*, auto& c) { f(("bwd." + names[i++]).c_str(), c.kernel); });
    f("reduce", s.reduce.kernel);
  }
};

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  auto conv = [](const ConvParams<T>& c) { return ConvParams<U>(c.kernel.template cast<U>()); };
  ModelParams<U> out;
  out.backbone.c1 = conv(backbone.c1);
  out.backbone.c2 = conv(backbone.c2);
  out.static_conv = conv(static_conv);
  out.head.cls_w = head.cls_w.template cast<U>();
  out.head.cls_b = head.cls_b.template cast<U>();
  out.head.reg_w = head.reg_w.template cast<U>();
  out.head.reg_b = head.reg_b.template cast<U>();
  out.recurrent = recurrent;
  if (recurrent) {
    out.fwd = fwd.template cast<U>();
    out.bwd = bwd.template cast<U>();
    out.reduce = conv(reduce);
  }
  return out;
}

struct ModelShape {
  std::size_t hidden = 8;     // backbone conv1 channels
  std::size_t d_feat = 16;
  std::size_t d_mem = 16;
  std::size_t num_classes = 4;
  std::size_t pool = 5;       // ROI pooling grid
};

template <typename T>
ModelParams<T> init_static_detector(const ModelShape& shape, std::uint64_t seed);

struct RecurrentInit {
  CellKind cell = CellKind::stmm;
  bool transfer = true;         // W, Wz, Wr from the static conv; else fresh Glorot
  bool pretrained_head = true;  // keep the static detector's head; else fresh
};

// Builds the recurrent detector from a trained per-frame detector.
template <typename T>
ModelParams<T> init_recurrent_detector(const ModelParams<T>& base, const RecurrentInit& init,
                                       std::uint64_t seed);

struct ForwardOptions {
  RecurrenceOptions recurrence;
  std::size_t pool = 5;
};

// One window of consecutive frames. `features` may be left empty, in which case they are
// computed from `images` with the model's backbone.
template <typename T>
struct WindowInput {
  std::vector<Tensor<T>> images;
  std::vector<Tensor<T>> features;
  std::size_t length() const { return images.empty() ? features.size() : images.size(); }
};

template <typename T>
struct WindowForward {
  std::vector<BackboneCache<T>> backbone;  // per-frame detector only
  std::vector<Tensor<T>> features;
  std::vector<Tensor<T>> static_pre;       // per-frame detector only
  BidirectionalCache<T> memory;            // recurrent detector only
  std::vector<Tensor<T>> maps;             // per frame, fed to ROI pooling
  double spatial_scale = 0.25;
};

template <typename T>
WindowForward<T> forward_window(const ModelParams<T>& p, const ForwardOptions& opts,
                                const WindowInput<T>& in);

struct FrameTargets {
  std::vector<Box> boxes;
  std::vector<ProposalTarget> targets;
};

// Sum over frames of the per-frame detection loss. With grads != nullptr the gradients of
// the trainable tensors are accumulated into *grads.
template <typename T>
double window_loss(const ModelParams<T>& p, const ForwardOptions& opts, const WindowInput<T>& in,
                   const std::vector<FrameTargets>& targets, ModelParams<T>* grads = nullptr);

struct DetectConfig {
  double score_threshold = 0.01;
  double nms_iou = 0.5;
  std::size_t max_per_frame = 20;
};

// Per-frame detections from the anchor grid: per class decode, threshold, per_frame_nms,
// top max_per_frame by score.
template <typename T>
DetectionSequence detect_window(const ModelParams<T>& p, const WindowForward<T>& fwd,
                                const std::vector<Box>& anchors, std::size_t img_w,
                                std::size_t img_h, const DetectConfig& cfg,
                                std::size_t first_frame = 0);

// SGD with classical momentum over the trainable tensors.
template <typename T>
class Sgd {
 public:
  explicit Sgd(double momentum = 0.9) : momentum_(momentum) {}
  void step(ModelParams<T>& p, const ModelParams<T>& grads, double lr);

 private:
  double momentum_;
  std::vector<Tensor<T>> velocity_;
};

template <typename T>
double grad_norm(const ModelParams<T>& grads);

}  // namespace stmn
