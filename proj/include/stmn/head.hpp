#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "stmn/ops.hpp"
#include "stmn/random.hpp"
#include "stmn/tensor.hpp"

namespace stmn {

// Axis-aligned box in continuous image coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return valid() ? width() * height() : 0.0; }
  bool valid() const { return x2 > x1 && y2 > y1; }
  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

// Clips to [0, w] x [0, h].
Box clip_box(const Box& b, double img_w, double img_h);

// Class 0 is background; foreground classes are 1..C.
struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  std::size_t frame = 0;
  bool operator==(const Detection&) const = default;
};

struct ProposalConfig {
  std::size_t stride = 4;                    // anchor centre spacing in pixels
  std::vector<double> scales{8.0, 12.0, 16.0};  // square anchor sides
  std::size_t jitter_per_gt = 4;
  double jitter = 0.2;                       // max shift / resize as a fraction of the box size
};

std::vector<Box> anchor_grid(std::size_t img_h, std::size_t img_w, const ProposalConfig& cfg);

// Anchor grid followed by jitter_per_gt perturbed copies of every ground-truth box.
std::vector<Box> generate_proposals(const std::vector<Box>& gt, std::size_t img_h,
                                    std::size_t img_w, Rng& rng, const ProposalConfig& cfg);

// (dx, dy, dw, dh): centre shift relative to the proposal size, log size ratio.
using Deltas = std::array<double, 4>;

Deltas encode_deltas(const Box& proposal, const Box& target);
Box decode_deltas(const Box& proposal, const Deltas& d);
// decode + clip; empty when the result degenerates.
std::optional<Box> apply_deltas(const Box& proposal, const Deltas& d, double img_w, double img_h);

double smooth_l1(double u);
double smooth_l1_grad(double u);

template <typename T>
struct RoiPooled {
  Tensor<T> pooled;                          // g x g x D
  std::vector<std::ptrdiff_t> argmax;        // flat source index per output, -1 for empty bins
};

// Max pooling over g x g sub-cells of the box mapped onto the map by spatial_scale.
template <typename T>
RoiPooled<T> roi_pool(const Tensor<T>& map, const Box& box, std::size_t g, double spatial_scale);

// grad_map += scatter of grad_pooled through the recorded argmax.
template <typename T>
void roi_pool_backward(const RoiPooled<T>& fwd, const Tensor<T>& grad_pooled, Tensor<T>& grad_map);

// Linear classification and regression layers over flattened pooled features.
template <typename T>
struct HeadParams {
  Tensor<T> cls_w;  // F x (C + 1)
  Tensor<T> cls_b;  // C + 1
  Tensor<T> reg_w;  // F x 4C
  Tensor<T> reg_b;  // 4C

  static HeadParams zeros(std::size_t features, std::size_t num_classes);
  static HeadParams random(std::size_t features, std::size_t num_classes, std::uint64_t seed);

  std::size_t in_features() const { return cls_w.dim(0); }
  std::size_t num_classes() const { return cls_w.dim(1) - 1; }

  template <typename F>
  void for_each(F&& f) {
    f("cls_w", cls_w); f("cls_b", cls_b); f("reg_w", reg_w); f("reg_b", reg_b);
  }
  template <typename F>
  void for_each(F&& f) const {
    f("cls_w", cls_w); f("cls_b", cls_b); f("reg_w", reg_w); f("reg_b", reg_b);
  }

  bool operator==(const HeadParams&) const = default;
};

template <typename T>
struct Prediction {
  std::vector<T> logits;  // C + 1
  std::vector<T> probs;   // softmax(logits)
  std::vector<T> deltas;  // 4 per foreground class, class c at [4(c-1), 4c)
};

template <typename T>
Prediction<T> predict(const Tensor<T>& pooled, const HeadParams<T>& hp);

// Returns the gradient w.r.t. pooled and accumulates parameter gradients into grads.
template <typename T>
Tensor<T> predict_backward(const Tensor<T>& pooled, const HeadParams<T>& hp,
                           const std::vector<T>& grad_logits, const std::vector<T>& grad_deltas,
                           HeadParams<T>& grads);

// Training target of one sampled proposal. label 0 is background.
struct ProposalTarget {
  int label = 0;
  Deltas deltas{};
};

struct LabelingConfig {
  double fg_iou = 0.5;
  double bg_iou = 0.4;
  std::size_t max_fg = 8;
  std::size_t bg_per_fg = 3;
  std::size_t min_bg = 4;  // background samples drawn even when no foreground exists
};

struct LabeledProposal {
  std::size_t index = 0;  // into the proposal list
  ProposalTarget target;
};

// Labels by best IoU against gt (fg >= fg_iou, bg < bg_iou, ignored in between) and samples
// up to max_fg foreground and bg_per_fg times as many background proposals.
std::vector<LabeledProposal> sample_targets(const std::vector<Box>& proposals,
                                            const std::vector<Box>& gt,
                                            const std::vector<int>& gt_classes, Rng& rng,
                                            const LabelingConfig& cfg);

template <typename T>
struct LossResult {
  double total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  std::vector<std::vector<T>> grad_logits;
  std::vector<std::vector<T>> grad_deltas;
};

// Mean cross-entropy over all predictions plus mean smooth-L1 (summed over the 4
// coordinates of the target class) over foreground predictions.
template <typename T>
LossResult<T> detection_loss(const std::vector<Prediction<T>>& preds,
                             const std::vector<ProposalTarget>& targets);

}  // namespace stmn
