#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "stmn/head.hpp"

namespace stmn {

// Per-frame detection lists of one window; position in the outer vector is the frame.
using DetectionSequence = std::vector<std::vector<Detection>>;

// Greedy suppression of same-class boxes with IoU > iou_threshold, highest score first,
// ties to the lower index. Survivors are returned in selection order.
std::vector<Detection> per_frame_nms(const std::vector<Detection>& dets, double iou_threshold);

enum class RescoreMode { avg, max };

RescoreMode parse_rescore_mode(std::string_view s);

struct SeqNmsConfig {
  double link_iou = 0.5;      // consecutive boxes link when IoU >= this
  double suppress_iou = 0.3;  // same-frame suppression around a path box
  RescoreMode rescore = RescoreMode::avg;
};

struct PathNode {
  std::size_t frame = 0;
  std::size_t index = 0;  // into the input list of that frame
  bool operator==(const PathNode&) const = default;
};

struct SeqNmsPath {
  int class_id = 0;
  std::vector<PathNode> nodes;  // consecutive frames
  double total = 0.0;           // input score sum along the path
  double rescored = 0.0;
};

struct SeqNmsResult {
  DetectionSequence sequence;
  std::vector<SeqNmsPath> paths;  // per class ascending, in selection order
};

// Repeatedly selects the maximum-score linked path per class, rescores its boxes and
// suppresses same-class boxes that overlap a path box in its frame (IoU > suppress_iou)
// or link to a path box from an adjacent frame. Boxes never placed on a positive-score
// path are dropped. Output lists keep the input order within each frame.
SeqNmsResult seq_nms_paths(const DetectionSequence& seq, const SeqNmsConfig& cfg = {});

DetectionSequence seq_nms(const DetectionSequence& seq, const SeqNmsConfig& cfg = {});

}  // namespace stmn
