#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "stmn/head.hpp"
#include "stmn/seqnms.hpp"

namespace stmn {

struct VideoDetection {
  std::string video_id;
  Detection det;  // det.frame indexes the video
  bool operator==(const VideoDetection&) const = default;
};

struct GtInstance {
  std::string video_id;
  std::size_t frame = 0;
  int class_id = 0;
  Box box;
};

struct MapReport {
  std::map<int, double> ap;             // classes with at least one GT instance
  std::map<int, std::size_t> gt_count;
  double map = 0.0;
};

// All-point interpolated AP from detection outcomes sorted by descending score.
double average_precision(const std::vector<bool>& tp, std::size_t n_gt);

// Greedy matching in descending score order (ties broken by video, frame, box) to the
// unmatched same-class GT of highest IoU >= iou_threshold; everything else is a false positive.
MapReport compute_map(const std::vector<VideoDetection>& dets, const std::vector<GtInstance>& gts,
                      double iou_threshold = 0.5);

struct Window {
  std::size_t begin = 0, end = 0;  // [begin, end)
  double center() const { return 0.5 * static_cast<double>(begin + end - 1); }
  std::size_t length() const { return end - begin; }
  bool operator==(const Window&) const = default;
};

// Windows of length T at stride ceil(T / 2); the last one is shifted back to end at the final
// frame. A sequence shorter than T gets one truncated window.
std::vector<Window> sliding_windows(std::size_t length, std::size_t T);

// For each frame, the index of the covering window whose centre is nearest (ties to the earlier).
std::vector<std::size_t> assign_frames(const std::vector<Window>& windows, std::size_t length);

// One JSON object per line: {video_id, frame, class, score, x1, y1, x2, y2}.
void write_detections_jsonl(std::ostream& os, const std::vector<VideoDetection>& dets);
std::vector<VideoDetection> read_detections_jsonl(std::istream& is);

// Groups detections per video into frame lists (frames 0..max seen), runs seq_nms and flattens
// the result back, videos in lexicographic order.
std::vector<VideoDetection> seq_nms_videos(const std::vector<VideoDetection>& dets, const SeqNmsConfig& cfg);

}  // namespace stmn
