#include "stmn/evaluation.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <tuple>

#include <json.hpp>

#include "stmn/errors.hpp"

namespace stmn {

double average_precision(const std::vector<bool>& tp, std::size_t n_gt) {
  if (n_gt == 0) return 0.0;
  const std::size_t n = tp.size();
  std::vector<double> rec(n), prec(n);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    hits += tp[i];
    rec[i] = static_cast<double>(hits) / static_cast<double>(n_gt);
    prec[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  // Precision envelope, then area under the recall steps.
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0.0, prev_rec = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (rec[i] != prev_rec) {
      ap += (rec[i] - prev_rec) * prec[i];
      prev_rec = rec[i];
    }
  }
  return ap;
}

MapReport compute_map(const std::vector<VideoDetection>& dets, const std::vector<GtInstance>& gts,
                      double iou_threshold) {
  MapReport report;
  std::set<int> classes;
  for (const auto& g : gts) {
    classes.insert(g.class_id);
    ++report.gt_count[g.class_id];
  }
  for (int cls : classes) {
    std::map<std::pair<std::string, std::size_t>, std::vector<std::size_t>> by_frame;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      if (gts[i].class_id == cls) by_frame[{gts[i].video_id, gts[i].frame}].push_back(i);
    }
    std::vector<const VideoDetection*> cd;
    for (const auto& d : dets)
      if (d.det.class_id == cls) cd.push_back(&d);
    std::sort(cd.begin(), cd.end(), [](const VideoDetection* a, const VideoDetection* b) {
      if (a->det.score != b->det.score) return a->det.score > b->det.score;
      if (a->video_id != b->video_id) return a->video_id < b->video_id;
      const Box& p = a->det.box;
      const Box& q = b->det.box;
      return std::tie(a->det.frame, p.x1, p.y1, p.x2, p.y2) < std::tie(b->det.frame, q.x1, q.y1, q.x2, q.y2);
    });
    std::vector<bool> matched(gts.size(), false), tp;
    for (const auto* d : cd) {
      const auto it = by_frame.find({d->video_id, d->det.frame});
      double best = iou_threshold;
      std::ptrdiff_t arg = -1;
      if (it != by_frame.end()) {
        for (std::size_t gi : it->second) {
          if (matched[gi]) continue;
          const double v = iou(d->det.box, gts[gi].box);
          if (v >= best && (arg < 0 || v > best)) {
            best = v;
            arg = static_cast<std::ptrdiff_t>(gi);
          }
        }
      }
      if (arg >= 0) matched[static_cast<std::size_t>(arg)] = true;
      tp.push_back(arg >= 0);
    }
    report.ap[cls] = average_precision(tp, report.gt_count[cls]);
  }
  if (!report.ap.empty()) {
    double s = 0.0;
    for (const auto& [c, v] : report.ap) s += v;
    report.map = s / static_cast<double>(report.ap.size());
  }
  return report;
}

std::vector<Window> sliding_windows(std::size_t length, std::size_t T) {
  if (T == 0) throw UsageError("sliding_windows: window length must be positive");
  if (length == 0) return {};
  if (length <= T) return {{0, length}};
  const std::size_t stride = (T + 1) / 2;
  std::vector<Window> out;
  for (std::size_t s = 0; s + T < length; s += stride) out.push_back({s, s + T});
  if (out.empty() || out.back().end != length) out.push_back({length - T, length});
  return out;
}

std::vector<std::size_t> assign_frames(const std::vector<Window>& windows, std::size_t length) {
  std::vector<std::size_t> owner(length);
  for (std::size_t f = 0; f < length; ++f) {
    double best = 0.0;
    bool found = false;
    for (std::size_t w = 0; w < windows.size(); ++w) {
      if (f < windows[w].begin || f >= windows[w].end) continue;
      const double d = std::abs(static_cast<double>(f) - windows[w].center());
      if (!found || d < best) {
        best = d;
        owner[f] = w;
        found = true;
      }
    }
    if (!found) throw UsageError("assign_frames: frame " + std::to_string(f) + " is not covered");
  }
  return owner;
}

void write_detections_jsonl(std::ostream& os, const std::vector<VideoDetection>& dets) {
  for (const auto& d : dets) {
    nlohmann::ordered_json j;
    j["video_id"] = d.video_id;
    j["frame"] = d.det.frame;
    j["class"] = d.det.class_id;
    j["score"] = d.det.score;
    j["x1"] = d.det.box.x1;
    j["y1"] = d.det.box.y1;
    j["x2"] = d.det.box.x2;
    j["y2"] = d.det.box.y2;
    os << j.dump() << "\n";
  }
}

std::vector<VideoDetection> read_detections_jsonl(std::istream& is) {
  std::vector<VideoDetection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      VideoDetection d;
      d.video_id = j.at("video_id");
      d.det.frame = j.at("frame");
      d.det.class_id = j.at("class");
      d.det.score = j.at("score");
      d.det.box = {j.at("x1"), j.at("y1"), j.at("x2"), j.at("y2")};
      out.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("detections line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<VideoDetection> seq_nms_videos(const std::vector<VideoDetection>& dets, const SeqNmsConfig& cfg) {
  std::map<std::string, DetectionSequence> videos;
  for (const auto& d : dets) {
    auto& seq = videos[d.video_id];
    if (seq.size() <= d.det.frame) seq.resize(d.det.frame + 1);
    seq[d.det.frame].push_back(d.det);
  }
  std::vector<VideoDetection> out;
  for (const auto& [id, seq] : videos) {
    for (const auto& frame : seq_nms(seq, cfg))
      for (const auto& d : frame) out.push_back({id, d});
  }
  return out;
}

}  // namespace stmn
