#include "stmn/seqnms.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <string>

namespace stmn {

std::vector<Detection> per_frame_nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> removed(dets.size(), false);
  std::vector<Detection> kept;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!removed[j] && dets[j].class_id == dets[i].class_id &&
          iou(dets[i].box, dets[j].box) > iou_threshold) {
        removed[j] = true;
      }
    }
  }
  return kept;
}

RescoreMode parse_rescore_mode(std::string_view s) {
  if (s == "avg") return RescoreMode::avg;
  if (s == "max") return RescoreMode::max;
  throw ConfigError("unknown rescore mode '" + std::string(s) + "'");
}

namespace {

struct ClassView {
  // frame -> indices into seq[frame] of this class
  std::vector<std::vector<std::size_t>> members;
};

double rescore(const std::vector<double>& scores, RescoreMode mode) {
  if (mode == RescoreMode::max) return *std::max_element(scores.begin(), scores.end());
  // Offsets from the first score keep an all-equal path bit-identical.
  const double s0 = scores.front();
  double acc = 0.0;
  for (double s : scores) acc += s - s0;
  return s0 + acc / static_cast<double>(scores.size());
}

}  // namespace

SeqNmsResult seq_nms_paths(const DetectionSequence& seq, const SeqNmsConfig& cfg) {
  SeqNmsResult result;
  const std::size_t n = seq.size();
  if (n == 0) return result;

  std::map<int, ClassView> classes;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < seq[t].size(); ++i) {
      auto& cv = classes[seq[t][i].class_id];
      cv.members.resize(n);
      cv.members[t].push_back(i);
    }
  }

  // Final score per input box; negative means dropped.
  std::vector<std::vector<double>> final_score(n);
  for (std::size_t t = 0; t < n; ++t) final_score[t].assign(seq[t].size(), -1.0);

  auto box = [&](std::size_t t, std::size_t i) -> const Box& { return seq[t][i].box; };

  for (auto& [cls, cv] : classes) {
    std::vector<std::vector<bool>> active(n);
    for (std::size_t t = 0; t < n; ++t) active[t].assign(cv.members[t].size(), true);

    while (true) {
      // best[t][k]: maximum score of a linked path ending at member k of frame t.
      std::vector<std::vector<double>> best(n);
      std::vector<std::vector<std::ptrdiff_t>> pred(n);
      double top = 0.0;
      std::ptrdiff_t top_t = -1, top_k = -1;
      for (std::size_t t = 0; t < n; ++t) {
        const auto& mem = cv.members[t];
        best[t].assign(mem.size(), 0.0);
        pred[t].assign(mem.size(), -1);
        for (std::size_t k = 0; k < mem.size(); ++k) {
          if (!active[t][k]) continue;
          double carry = 0.0;
          std::ptrdiff_t from = -1;
          if (t > 0) {
            const auto& prev = cv.members[t - 1];
            for (std::size_t j = 0; j < prev.size(); ++j) {
              if (!active[t - 1][j]) continue;
              if (iou(box(t - 1, prev[j]), box(t, mem[k])) < cfg.link_iou) continue;
              if (from < 0 || best[t - 1][j] > carry) {
                carry = best[t - 1][j];
                from = static_cast<std::ptrdiff_t>(j);
              }
            }
          }
          best[t][k] = seq[t][mem[k]].score + carry;
          pred[t][k] = from;
          if (best[t][k] > top) {
            top = best[t][k];
            top_t = static_cast<std::ptrdiff_t>(t);
            top_k = static_cast<std::ptrdiff_t>(k);
          }
        }
      }
      if (top_t < 0) break;

      SeqNmsPath path;
      path.class_id = cls;
      path.total = top;
      std::vector<std::pair<std::size_t, std::size_t>> members;  // (frame, member slot)
      for (std::ptrdiff_t t = top_t, k = top_k; k >= 0; --t) {
        members.emplace_back(static_cast<std::size_t>(t), static_cast<std::size_t>(k));
        k = pred[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
      }
      std::reverse(members.begin(), members.end());
      std::vector<double> scores;
      for (auto [t, k] : members) {
        path.nodes.push_back({t, cv.members[t][k]});
        scores.push_back(seq[t][cv.members[t][k]].score);
      }
      path.rescored = rescore(scores, cfg.rescore);

      for (auto [t, k] : members) {
        active[t][k] = false;
        final_score[t][cv.members[t][k]] = path.rescored;
      }
      for (auto [t, k] : members) {
        const Box& pb = box(t, cv.members[t][k]);
        for (std::size_t j = 0; j < cv.members[t].size(); ++j) {
          if (active[t][j] && iou(pb, box(t, cv.members[t][j])) > cfg.suppress_iou) active[t][j] = false;
        }
        for (std::size_t u : {t - 1, t + 1}) {
          if (u >= n) continue;  // wraps for t == 0
          for (std::size_t j = 0; j < cv.members[u].size(); ++j) {
            if (active[u][j] && iou(pb, box(u, cv.members[u][j])) >= cfg.link_iou) active[u][j] = false;
          }
        }
      }
      result.paths.push_back(std::move(path));
    }
  }

  result.sequence.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t i = 0; i < seq[t].size(); ++i) {
      if (final_score[t][i] < 0.0) continue;
      Detection d = seq[t][i];
      d.score = final_score[t][i];
      result.sequence[t].push_back(d);
    }
  }
  return result;
}

DetectionSequence seq_nms(const DetectionSequence& seq, const SeqNmsConfig& cfg) {
  return seq_nms_paths(seq, cfg).sequence;
}

}  // namespace stmn
