#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "stmn/finite_diff.hpp"
#include "stmn/head.hpp"
#include "test_util.hpp"

namespace stmn {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

TEST(Box, Iou) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {5, 0, 15, 10}), 50.0 / 150.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {10, 0, 20, 10}), 0.0);
}

TEST(Proposals, AnchorGridOnlyIsDeterministic) {
  ProposalConfig cfg;
  Rng a(1), b(2);
  const auto p1 = generate_proposals({}, 48, 48, a, cfg);
  const auto p2 = generate_proposals({}, 48, 48, b, cfg);
  EXPECT_EQ(p1, p2);
  EXPECT_EQ(p1, anchor_grid(48, 48, cfg));
  EXPECT_EQ(p1.size(), 12u * 12u * 3u);
  for (const auto& box : p1) {
    EXPECT_TRUE(box.valid());
    EXPECT_GE(box.x1, 0.0);
    EXPECT_LE(box.x2, 48.0);
  }
}

TEST(Proposals, ZeroJitterKeepsGroundTruth) {
  ProposalConfig cfg;
  cfg.jitter = 0.0;
  cfg.jitter_per_gt = 2;
  Rng rng(3);
  const std::vector<Box> gt{{4, 5, 17, 20}, {30, 30, 41, 40}};
  const auto p = generate_proposals(gt, 48, 48, rng, cfg);
  const std::size_t grid = anchor_grid(48, 48, cfg).size();
  ASSERT_EQ(p.size(), grid + 4);
  EXPECT_EQ(p[grid], gt[0]);
  EXPECT_EQ(p[grid + 1], gt[0]);
  EXPECT_EQ(p[grid + 3], gt[1]);
}

TEST(Proposals, JitterStaysNearSource) {
  ProposalConfig cfg;
  cfg.jitter_per_gt = 1;
  Rng rng(4);
  std::uniform_real_distribution<double> pos(2, 30), size(8, 16);
  int close = 0;
  const int draws = 2000;
  const std::size_t grid = anchor_grid(48, 48, cfg).size();
  for (int i = 0; i < draws; ++i) {
    const double x = pos(rng), y = pos(rng);
    const Box gt{x, y, x + size(rng), y + size(rng)};
    const auto p = generate_proposals({gt}, 48, 48, rng, cfg);
    if (p.size() > grid && iou(p[grid], gt) > 0.3) ++close;
  }
  EXPECT_GE(close, draws * 95 / 100);
}

TEST(Proposals, Errors) {
  Rng rng(5);
  EXPECT_THROW(generate_proposals({}, 0, 48, rng, ProposalConfig{}), UsageError);
  ProposalConfig cfg;
  cfg.jitter_per_gt = 0;
  EXPECT_THROW(generate_proposals({}, 48, 48, rng, cfg), UsageError);
}

TEST(Deltas, ZeroIsIdentityAndShift) {
  const Box b{10, 20, 30, 60};
  EXPECT_EQ(decode_deltas(b, {0, 0, 0, 0}), b);
  const Box s = decode_deltas(b, {0.1, 0, 0, 0});
  EXPECT_NEAR((s.x1 + s.x2) / 2 - 20.0, 0.1 * 20.0, 1e-12);
  EXPECT_NEAR(s.width(), 20.0, 1e-12);
}

TEST(Deltas, RoundTrip) {
  Rng rng(6);
  std::uniform_real_distribution<double> pos(0, 40), size(2, 20);
  for (int i = 0; i < 1000; ++i) {
    const Box p{pos(rng), pos(rng), 0, 0};
    const Box pp{p.x1, p.y1, p.x1 + size(rng), p.y1 + size(rng)};
    const Box t{pos(rng), pos(rng), 0, 0};
    const Box tt{t.x1, t.y1, t.x1 + size(rng), t.y1 + size(rng)};
    const Box back = decode_deltas(pp, encode_deltas(pp, tt));
    EXPECT_NEAR(back.x1, tt.x1, 1e-9);
    EXPECT_NEAR(back.y2, tt.y2, 1e-9);
    const auto d = encode_deltas(pp, decode_deltas(pp, {0.3, -0.2, 0.5, -0.7}));
    EXPECT_NEAR(d[2], 0.5, 1e-9);
  }
}

TEST(Deltas, ApplyClipsAndDropsDegenerate) {
  const auto clipped = apply_deltas({40, 40, 48, 48}, {0.5, 0.5, 0, 0}, 48, 48);
  ASSERT_TRUE(clipped.has_value());
  EXPECT_EQ(clipped->x2, 48.0);
  EXPECT_FALSE(apply_deltas({40, 40, 48, 48}, {2.0, 0, 0, 0}, 48, 48).has_value());
}

TEST(SmoothL1, ClosedForm) {
  EXPECT_DOUBLE_EQ(smooth_l1(0.5), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(2.0), 1.5);
  EXPECT_DOUBLE_EQ(smooth_l1(-2.0), 1.5);
}

TEST(RoiPool, WholeMapSingleCellIsGlobalMax) {
  Rng rng(7);
  const auto m = random_tensor<double>({6, 5, 3}, rng);
  const auto r = roi_pool(m, {0, 0, 20, 24}, 1, 0.25);
  for (std::size_t d = 0; d < 3; ++d) {
    double mx = -1e300;
    for (std::size_t i = d; i < m.size(); i += 3) mx = std::max(mx, m[i]);
    EXPECT_EQ(r.pooled[d], mx);
  }
}

TEST(RoiPool, ConstantMap) {
  const auto m = Tensor<double>::filled({8, 8, 2}, 0.3);
  const auto r = roi_pool(m, {3, 5, 17, 21}, 5, 0.25);
  for (double v : r.pooled.values()) EXPECT_EQ(v, 0.3);
}

// Independent loop oracle: each map cell is tested for membership in each bin.
Tensor<double> roi_oracle(const Tensor<double>& m, const Box& b, std::size_t g, double s) {
  const long H = static_cast<long>(m.height()), W = static_cast<long>(m.width());
  const long ys = static_cast<long>(std::floor(b.y1 * s)), ye = static_cast<long>(std::ceil(b.y2 * s));
  const long xs = static_cast<long>(std::floor(b.x1 * s)), xe = static_cast<long>(std::ceil(b.x2 * s));
  const double lh = static_cast<double>(std::max(ye - ys, 1L)), lw = static_cast<double>(std::max(xe - xs, 1L));
  const double G = static_cast<double>(g);
  Tensor<double> out({g, g, m.channels()});
  Tensor<double> seen({g, g, 1});
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px)
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
          const double ry = static_cast<double>(y - ys), rx = static_cast<double>(x - xs);
          const bool in_y = ry >= std::floor(py * lh / G) && ry < std::ceil((py + 1) * lh / G);
          const bool in_x = rx >= std::floor(px * lw / G) && rx < std::ceil((px + 1) * lw / G);
          if (!in_y || !in_x) continue;
          for (std::size_t d = 0; d < m.channels(); ++d) {
            double& o = out.at(py, px, d);
            if (seen.at(py, px, 0) == 0.0 || m.at(y, x, d) > o) o = m.at(y, x, d);
          }
          seen.at(py, px, 0) = 1.0;
        }
  return out;
}

TEST(RoiPool, MatchesLoopOracle) {
  Rng rng(8);
  std::uniform_real_distribution<double> pos(-6, 40), size(1, 30);
  for (int trial = 0; trial < 500; ++trial) {
    const auto m = random_tensor<double>({12, 12, 3}, rng);
    const double x = pos(rng), y = pos(rng);
    const Box b{x, y, x + size(rng), y + size(rng)};
    if (b.x2 <= 0 || b.y2 <= 0) continue;
    const std::size_t g = 1 + static_cast<std::size_t>(trial) % 5;
    EXPECT_EQ(roi_pool(m, b, g, 0.25).pooled, roi_oracle(m, b, g, 0.25)) << "trial " << trial;
  }
}

TEST(RoiPool, Errors) {
  const Tensor<double> m({4, 4, 1});
  EXPECT_THROW(roi_pool(m, {5, 5, 5, 9}, 2, 1.0), UsageError);
  EXPECT_THROW(roi_pool(m, {10, 10, 20, 20}, 2, 1.0), UsageError);
}

TEST(Predict, ZeroWeightsGiveUniformScores) {
  const auto hp = HeadParams<double>::zeros(12, 4);
  Rng rng(9);
  const auto p = predict(random_tensor<double>({2, 2, 3}, rng), hp);
  for (double v : p.probs) EXPECT_DOUBLE_EQ(v, 0.2);
  for (double v : p.deltas) EXPECT_EQ(v, 0.0);
}

TEST(Predict, SoftmaxNormalized) {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    auto hp = HeadParams<float>::zeros(8, 4);
    hp.cls_w = random_tensor<float>(hp.cls_w.dims(), rng, -20, 20);
    const auto p = predict(random_tensor<float>({2, 2, 2}, rng), hp);
    double s = 0;
    for (float v : p.probs) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Predict, ShapeMismatch) {
  EXPECT_THROW(predict(Tensor<double>({2, 2, 2}), HeadParams<double>::zeros(9, 4)), ShapeError);
}

// Scalar reimplementation of the loss from logits and deltas.
double loss_oracle(const std::vector<Prediction<double>>& preds, const std::vector<ProposalTarget>& t) {
  double ce = 0, reg = 0;
  int fg = 0;
  for (const auto& x : t) fg += x.label > 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    double z = 0;
    for (double l : preds[i].logits) z += std::exp(l);
    ce += -std::log(std::exp(preds[i].logits[static_cast<std::size_t>(t[i].label)]) / z);
    if (t[i].label > 0) {
      for (int j = 0; j < 4; ++j) {
        const double u = preds[i].deltas[static_cast<std::size_t>(4 * (t[i].label - 1) + j)] - t[i].deltas[static_cast<std::size_t>(j)];
        reg += std::abs(u) < 1 ? 0.5 * u * u : std::abs(u) - 0.5;
      }
    }
  }
  return ce / static_cast<double>(preds.size()) + (fg ? reg / fg : 0.0);
}

TEST(DetectionLoss, PerfectPredictionIsZero) {
  Prediction<double> p;
  p.logits = {0, 0, 800, 0, 0};
  p.probs = {0, 0, 1, 0, 0};
  p.deltas.assign(16, 0.0);
  p.deltas[4] = 0.25;
  const auto r = detection_loss<double>({p}, {{2, {0.25, 0, 0, 0}}});
  EXPECT_EQ(r.total, 0.0);
}

TEST(DetectionLoss, MatchesScalarReimplementation) {
  Rng rng(11);
  std::uniform_int_distribution<int> lab(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Prediction<double>> preds;
    std::vector<ProposalTarget> targets;
    auto hp = HeadParams<double>::random(18, 4, static_cast<std::uint64_t>(trial));
    hp.cls_w = random_tensor<double>(hp.cls_w.dims(), rng, -1, 1);
    hp.reg_w = random_tensor<double>(hp.reg_w.dims(), rng, -1, 1);
    for (int i = 0; i < 6; ++i) {
      preds.push_back(predict(random_tensor<double>({3, 3, 2}, rng), hp));
      ProposalTarget t;
      t.label = lab(rng);
      for (auto& d : t.deltas) d = std::uniform_real_distribution<double>(-2, 2)(rng);
      targets.push_back(t);
    }
    const auto r = detection_loss(preds, targets);
    EXPECT_NEAR(r.total, loss_oracle(preds, targets), 1e-12);
    EXPECT_GE(r.total, 0.0);
  }
  EXPECT_THROW(detection_loss<double>({}, {}), UsageError);
}

// Loss through roi_pool and the head, differentiated w.r.t. the map and every head parameter.
TEST(HeadBackward, MatchesFiniteDifferences) {
  Rng rng(12);
  const std::vector<Box> boxes{{2, 3, 20, 25}, {10, 0, 28, 14}, {0, 12, 16, 28}};
  const std::vector<ProposalTarget> targets{{1, {0.1, -0.3, 0.2, 0.05}}, {0, {}}, {3, {2.0, 0.4, -1.5, 0.3}}};
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_tensor<double>({7, 7, 4}, rng);
    auto hp = HeadParams<double>::random(36, 3, static_cast<std::uint64_t>(trial));
    hp.cls_w = random_tensor<double>(hp.cls_w.dims(), rng, -0.5, 0.5);
    hp.reg_w = random_tensor<double>(hp.reg_w.dims(), rng, -0.5, 0.5);
    hp.reg_b = random_tensor<double>(hp.reg_b.dims(), rng, -0.5, 0.5);

    auto eval = [&](const Tensor<double>& map, const HeadParams<double>& h) {
      std::vector<Prediction<double>> preds;
      for (const auto& b : boxes) preds.push_back(predict(roi_pool(map, b, 3, 0.25).pooled, h));
      return preds;
    };
    // Kinks: argmax changes inside a bin, and smooth-L1 breakpoints |u| = 1.
    std::vector<RoiPooled<double>> ref;
    for (const auto& b : boxes) ref.push_back(roi_pool(m, b, 3, 0.25));
    auto kinks = [&](const Tensor<double>& map, const HeadParams<double>& h) {
      std::vector<double> k;
      for (std::size_t bi = 0; bi < boxes.size(); ++bi) {
        const auto cur = roi_pool(map, boxes[bi], 3, 0.25);
        for (std::size_t i = 0; i < cur.pooled.size(); ++i) {
          const double margin = map[static_cast<std::size_t>(ref[bi].argmax[i])] - cur.pooled[i];
          k.push_back(cur.argmax[i] == ref[bi].argmax[i] ? 1.0 : (margin == 0.0 ? -1.0 : margin));
        }
      }
      const auto preds = eval(map, h);
      for (std::size_t i = 0; i < preds.size(); ++i) {
        if (targets[i].label == 0) continue;
        for (std::size_t j = 0; j < 4; ++j) {
          const double u = preds[i].deltas[4 * static_cast<std::size_t>(targets[i].label - 1) + j] - targets[i].deltas[j];
          k.push_back(std::abs(u) - 1.0);
        }
      }
      return k;
    };
    auto loss = [&](const Tensor<double>& map, const HeadParams<double>& h) {
      return detection_loss(eval(map, h), targets).total;
    };

    const auto preds = eval(m, hp);
    const auto lr = detection_loss(preds, targets);
    auto grads = HeadParams<double>::zeros(36, 3);
    Tensor<double> gmap(m.dims());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const auto gp = predict_backward(ref[i].pooled, hp, lr.grad_logits[i], lr.grad_deltas[i], grads);
      roi_pool_backward(ref[i], gp, gmap);
    }

    const auto nm = finite_diff<double>([&](const Tensor<double>& t) { return loss(t, hp); }, m, 1e-3,
                                        [&](const Tensor<double>& t) { return kinks(t, hp); }, FdScheme::richardson);
    EXPECT_LT(max_relative_error(gmap, nm.grad, nm.accepted), 1e-5);
    HeadParams<double> hh = hp;
    hh.for_each([&](const char* name, Tensor<double>& w) {
      const Tensor<double> orig = w;
      const auto nw = finite_diff<double>(
          [&](const Tensor<double>& t) { w = t; const double v = loss(m, hh); w = orig; return v; }, orig, 1e-3,
          [&](const Tensor<double>& t) { w = t; auto v = kinks(m, hh); w = orig; return v; }, FdScheme::richardson);
      grads.for_each([&](const char* n2, const Tensor<double>& g) {
        if (std::string_view(n2) == name) EXPECT_LT(max_relative_error(g, nw.grad, nw.accepted), 1e-5) << name;
      });
    });
  }
}

TEST(SampleTargets, LabelsAndSampling) {
  const std::vector<Box> gt{{0, 0, 10, 10}, {20, 20, 30, 30}};
  const std::vector<int> cls{2, 3};
  std::vector<Box> props{{0, 0, 10, 10}, {1, 1, 11, 11}, {20, 20, 30, 30}, {40, 40, 48, 48}, {0, 0, 10, 20}};
  for (int i = 0; i < 20; ++i) props.push_back({40.0 - i, 0, 48.0 - i, 8});
  Rng rng(13);
  const auto s = sample_targets(props, gt, cls, rng, LabelingConfig{});
  std::size_t fg = 0, bg = 0;
  for (const auto& lp : s) {
    if (lp.target.label > 0) {
      ++fg;
      const std::size_t j = iou(props[lp.index], gt[0]) > iou(props[lp.index], gt[1]) ? 0 : 1;
      EXPECT_EQ(lp.target.label, cls[j]);
    } else {
      ++bg;
      EXPECT_LT(std::max(iou(props[lp.index], gt[0]), iou(props[lp.index], gt[1])), 0.4);
    }
  }
  EXPECT_EQ(fg, 4u);  // indices 0, 1, 2, 4 (IoU 0.5 counts as foreground)
  EXPECT_EQ(bg, 12u);
}

TEST(SampleTargets, SwappingGtPermutesLabels) {
  const std::vector<Box> gt{{0, 0, 10, 10}, {20, 20, 30, 30}};
  const std::vector<Box> props = anchor_grid(48, 48, ProposalConfig{});
  Rng a(14), b(14);
  const auto s1 = sample_targets(props, gt, {1, 2}, a, LabelingConfig{});
  const auto s2 = sample_targets(props, {gt[1], gt[0]}, {2, 1}, b, LabelingConfig{});
  ASSERT_EQ(s1.size(), s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    EXPECT_EQ(s1[i].index, s2[i].index);
    EXPECT_EQ(s1[i].target.label, s2[i].target.label);
  }
}

}  // namespace
}  // namespace stmn
