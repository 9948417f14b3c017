#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "stmn/errors.hpp"
#include "stmn/harness.hpp"
#include "stmn/ops.hpp"

using namespace stmn;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("stmn_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TrainConfig small_config(ModelKind model) {
  TrainConfig c;
  c.model = model;
  c.hidden = 4;
  c.d_feat = 6;
  c.d_mem = 6;
  c.pool = 3;
  c.T_train = 4;
  c.T_test = 5;
  c.epochs = 2;
  c.windows_per_sequence = 1;
  c.lr = 1e-3;
  return c;
}

const Dataset& toy_dataset() {
  static const Dataset ds = [] {
    DatasetConfig cfg;
    cfg.frames = 8;
    return make_dataset(20, 4, 3, cfg);
  }();
  return ds;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = [] {
    DatasetConfig cfg;
    cfg.frames = 6;
    return make_dataset(3, 2, 5, cfg);
  }();
  return ds;
}

const Checkpoint& tiny_baseline() {
  static const Checkpoint ck = train(small_config(ModelKind::baseline), tiny_dataset());
  return ck;
}

// Binary PPM reader returning H x W x 3 values in [0, 1].
Tensor<float> read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(maxval, 255u);
  Tensor<float> t({h, w, 3});
  for (auto& v : t.values()) v = static_cast<float>(static_cast<unsigned char>(in.get())) / 255.0f;
  return t;
}

}  // namespace

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig c;
  c.model = ModelKind::baseline;
  c.cell = CellKind::convgru;
  c.align = false;
  c.bn_scope = BnScope::per_channel;
  c.radius = 3;
  c.T_test = 15;
  c.lr = 0.25;
  c.seed = 123456789012345ull;
  c.data = "some/dir";
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.cell, CellKind::convgru);
  EXPECT_EQ(back.seed, c.seed);
}

TEST(TrainConfigJson, DefaultsFromEmptyObject) {
  const auto c = train_config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.T_train, 7u);
  EXPECT_EQ(c.T_test, 11u);
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.lr_drop, 1e-4);
  EXPECT_EQ(c.patience, 3u);
  EXPECT_EQ(c.radius, 2u);
}

TEST(TrainConfigJson, RejectsBadInput) {
  EXPECT_THROW(train_config_from_json({{"learning_rate", 0.1}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"radius", 4}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"radius", 0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"T_test", 0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"lr", -1.0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"cell", "lstm"}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"align", "yes"}}), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(load_train_config("/nonexistent/config.json"), IoError);
}

TEST(Checkpoint, RoundTripBothModels) {
  const auto dir = temp_dir("ckpt");
  const auto& base = tiny_baseline();
  save_checkpoint(base, dir / "base");
  const auto back = load_checkpoint(dir / "base");
  EXPECT_EQ(back.params, base.params);
  EXPECT_EQ(to_json(back.config), to_json(base.config));
  ASSERT_EQ(back.history.size(), base.history.size());
  EXPECT_EQ(back.history[1].val_loss, base.history[1].val_loss);

  auto cfg = small_config(ModelKind::stmn);
  cfg.epochs = 0;
  const auto rec = train(cfg, tiny_dataset(), &base.params);
  save_checkpoint(rec, dir / "rec");
  EXPECT_EQ(load_checkpoint(dir / "rec").params, rec.params);
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  auto cfg = small_config(ModelKind::baseline);
  cfg.epochs = 0;
  const auto ck = train(cfg, tiny_dataset());
  EXPECT_EQ(ck.params, init_static_detector<float>(cfg.shape(), cfg.seed));
  EXPECT_TRUE(ck.history.empty());

  auto rc = small_config(ModelKind::stmn);
  rc.epochs = 0;
  const auto& base = tiny_baseline();
  EXPECT_EQ(train(rc, tiny_dataset(), &base.params).params,
            init_recurrent_detector(base.params, {rc.cell, rc.transfer, rc.pretrained_head}, rc.seed));
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = small_config(ModelKind::baseline);
  cfg.lr = 0.0;
  cfg.lr_drop = 0.0;
  cfg.epochs = 3;
  const auto ck = train(cfg, tiny_dataset());
  EXPECT_EQ(ck.params, init_static_detector<float>(cfg.shape(), cfg.seed));
  EXPECT_EQ(ck.history.size(), 3u);

  auto rc = small_config(ModelKind::stmn);
  rc.lr = 0.0;
  rc.lr_drop = 0.0;
  const auto& base = tiny_baseline();
  EXPECT_EQ(train(rc, tiny_dataset(), &base.params).params,
            init_recurrent_detector(base.params, {rc.cell, rc.transfer, rc.pretrained_head}, rc.seed));
}

TEST(Train, RecurrentModelNeedsPerFrameDetector) {
  EXPECT_THROW(train(small_config(ModelKind::stmn), tiny_dataset()), UsageError);
  auto cfg = small_config(ModelKind::stmn);
  cfg.d_mem = 5;
  EXPECT_THROW(train(cfg, tiny_dataset(), &tiny_baseline().params), ConfigError);
}

TEST(Train, DivergenceIsReported) {
  auto cfg = small_config(ModelKind::baseline);
  cfg.lr = 1e30;
  cfg.epochs = 3;
  EXPECT_THROW(train(cfg, tiny_dataset()), DivergenceError);
}

TEST(Train, DeterministicGivenSeed) {
  auto cfg = small_config(ModelKind::stmn);
  const auto& base = tiny_baseline();
  const auto a = train(cfg, tiny_dataset(), &base.params);
  const auto b = train(cfg, tiny_dataset(), &base.params);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.history.back().train_loss, b.history.back().train_loss);
  cfg.seed = 1;
  EXPECT_FALSE(train(cfg, tiny_dataset(), &base.params).params == a.params);
}

TEST(Train, FinetuneSubsetMatchesTruncatedSplit) {
  auto cfg = small_config(ModelKind::stmn);
  cfg.finetune_sequences = 2;
  const auto& base = tiny_baseline();
  Dataset cut = tiny_dataset();
  cut.train.resize(2);
  auto full = cfg;
  full.finetune_sequences = 0;
  EXPECT_EQ(train(cfg, tiny_dataset(), &base.params).params, train(full, cut, &base.params).params);
  EXPECT_FALSE(train(full, tiny_dataset(), &base.params).params == train(full, cut, &base.params).params);
  // The per-frame detector ignores the subset.
  auto pf = small_config(ModelKind::baseline);
  pf.finetune_sequences = 1;
  EXPECT_EQ(train(pf, tiny_dataset()).params, base.params);
}

TEST(Train, PlateauDropsLearningRateOnce) {
  auto cfg = small_config(ModelKind::baseline);
  cfg.lr = 0.0;  // validation loss never improves after the first check
  cfg.lr_drop = 0.0;
  cfg.patience = 2;
  cfg.epochs = 6;
  const auto ck = train(cfg, tiny_dataset());
  // Loss is flat, so the drop happens after epochs 1 and 2 are stagnant.
  cfg.lr = 1e-9;
  cfg.lr_drop = 5e-10;
  // With a tiny rate the loss still changes; only the schedule is checked here.
  const auto ck2 = train(cfg, tiny_dataset());
  std::vector<double> lrs;
  for (const auto& e : ck2.history) lrs.push_back(e.lr);
  EXPECT_EQ(lrs.front(), 1e-9);
  EXPECT_TRUE(lrs.back() == 5e-10 || lrs.back() == 1e-9);
  for (std::size_t i = 1; i < lrs.size(); ++i) EXPECT_LE(lrs[i], lrs[i - 1]);
  std::vector<double> flat;
  for (const auto& e : ck.history) flat.push_back(e.lr);
  EXPECT_EQ(flat, std::vector<double>(6, 0.0));
}

TEST(Train, LossDecreasesOnToyDatasetForFiveSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg;
    cfg.model = ModelKind::baseline;
    cfg.hidden = 4;
    cfg.d_feat = 8;
    cfg.d_mem = 8;
    cfg.T_train = 4;
    cfg.epochs = 10;
    cfg.windows_per_sequence = 1;
    cfg.seed = seed;
    const auto ck = train(cfg, toy_dataset());
    ASSERT_EQ(ck.history.size(), 10u);
    EXPECT_LT(ck.history.back().train_loss, ck.history.front().train_loss) << "seed " << seed;
  }
}

TEST(Evaluate, SilentDetectorScoresZero) {
  auto p = init_static_detector<float>(small_config(ModelKind::baseline).shape(), 0);
  for (auto& v : p.head.cls_w.values()) v = 0.0f;
  p.head.cls_b[0] = 50.0f;  // background wins everywhere
  const auto r = evaluate(p, small_config(ModelKind::baseline), tiny_dataset().val, 5);
  EXPECT_TRUE(r.detections.empty());
  EXPECT_EQ(r.map.map, 0.0);
  EXPECT_FALSE(r.map.ap.empty());
}

TEST(Evaluate, GroundTruthAsDetectionsScoresOne) {
  std::vector<VideoDetection> dets;
  for (const auto& g : ground_truth(tiny_dataset().val)) dets.push_back({g.video_id, {g.box, g.class_id, 1.0, g.frame}});
  EXPECT_DOUBLE_EQ(compute_map(dets, ground_truth(tiny_dataset().val)).map, 1.0);
}

TEST(Evaluate, DeterministicAndAnyWindowLength) {
  const auto& base = tiny_baseline();
  auto cfg = small_config(ModelKind::stmn);
  cfg.epochs = 1;
  const auto ck = train(cfg, tiny_dataset(), &base.params);
  const auto a = evaluate(ck.params, cfg, tiny_dataset().val, 5);
  const auto b = evaluate(ck.params, cfg, tiny_dataset().val, 5);
  EXPECT_EQ(a.detections, b.detections);
  EXPECT_EQ(a.map.map, b.map.map);
  for (std::size_t T : {1u, 2u, 3u, 6u, 40u}) {
    const auto r = evaluate(ck.params, cfg, tiny_dataset().val, T);
    EXPECT_GE(r.map.map, 0.0);
    EXPECT_LE(r.map.map, 1.0);
    for (const auto& d : r.detections) EXPECT_LT(d.det.frame, 6u);
  }
  EXPECT_THROW(evaluate(ck.params, cfg, tiny_dataset().val, 0), UsageError);
}

TEST(Evaluate, BaselineDetectionsIndependentOfWindowLength) {
  // The per-frame detector has no temporal state; only Seq-NMS sees the window.
  const auto& base = tiny_baseline();
  SeqNmsConfig off;
  off.link_iou = 2.0;  // nothing links: Seq-NMS keeps each box as its own path
  off.suppress_iou = 2.0;
  const auto a = evaluate(base.params, base.config, tiny_dataset().val, 2, off);
  const auto b = evaluate(base.params, base.config, tiny_dataset().val, 6, off);
  EXPECT_EQ(a.detections.size(), b.detections.size());
  EXPECT_EQ(a.map.map, b.map.map);
}

TEST(Ablation, ConfigurationsDifferOnlyInTheirAxes) {
  TrainConfig base;
  base.baseline_lr = 0.5;
  base.baseline_epochs = 9;
  const auto cs = ablation_configs(base);
  ASSERT_EQ(cs.size(), 5u);
  EXPECT_EQ(cs[0].first, "STMN");
  EXPECT_EQ(cs[4].first, "Per-frame");
  EXPECT_TRUE(cs[0].second.align && cs[0].second.transfer && cs[0].second.pretrained_head);
  EXPECT_EQ(cs[0].second.cell, CellKind::stmm);
  EXPECT_FALSE(cs[1].second.align);
  EXPECT_EQ(cs[2].second.cell, CellKind::convgru);
  EXPECT_TRUE(cs[2].second.pretrained_head);
  EXPECT_FALSE(cs[3].second.pretrained_head);
  EXPECT_EQ(cs[4].second.model, ModelKind::baseline);
  EXPECT_EQ(cs[4].second.lr, 0.5);
  EXPECT_EQ(cs[4].second.epochs, 9u);
  for (const auto& [n, c] : cs) {
    EXPECT_EQ(c.seed, base.seed);
    EXPECT_EQ(c.T_train, base.T_train);
    EXPECT_EQ(c.windows_per_sequence, base.windows_per_sequence);
  }
}

TEST(Ablation, TableHasFiveRowsAndSeedColumns) {
  auto cfg = small_config(ModelKind::stmn);
  cfg.epochs = 1;
  cfg.baseline_epochs = 1;
  std::size_t models = 0;
  const auto res = ablate(cfg, tiny_dataset(), {0, 1}, [&](const std::string&, std::uint64_t, const Checkpoint&) { ++models; });
  EXPECT_EQ(models, 10u);
  ASSERT_EQ(res.rows.size(), 5u);
  for (const auto& r : res.rows) {
    EXPECT_EQ(r.map.size(), 2u);
    for (double v : r.map) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  const auto table = res.table();
  std::istringstream is(table);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 6u);
  EXPECT_NE(lines[0].find("mean"), std::string::npos);
  const auto j = res.to_json();
  EXPECT_EQ(j["rows"].size(), 5u);
  EXPECT_EQ(j["rows"][0]["map"].size(), 2u);
  EXPECT_THROW(ablate(cfg, tiny_dataset(), {}), UsageError);
}

TEST(WindowSweep, SevenAloneHasZeroDelta) {
  const auto& base = tiny_baseline();
  const auto rows = window_sweep(base.params, base.config, tiny_dataset().val, {7});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].delta, 0.0);
  EXPECT_EQ(format_deltas(rows), "0.0%");
}

TEST(WindowSweep, DeltaFormatting) {
  const std::vector<SweepRow> rows{{3, 0, -1.9}, {7, 0, 0.0}, {11, 0, 0.7}, {15, 0, 1.04}};
  EXPECT_EQ(format_deltas(rows), "-1.9%, 0.0%, +0.7%, +1.0%");
  EXPECT_EQ(format_deltas({{3, 0, -0.04}}), "0.0%");
}

TEST(TrailMetric, SaliencyInsideBoxIsZero) {
  Tensor<float> s({12, 12});
  for (std::size_t i = 4; i < 7; ++i)
    for (std::size_t j = 4; j < 7; ++j) s[i * 12 + j] = 1.0f;
  EXPECT_DOUBLE_EQ(trail_metric_saliency({s}, {{16, 16, 28, 28}}), 0.0);
}

TEST(TrailMetric, UniformSaliencyGivesAreaRatio) {
  // Dilated box 24 x 24 on a 48 x 48 image covers 25% of it.
  const auto s = Tensor<float>::filled({12, 12}, 0.3f);
  EXPECT_NEAR(trail_metric_saliency({s, s}, {{14, 14, 34, 34}, {4, 4, 24, 24}}), 0.75, 1e-12);
  // memory form: channel L2 norm of a constant map is constant
  const auto m = Tensor<float>::filled({12, 12, 3}, 0.2f);
  EXPECT_NEAR(trail_metric({m}, {{14, 14, 34, 34}}), 0.75, 1e-9);
}

TEST(TrailMetric, Errors) {
  const auto s = Tensor<float>::filled({4, 4}, 1.0f);
  EXPECT_THROW(trail_metric_saliency({s}, {}), UsageError);
  EXPECT_THROW(trail_metric_saliency({}, {}), UsageError);
  EXPECT_THROW(trail_metric_saliency({s}, {{5, 5, 5, 9}}), UsageError);
  EXPECT_EQ(trail_metric_saliency({Tensor<float>({4, 4})}, {{0, 0, 4, 4}}), 0.0);
}

TEST(Visualize, OutputCountsAndTrailConsistency) {
  const auto& base = tiny_baseline();
  auto cfg = small_config(ModelKind::stmn);
  cfg.epochs = 1;
  const auto ck = train(cfg, tiny_dataset(), &base.params);
  const auto& seq = tiny_dataset().val[0];
  const std::size_t T = seq.sequence.length();

  const auto dir = temp_dir("vis");
  const auto r = visualize(ck.params, cfg, seq, dir);
  EXPECT_EQ(r.files.size(), 2 * T);
  for (const auto& f : r.files) EXPECT_TRUE(fs::exists(f));

  // Recover saliency from the written maps and the recorded normalisation.
  std::ifstream meta_in(dir / "saliency.json");
  const auto meta = nlohmann::json::parse(meta_in);
  const double lo = meta["min"], hi = meta["max"];
  std::vector<Tensor<float>> sal;
  std::vector<Box> boxes;
  for (std::size_t t = 0; t < T; ++t) {
    char name[64];
    std::snprintf(name, sizeof name, "frame_%03zu_mem.ppm", t);
    const auto img = read_ppm(dir / name);
    Tensor<float> s({img.height(), img.width()});
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<float>(lo + img[3 * i] * (hi - lo));
    sal.push_back(s);
    boxes.push_back(seq.sequence.gt[t][0].box);
  }
  const double from_files = trail_metric_saliency(sal, boxes);
  const double direct = trail_metric(memory_sequence(ck.params, cfg.forward_options(), seq.sequence.frames), boxes);
  EXPECT_NEAR(from_files, direct, 1e-2);

  const auto dir2 = temp_dir("vis_cmp");
  auto no_align = cfg;
  no_align.align = false;
  EXPECT_EQ(visualize(ck.params, cfg, seq, dir2, &ck.params, &no_align).files.size(), 4 * T);
}

TEST(Visualize, ZeroMemoryIsBlack) {
  const auto& base = tiny_baseline();
  auto cfg = small_config(ModelKind::stmn);
  auto p = init_recurrent_detector(base.params, {}, 0);
  for (auto* cell : {&p.fwd, &p.bwd}) cell->for_each([](const char*, ConvParams<float>& c) {
    for (auto& v : c.kernel.values()) v = 0.0f;
  });
  const auto dir = temp_dir("vis_zero");
  const auto r = visualize(p, cfg, tiny_dataset().val[0], dir);
  EXPECT_EQ(r.saliency_max, 0.0);
  const auto img = read_ppm(dir / "frame_000_mem.ppm");
  for (float v : img.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Gradcheck, AllOpsPassAndReportIsDeterministic) {
  const auto a = gradcheck_all(7);
  EXPECT_TRUE(a.all_pass()) << a.text();
  EXPECT_GE(a.entries.size(), 8u);
  std::vector<std::string> ops;
  for (const auto& e : a.entries) {
    ops.push_back(e.op);
    EXPECT_GT(e.accepted, 0u) << e.op;
  }
  for (const char* want : {"conv2d", "relu", "mul", "bn_star/pooled", "stmm_step", "convgru_step", "matchtrans",
                           "roi_pool_head_loss"})
    EXPECT_NE(std::find(ops.begin(), ops.end(), want), ops.end()) << want;
  EXPECT_EQ(gradcheck_all(7).text(), a.text());
  EXPECT_FALSE(gradcheck_all(7, 1e-30).all_pass());
}
