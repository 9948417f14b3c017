#include "stmn/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "stmn/errors.hpp"
#include "stmn/ops.hpp"
#include "stmn/random.hpp"
#include "stmn/tensor_io.hpp"

namespace stmn {

namespace fs = std::filesystem;
using nlohmann::json;

ForwardOptions TrainConfig::forward_options() const {
  ForwardOptions o;
  o.recurrence.cell = cell;
  o.recurrence.scope = bn_scope;
  o.recurrence.align = align;
  o.recurrence.radius = radius;
  o.pool = pool;
  return o;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (radius < 1 || radius > kMaxMatchRadius) fail("radius must be in [1, 3]");
  if (T_train == 0 || T_test == 0) fail("window lengths must be positive");
  if (hidden == 0 || d_feat == 0 || d_mem == 0 || pool == 0) fail("layer sizes must be positive");
  if (!(lr >= 0.0) || !(lr_drop >= 0.0) || !std::isfinite(lr) || !std::isfinite(lr_drop))
    fail("learning rates must be finite and non-negative");
  if (!(baseline_lr >= 0.0) || !std::isfinite(baseline_lr)) fail("baseline_lr must be finite and non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (patience == 0) fail("patience must be positive");
  if (windows_per_sequence == 0) fail("windows_per_sequence must be positive");
}

json to_json(const TrainConfig& c) {
  json j;
  j["model"] = c.model == ModelKind::baseline ? "baseline" : "stmn";
  j["cell"] = std::string(to_string(c.cell));
  j["align"] = c.align;
  j["transfer"] = c.transfer;
  j["pretrained_head"] = c.pretrained_head;
  j["bn_scope"] = std::string(to_string(c.bn_scope));
  j["radius"] = c.radius;
  j["T_train"] = c.T_train;
  j["T_test"] = c.T_test;
  j["hidden"] = c.hidden;
  j["d_feat"] = c.d_feat;
  j["d_mem"] = c.d_mem;
  j["pool"] = c.pool;
  j["lr"] = c.lr;
  j["lr_drop"] = c.lr_drop;
  j["patience"] = c.patience;
  j["momentum"] = c.momentum;
  j["epochs"] = c.epochs;
  j["windows_per_sequence"] = c.windows_per_sequence;
  j["finetune_sequences"] = c.finetune_sequences;
  j["baseline_lr"] = c.baseline_lr;
  j["baseline_epochs"] = c.baseline_epochs;
  j["seed"] = c.seed;
  j["pretrained"] = c.pretrained;
  j["data"] = c.data;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "model") {
        const std::string s = v.get<std::string>();
        if (s == "baseline") c.model = ModelKind::baseline;
        else if (s == "stmn") c.model = ModelKind::stmn;
        else throw ConfigError("config: unknown model '" + s + "'");
      } else if (key == "cell") {
        c.cell = parse_cell_kind(v.get<std::string>());
      } else if (key == "bn_scope") {
        c.bn_scope = parse_bn_scope(v.get<std::string>());
      } else if (key == "align") c.align = v.get<bool>();
      else if (key == "transfer") c.transfer = v.get<bool>();
      else if (key == "pretrained_head") c.pretrained_head = v.get<bool>();
      else if (key == "radius") c.radius = v.get<std::size_t>();
      else if (key == "T_train") c.T_train = v.get<std::size_t>();
      else if (key == "T_test") c.T_test = v.get<std::size_t>();
      else if (key == "hidden") c.hidden = v.get<std::size_t>();
      else if (key == "d_feat") c.d_feat = v.get<std::size_t>();
      else if (key == "d_mem") c.d_mem = v.get<std::size_t>();
      else if (key == "pool") c.pool = v.get<std::size_t>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "lr_drop") c.lr_drop = v.get<double>();
      else if (key == "patience") c.patience = v.get<std::size_t>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "windows_per_sequence") c.windows_per_sequence = v.get<std::size_t>();
      else if (key == "finetune_sequences") c.finetune_sequences = v.get<std::size_t>();
      else if (key == "baseline_lr") c.baseline_lr = v.get<double>();
      else if (key == "baseline_epochs") c.baseline_epochs = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "pretrained") c.pretrained = v.get<std::string>();
      else if (key == "data") c.data = v.get<std::string>();
      else throw ConfigError("config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json m;
  m["format"] = 1;
  m["config"] = to_json(ckpt.config);
  m["recurrent"] = ckpt.params.recurrent;
  m["tensors"] = json::array();
  ckpt.params.for_each([&](const char* name, const Tensor<float>& t) {
    const std::string file = std::string(name) + ".stmn";
    save_tensor(dir / file, t);
    m["tensors"].push_back({{"name", name}, {"file", file}});
  });
  m["history"] = json::array();
  for (const auto& e : ckpt.history)
    m["history"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr}});
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << m.dump(1) << "\n";
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no checkpoint manifest in " + dir.string());
  Checkpoint c;
  try {
    const json m = json::parse(in);
    if (m.at("format").get<int>() != 1) throw IoError("unsupported checkpoint format");
    c.config = train_config_from_json(m.at("config"));
    c.params.recurrent = m.at("recurrent").get<bool>();
    std::map<std::string, std::string> files;
    for (const auto& t : m.at("tensors")) files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();
    c.params.for_each([&](const char* name, Tensor<float>& t) {
      const auto it = files.find(name);
      if (it == files.end()) throw IoError(std::string("checkpoint is missing tensor ") + name);
      t = as_precision<float>(load_any_tensor(dir / it->second));
    });
    for (const auto& e : m.at("history"))
      c.history.push_back({e.at("epoch"), e.at("train_loss"), e.at("val_loss"), e.at("lr")});
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + dir.string() + ": " + e.what());
  }
  return c;
}

// ---------------------------------------------------------------- training

namespace {

// Per-sequence inputs: images, plus frozen backbone features for the recurrent model.
struct Clip {
  const DatasetEntry* entry = nullptr;
  std::vector<Tensor<float>> features;
};

std::vector<Clip> prepare(const std::vector<DatasetEntry>& split, const ModelParams<float>& p) {
  std::vector<Clip> out;
  for (const auto& e : split) {
    Clip c{&e, {}};
    if (p.recurrent)
      for (const auto& img : e.sequence.frames) c.features.push_back(backbone_features(img, p.backbone));
    out.push_back(std::move(c));
  }
  return out;
}

WindowInput<float> window_input(const Clip& c, std::size_t begin, std::size_t end) {
  WindowInput<float> in;
  if (!c.features.empty()) {
    in.features.assign(c.features.begin() + static_cast<std::ptrdiff_t>(begin),
                       c.features.begin() + static_cast<std::ptrdiff_t>(end));
  } else {
    const auto& f = c.entry->sequence.frames;
    in.images.assign(f.begin() + static_cast<std::ptrdiff_t>(begin), f.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return in;
}

// Sampled proposals and targets for frames [begin, end); depends only on the data and `seed`.
std::vector<FrameTargets> window_targets(const DatasetEntry& e, std::size_t begin, std::size_t end, std::uint64_t seed) {
  const ProposalConfig pc;
  const LabelingConfig lc;
  const auto& seq = e.sequence;
  const std::size_t H = seq.frames[0].height(), W = seq.frames[0].width();
  std::vector<FrameTargets> out;
  for (std::size_t f = begin; f < end; ++f) {
    std::vector<Box> gt;
    std::vector<int> cls;
    for (const auto& g : seq.gt[f]) {
      if (!g.box.valid()) continue;
      gt.push_back(g.box);
      cls.push_back(g.class_id);
    }
    Rng rng(derive_seed(seed, f));
    const auto props = generate_proposals(gt, H, W, rng, pc);
    FrameTargets ft;
    for (const auto& lp : sample_targets(props, gt, cls, rng, lc)) {
      ft.boxes.push_back(props[lp.index]);
      ft.targets.push_back(lp.target);
    }
    out.push_back(std::move(ft));
  }
  return out;
}

struct WindowRef {
  std::size_t clip = 0, begin = 0;
};

bool finite_params(const ModelParams<float>& p) {
  bool ok = true;
  p.for_each_trainable([&](const char*, const Tensor<float>& t) {
    for (float v : t.values()) ok = ok && std::isfinite(v);
  });
  return ok;
}

}  // namespace

Checkpoint train(const TrainConfig& cfg, const Dataset& ds, const ModelParams<float>* base,
                 const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  Checkpoint ck;
  ck.config = cfg;
  if (cfg.model == ModelKind::baseline) {
    ck.params = init_static_detector<float>(cfg.shape(), cfg.seed);
  } else {
    if (!base) throw UsageError("train: the recurrent model needs a trained per-frame detector");
    if (base->recurrent) throw UsageError("train: the starting detector must be the per-frame model");
    if (base->memory_channels() != cfg.d_mem || base->backbone.feature_channels() != cfg.d_feat)
      throw ConfigError("train: d_feat / d_mem do not match the per-frame detector");
    ck.params = init_recurrent_detector(*base, {cfg.cell, cfg.transfer, cfg.pretrained_head}, cfg.seed);
  }
  if (cfg.epochs == 0) return ck;
  if (ds.train.empty()) throw UsageError("train: empty training split");

  const auto opts = cfg.forward_options();
  std::vector<DatasetEntry> subset;
  const bool sub = cfg.model == ModelKind::stmn && cfg.finetune_sequences > 0 && cfg.finetune_sequences < ds.train.size();
  if (sub) subset.assign(ds.train.begin(), ds.train.begin() + static_cast<std::ptrdiff_t>(cfg.finetune_sequences));
  const auto train_clips = prepare(sub ? subset : ds.train, ck.params);
  const auto val_clips = prepare(ds.val, ck.params);

  // Fixed validation windows and targets.
  std::vector<std::pair<WindowRef, std::vector<FrameTargets>>> val_set;
  for (std::size_t i = 0; i < val_clips.size(); ++i) {
    const std::size_t L = val_clips[i].entry->sequence.length();
    for (const auto& w : sliding_windows(L, std::min(cfg.T_train, L)))
      val_set.push_back({{i, w.begin}, window_targets(*val_clips[i].entry, w.begin, w.end,
                                                      derive_seed(derive_seed(cfg.seed, 0x7a1), i * 1000 + w.begin))});
  }
  auto validation_loss = [&] {
    if (val_set.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [ref, tg] : val_set) {
      const std::size_t L = val_clips[ref.clip].entry->sequence.length();
      s += window_loss(ck.params, opts, window_input(val_clips[ref.clip], ref.begin, ref.begin + tg.size()), tg);
      (void)L;
    }
    return s / static_cast<double>(val_set.size());
  };

  Sgd<float> sgd(cfg.momentum);
  double lr = cfg.lr;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stagnant = 0;
  bool dropped = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order(derive_seed(cfg.seed, 0x1000 + epoch));
    std::vector<WindowRef> windows;
    for (std::size_t i = 0; i < train_clips.size(); ++i) {
      const std::size_t L = train_clips[i].entry->sequence.length();
      const std::size_t T = std::min(cfg.T_train, L);
      std::uniform_int_distribution<std::size_t> start(0, L - T);
      for (std::size_t k = 0; k < cfg.windows_per_sequence; ++k) windows.push_back({i, start(order)});
    }
    std::shuffle(windows.begin(), windows.end(), order);

    double total = 0.0;
    for (std::size_t w = 0; w < windows.size(); ++w) {
      const auto& ref = windows[w];
      const Clip& clip = train_clips[ref.clip];
      const std::size_t end = ref.begin + std::min(cfg.T_train, clip.entry->sequence.length());
      const auto targets = window_targets(*clip.entry, ref.begin, end,
                                          derive_seed(derive_seed(cfg.seed, epoch), w));
      auto grads = ck.params.zeros_like();
      const double loss = window_loss(ck.params, opts, window_input(clip, ref.begin, end), targets, &grads);
      if (!std::isfinite(loss)) throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch));
      total += loss;
      sgd.step(ck.params, grads, lr);
      if (!finite_params(ck.params))
        throw DivergenceError("train: non-finite parameters at epoch " + std::to_string(epoch));
    }
    EpochLog log{epoch, total / static_cast<double>(windows.size()), validation_loss(), lr};
    if (!std::isfinite(log.val_loss)) throw DivergenceError("train: non-finite validation loss");
    ck.history.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.val_loss < best) {
      best = log.val_loss;
      stagnant = 0;
    } else if (++stagnant >= cfg.patience && !dropped) {
      lr = cfg.lr_drop;
      dropped = true;
    }
  }
  return ck;
}

// ---------------------------------------------------------------- evaluation

std::vector<GtInstance> ground_truth(const std::vector<DatasetEntry>& split) {
  std::vector<GtInstance> out;
  for (const auto& e : split)
    for (std::size_t f = 0; f < e.sequence.gt.size(); ++f)
      for (const auto& g : e.sequence.gt[f])
        if (g.box.valid()) out.push_back({e.id, f, g.class_id, g.box});
  return out;
}

namespace {

DetectionSequence detect_clip(const ModelParams<float>& params, const ForwardOptions& opts, const Clip& clip,
                              std::size_t T, const SeqNmsConfig& seqnms) {
  const auto& seq = clip.entry->sequence;
  const std::size_t L = seq.length();
  const std::size_t H = seq.frames[0].height(), W = seq.frames[0].width();
  const auto anchors = anchor_grid(H, W, ProposalConfig{});
  const auto windows = sliding_windows(L, T);
  const auto owner = assign_frames(windows, L);
  DetectionSequence out(L);
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const auto& w = windows[wi];
    const auto fwd = forward_window(params, opts, window_input(clip, w.begin, w.end));
    const auto dets = seq_nms(detect_window(params, fwd, anchors, W, H, DetectConfig{}, 0), seqnms);
    for (std::size_t f = w.begin; f < w.end; ++f) {
      if (owner[f] != wi) continue;
      out[f] = dets[f - w.begin];
      for (auto& d : out[f]) d.frame = f;
    }
  }
  return out;
}

}  // namespace

EvalReport evaluate(const ModelParams<float>& params, const TrainConfig& cfg, const std::vector<DatasetEntry>& split,
                    std::size_t T_test, const SeqNmsConfig& seqnms) {
  if (T_test == 0) throw UsageError("evaluate: window length must be positive");
  EvalReport r;
  r.T_test = T_test;
  const auto opts = cfg.forward_options();
  const auto clips = prepare(split, params);
  std::size_t vis = 0, vis_hit = 0, occ = 0, occ_hit = 0;
  for (const auto& clip : clips) {
    const auto dets = detect_clip(params, opts, clip, T_test, seqnms);
    const auto& seq = clip.entry->sequence;
    for (std::size_t f = 0; f < dets.size(); ++f) {
      for (const auto& d : dets[f]) r.detections.push_back({clip.entry->id, d});
      for (const auto& g : seq.gt[f]) {
        if (!g.box.valid()) continue;
        const bool hit = std::any_of(dets[f].begin(), dets[f].end(), [&](const Detection& d) {
          return d.class_id == g.class_id && iou(d.box, g.box) >= 0.5;
        });
        (g.occluded ? occ : vis) += 1;
        (g.occluded ? occ_hit : vis_hit) += hit;
      }
    }
  }
  r.map = compute_map(r.detections, ground_truth(split));
  r.recall_visible = vis ? static_cast<double>(vis_hit) / static_cast<double>(vis) : 0.0;
  r.recall_occluded = occ ? static_cast<double>(occ_hit) / static_cast<double>(occ) : 0.0;
  return r;
}

// ---------------------------------------------------------------- ablation

double AblationRow::mean() const {
  if (map.empty()) return 0.0;
  return std::accumulate(map.begin(), map.end(), 0.0) / static_cast<double>(map.size());
}

std::string AblationResult::table() const {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-22s", "model");
  os << buf;
  for (auto s : seeds) {
    std::snprintf(buf, sizeof buf, " %8s", ("s" + std::to_string(s)).c_str());
    os << buf;
  }
  os << "     mean\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-22s", r.name.c_str());
    os << buf;
    for (double v : r.map) {
      std::snprintf(buf, sizeof buf, " %8.1f", 100.0 * v);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, " %8.1f\n", 100.0 * r.mean());
    os << buf;
  }
  return os.str();
}

json AblationResult::to_json() const {
  json j;
  j["seeds"] = seeds;
  j["rows"] = json::array();
  for (const auto& r : rows) j["rows"].push_back({{"name", r.name}, {"map", r.map}, {"mean", r.mean()}});
  return j;
}

std::vector<std::pair<std::string, TrainConfig>> ablation_configs(const TrainConfig& base_cfg) {
  auto rec = [&](CellKind cell, bool align, bool transfer, bool head) {
    TrainConfig c = base_cfg;
    c.model = ModelKind::stmn;
    c.cell = cell;
    c.align = align;
    c.transfer = transfer;
    c.pretrained_head = head;
    return c;
  };
  TrainConfig pf = base_cfg;
  pf.model = ModelKind::baseline;
  pf.lr = base_cfg.baseline_lr;
  pf.epochs = base_cfg.baseline_epochs;
  return {{"STMN", rec(CellKind::stmm, true, true, true)},
          {"STMN-No-MatchTrans", rec(CellKind::stmm, false, true, true)},
          {"ConvGRU-Pretrain", rec(CellKind::convgru, true, false, true)},
          {"ConvGRU-FreshFC", rec(CellKind::convgru, true, false, false)},
          {"Per-frame", pf}};
}

AblationResult ablate(const TrainConfig& base_cfg, const Dataset& ds, const std::vector<std::uint64_t>& seeds,
                      const std::function<void(const std::string&, std::uint64_t, const Checkpoint&)>& on_model) {
  if (seeds.empty()) throw UsageError("ablate: no seeds");
  const auto configs = ablation_configs(base_cfg);
  AblationResult res;
  res.seeds = seeds;
  for (const auto& [name, c] : configs) res.rows.push_back({name, {}});
  for (auto seed : seeds) {
    auto pf_cfg = configs.back().second;
    pf_cfg.seed = seed;
    const auto baseline = train(pf_cfg, ds);
    if (on_model) on_model(configs.back().first, seed, baseline);
    res.rows.back().map.push_back(evaluate(baseline.params, pf_cfg, ds.val, base_cfg.T_test).map.map);
    for (std::size_t i = 0; i + 1 < configs.size(); ++i) {
      auto c = configs[i].second;
      c.seed = seed;
      const auto ck = train(c, ds, &baseline.params);
      if (on_model) on_model(configs[i].first, seed, ck);
      res.rows[i].map.push_back(evaluate(ck.params, c, ds.val, c.T_test).map.map);
    }
  }
  return res;
}

// ---------------------------------------------------------------- window sweep

std::vector<SweepRow> window_sweep(const ModelParams<float>& params, const TrainConfig& cfg,
                                   const std::vector<DatasetEntry>& split, const std::vector<std::size_t>& windows) {
  if (windows.empty()) throw UsageError("window_sweep: no window lengths");
  std::map<std::size_t, double> maps;
  auto map_at = [&](std::size_t T) {
    auto it = maps.find(T);
    if (it == maps.end()) it = maps.emplace(T, evaluate(params, cfg, split, T).map.map).first;
    return it->second;
  };
  std::vector<SweepRow> rows;
  for (auto T : windows) rows.push_back({T, map_at(T), 0.0});
  const double ref = map_at(7);
  for (auto& r : rows) r.delta = 100.0 * (r.map - ref);
  return rows;
}

std::string format_deltas(const std::vector<SweepRow>& rows) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double d = std::round(rows[i].delta * 10.0) / 10.0;
    if (d == 0.0) std::snprintf(buf, sizeof buf, "0.0%%");
    else std::snprintf(buf, sizeof buf, "%+.1f%%", d);
    if (i) out += ", ";
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------- memory, trails, visualisation

std::vector<Tensor<float>> memory_sequence(const ModelParams<float>& params, const ForwardOptions& opts,
                                           const std::vector<Tensor<float>>& frames) {
  if (!params.recurrent) throw UsageError("memory_sequence: model has no memory");
  if (frames.empty()) throw UsageError("memory_sequence: no frames");
  std::vector<Tensor<float>> feats;
  for (const auto& f : frames) feats.push_back(backbone_features(f, params.backbone));
  return run_bidirectional(feats, params.fwd, params.bwd, opts.recurrence);
}

double trail_metric_saliency(const std::vector<Tensor<float>>& saliency, const std::vector<Box>& gt_boxes, double cell) {
  if (saliency.empty()) throw UsageError("trail_metric: no frames");
  if (gt_boxes.size() != saliency.size()) throw UsageError("trail_metric: need one ground-truth box per frame");
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t t = 0; t < saliency.size(); ++t) {
    const auto& s = saliency[t];
    const Box& b = gt_boxes[t];
    if (!b.valid()) throw UsageError("trail_metric: invalid ground-truth box");
    const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
    const double hw = 0.6 * b.width(), hh = 0.6 * b.height();
    const Box d{cx - hw, cy - hh, cx + hw, cy + hh};
    double total = 0.0, inside = 0.0;
    for (std::size_t i = 0; i < s.height(); ++i)
      for (std::size_t j = 0; j < s.width(); ++j) {
        const double v = s[i * s.width() + j];
        total += v;
        const double x0 = static_cast<double>(j) * cell, y0 = static_cast<double>(i) * cell;
        const double ox = std::max(0.0, std::min(x0 + cell, d.x2) - std::max(x0, d.x1));
        const double oy = std::max(0.0, std::min(y0 + cell, d.y2) - std::max(y0, d.y1));
        inside += v * ox * oy / (cell * cell);
      }
    if (total <= 0.0) continue;
    acc += 1.0 - inside / total;
    ++used;
  }
  return used ? acc / static_cast<double>(used) : 0.0;
}

double trail_metric(const std::vector<Tensor<float>>& memory, const std::vector<Box>& gt_boxes, double cell) {
  std::vector<Tensor<float>> sal;
  for (const auto& m : memory) sal.push_back(l2_norm_channels(m));
  return trail_metric_saliency(sal, gt_boxes, cell);
}

namespace {

std::vector<Tensor<float>> saliency_maps(const ModelParams<float>& p, const TrainConfig& cfg,
                                         const std::vector<Tensor<float>>& frames) {
  std::vector<Tensor<float>> out;
  if (p.recurrent) {
    for (const auto& m : memory_sequence(p, cfg.forward_options(), frames)) out.push_back(l2_norm_channels(m));
  } else {
    for (const auto& f : frames)
      out.push_back(l2_norm_channels(relu(conv2d(backbone_features(f, p.backbone), p.static_conv))));
  }
  return out;
}

Tensor<float> upscale(const Tensor<float>& img, std::size_t s) {
  const std::size_t H = img.height(), W = img.width(), C = img.channels();
  Tensor<float> out({H * s, W * s, C});
  for (std::size_t i = 0; i < H * s; ++i)
    for (std::size_t j = 0; j < W * s; ++j)
      for (std::size_t c = 0; c < C; ++c) out[(i * W * s + j) * C + c] = img[((i / s) * W + j / s) * C + c];
  return out;
}

Box scaled(const Box& b, double s) { return {b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s}; }

struct Rendered {
  std::vector<fs::path> files;
  double lo = 0.0, hi = 0.0;
};

Rendered render(const ModelParams<float>& p, const TrainConfig& cfg, const DatasetEntry& seq, const fs::path& dir,
                const std::string& suffix) {
  constexpr std::size_t kZoom = 4;
  static const Color kGt{0.1, 0.9, 0.1};
  static const Color kDet{0.95, 0.1, 0.1};
  Rendered r;
  const std::vector<DatasetEntry> one{seq};
  const auto clips = prepare(one, p);
  const auto dets = detect_clip(p, cfg.forward_options(), clips[0], cfg.T_test, SeqNmsConfig{});
  const auto sal = saliency_maps(p, cfg, seq.sequence.frames);
  r.lo = std::numeric_limits<double>::infinity();
  r.hi = -r.lo;
  for (const auto& s : sal)
    for (float v : s.values()) {
      r.lo = std::min(r.lo, static_cast<double>(v));
      r.hi = std::max(r.hi, static_cast<double>(v));
    }
  const double range = r.hi - r.lo;
  char name[64];
  for (std::size_t t = 0; t < seq.sequence.length(); ++t) {
    auto img = upscale(seq.sequence.frames[t], kZoom);
    for (const auto& g : seq.sequence.gt[t]) draw_box(img, scaled(g.box, kZoom), kGt);
    for (const auto& d : dets[t])
      if (d.score >= 0.5) draw_box(img, scaled(d.box, kZoom), kDet);
    std::snprintf(name, sizeof name, "frame_%03zu_det%s.ppm", t, suffix.c_str());
    write_ppm(dir / name, img);
    r.files.push_back(dir / name);

    Tensor<float> s = sal[t];
    for (auto& v : s.values()) v = range > 0.0 ? static_cast<float>((v - r.lo) / range) : 0.0f;
    std::snprintf(name, sizeof name, "frame_%03zu_mem%s.ppm", t, suffix.c_str());
    write_ppm(dir / name, s);
    r.files.push_back(dir / name);
  }
  return r;
}

}  // namespace

VisualizeResult visualize(const ModelParams<float>& params, const TrainConfig& cfg, const DatasetEntry& seq,
                          const fs::path& out_dir, const ModelParams<float>* second, const TrainConfig* second_cfg) {
  if (seq.sequence.length() == 0) throw UsageError("visualize: empty sequence");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  VisualizeResult res;
  const auto a = render(params, cfg, seq, out_dir, "");
  res.files = a.files;
  res.saliency_min = a.lo;
  res.saliency_max = a.hi;
  json meta;
  meta["sequence"] = seq.id;
  meta["frames"] = seq.sequence.length();
  meta["cell"] = 4.0;
  meta["min"] = a.lo;
  meta["max"] = a.hi;
  if (second) {
    const auto b = render(*second, second_cfg ? *second_cfg : cfg, seq, out_dir, "_b");
    res.files.insert(res.files.end(), b.files.begin(), b.files.end());
    meta["b"] = {{"min", b.lo}, {"max", b.hi}};
  }
  std::ofstream out(out_dir / "saliency.json");
  if (!out) throw IoError("cannot write saliency.json");
  out << meta.dump(1) << "\n";
  return res;
}

}  // namespace stmn
