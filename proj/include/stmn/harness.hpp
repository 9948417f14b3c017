#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stmn/evaluation.hpp"
#include "stmn/model.hpp"
#include "stmn/synthdata.hpp"

namespace stmn {

enum class ModelKind { baseline, stmn };

struct TrainConfig {
  ModelKind model = ModelKind::stmn;
  CellKind cell = CellKind::stmm;
  bool align = true;
  bool transfer = true;
  bool pretrained_head = true;
  BnScope bn_scope = BnScope::pooled;
  std::size_t radius = 2;
  std::size_t T_train = 7;
  std::size_t T_test = 11;
  std::size_t hidden = 8;
  std::size_t d_feat = 16;
  std::size_t d_mem = 16;
  std::size_t pool = 5;
  double lr = 1e-3;
  double lr_drop = 1e-4;
  std::size_t patience = 3;   // stagnant validation checks before the drop
  double momentum = 0.9;
  std::size_t epochs = 10;
  std::size_t windows_per_sequence = 2;
  std::size_t finetune_sequences = 0;  // recurrent model sees only the first N train sequences (0: all)
  double baseline_lr = 1e-2;       // per-frame detector in ablations
  std::size_t baseline_epochs = 20;
  std::uint64_t seed = 0;
  std::string pretrained;     // per-frame checkpoint the recurrent model starts from (CLI)
  std::string data;           // dataset directory (CLI)

  ModelShape shape() const { return {hidden, d_feat, d_mem, static_cast<std::size_t>(kNumClasses), pool}; }
  ForwardOptions forward_options() const;
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Flat JSON object; unknown keys and invalid values raise ConfigError.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean window loss
  double val_loss = 0.0;
  double lr = 0.0;
};

struct Checkpoint {
  TrainConfig config;
  ModelParams<float> params;
  std::vector<EpochLog> history;
};

// Directory with manifest.json (config, history, tensor list) and one tensor file per tensor.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// SGD over windows of T_train frames with the loss summed over frames. The recurrent model
// requires `base` (a trained per-frame detector); its backbone stays frozen.
// Throws DivergenceError on a non-finite loss.
Checkpoint train(const TrainConfig& cfg, const Dataset& ds, const ModelParams<float>* base = nullptr,
                 const std::function<void(const EpochLog&)>& on_epoch = {});

struct EvalReport {
  MapReport map;
  std::vector<VideoDetection> detections;
  double recall_visible = 0.0;   // GT recall on unoccluded instances
  double recall_occluded = 0.0;  // GT recall on occluded instances
  std::size_t T_test = 0;
};

// Slides windows of T_test frames (stride ceil(T_test / 2)) over each validation sequence, keeps
// per frame the detections of the nearest-centre window after per-frame NMS and Seq-NMS inside
// that window, and scores them with compute_map.
EvalReport evaluate(const ModelParams<float>& params, const TrainConfig& cfg, const std::vector<DatasetEntry>& split,
                    std::size_t T_test, const SeqNmsConfig& seqnms = {});

std::vector<GtInstance> ground_truth(const std::vector<DatasetEntry>& split);

struct AblationRow {
  std::string name;
  std::vector<double> map;  // per seed
  double mean() const;
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  // STMN, No-MatchTrans, ConvGRU-Pretrain, ConvGRU-FreshFC, per-frame
  std::string table() const;
  nlohmann::json to_json() const;
};

// The four recurrent configurations plus the per-frame detector they start from, trained per
// seed with identical data order. `on_model` sees each trained checkpoint.
AblationResult ablate(const TrainConfig& base_cfg, const Dataset& ds, const std::vector<std::uint64_t>& seeds,
                      const std::function<void(const std::string&, std::uint64_t, const Checkpoint&)>& on_model = {});

// TrainConfig variants of the ablation, in table order (the per-frame detector last).
std::vector<std::pair<std::string, TrainConfig>> ablation_configs(const TrainConfig& base_cfg);

struct SweepRow {
  std::size_t T = 0;
  double map = 0.0;
  double delta = 0.0;  // mAP(T) - mAP(7), in mAP points
};

std::vector<SweepRow> window_sweep(const ModelParams<float>& params, const TrainConfig& cfg,
                                   const std::vector<DatasetEntry>& split,
                                   const std::vector<std::size_t>& windows = {3, 7, 11, 15});
// "-1.9%, 0.0%, +0.7%, +1.0%"
std::string format_deltas(const std::vector<SweepRow>& rows);

// Per-frame memory fed to the reduce conv (both directions concatenated).
std::vector<Tensor<float>> memory_sequence(const ModelParams<float>& params, const ForwardOptions& opts,
                                           const std::vector<Tensor<float>>& frames);

// Mean over frames of the fraction of saliency (channel L2 norm) mass outside the GT box
// dilated by 20%, with each map cell weighted by its overlap with the box. `cell` is the image
// size of one map cell. Frames with zero saliency are skipped.
double trail_metric(const std::vector<Tensor<float>>& memory, const std::vector<Box>& gt_boxes, double cell = 4.0);
// Same, from precomputed H x W saliency maps.
double trail_metric_saliency(const std::vector<Tensor<float>>& saliency, const std::vector<Box>& gt_boxes,
                             double cell = 4.0);

struct VisualizeResult {
  std::vector<std::filesystem::path> files;
  double saliency_min = 0.0, saliency_max = 0.0;  // per-sequence normalisation of the first model
};

// Per frame: detection overlay and memory saliency PPM (saliency min-max normalised over the
// sequence, written at map resolution, normalisation recorded in saliency.json). With a second
// model the same pair is written with suffix "_b".
VisualizeResult visualize(const ModelParams<float>& params, const TrainConfig& cfg, const DatasetEntry& seq,
                          const std::filesystem::path& out_dir, const ModelParams<float>* second = nullptr,
                          const TrainConfig* second_cfg = nullptr);

struct GradcheckEntry {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t accepted = 0;
  std::size_t total = 0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-5;
  bool all_pass() const;
  std::string text() const;
};

// Finite-difference comparison of every differentiable op at f64 on shapes up to 7x7x4.
GradcheckReport gradcheck_all(std::uint64_t seed, double tolerance = 1e-5);

}  // namespace stmn
