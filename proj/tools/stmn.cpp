// Command-line front end: data generation, training, evaluation and the experiment drivers.
#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "stmn/errors.hpp"
#include "stmn/evaluation.hpp"
#include "stmn/harness.hpp"
#include "stmn/synthdata.hpp"

namespace fs = std::filesystem;
using namespace stmn;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoull(tok));
    } catch (const std::exception&) {
      throw UsageError("bad seed list '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("empty seed list");
  return out;
}

Dataset dataset_for(const TrainConfig& cfg, const std::string& override_dir) {
  const std::string dir = override_dir.empty() ? cfg.data : override_dir;
  if (dir.empty()) throw UsageError("no dataset directory (set \"data\" in the config or pass --data)");
  return load_dataset(dir);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << "\n";
}

nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j;
  j["T_test"] = r.T_test;
  j["map"] = r.map.map;
  j["recall_visible"] = r.recall_visible;
  j["recall_occluded"] = r.recall_occluded;
  for (const auto& [c, ap] : r.map.ap) j["ap"][std::to_string(c)] = ap;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-temporal memory detector toolkit"};
  app.require_subcommand(1);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-5;
  gc->add_option("--seed", gc_seed);
  gc->add_option("--tol", gc_tol);

  auto* gen = app.add_subcommand("gen-data", "render a synthetic dataset");
  std::string gen_out;
  std::size_t gen_train = 32, gen_val = 16, gen_frames = 20;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--train", gen_train);
  gen->add_option("--val", gen_val);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--frames", gen_frames);

  auto* tr = app.add_subcommand("train", "train a detector");
  std::string tr_config, tr_out = "checkpoint", tr_data, tr_pretrained;
  tr->add_option("--config", tr_config)->required();
  tr->add_option("--out", tr_out);
  tr->add_option("--data", tr_data);
  tr->add_option("--pretrained", tr_pretrained, "per-frame checkpoint for the recurrent model");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  std::string ev_ckpt, ev_data, ev_dets, ev_json;
  std::size_t ev_T = 0;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--T", ev_T, "test window length (default: the checkpoint's T_test)");
  ev->add_option("--data", ev_data);
  ev->add_option("--detections", ev_dets, "write detections as JSON lines");
  ev->add_option("--json", ev_json, "write the report as JSON");

  auto* ab = app.add_subcommand("ablate", "train and compare the recurrent variants and the per-frame baseline");
  std::string ab_config, ab_data, ab_seeds = "0,1,2,3,4", ab_json, ab_save;
  ab->add_option("--config", ab_config)->required();
  ab->add_option("--data", ab_data);
  ab->add_option("--seeds", ab_seeds);
  ab->add_option("--json", ab_json);
  ab->add_option("--save", ab_save, "directory for the trained checkpoints");

  auto* sw = app.add_subcommand("sweep", "evaluate one checkpoint at several test window lengths");
  std::string sw_ckpt, sw_data, sw_windows = "3,7,11,15", sw_json;
  sw->add_option("--ckpt", sw_ckpt)->required();
  sw->add_option("--data", sw_data);
  sw->add_option("--windows", sw_windows);
  sw->add_option("--json", sw_json);

  auto* vz = app.add_subcommand("visualize", "detection overlays and memory saliency maps");
  std::string vz_ckpt, vz_seq, vz_data, vz_out = "vis", vz_compare;
  vz->add_option("--ckpt", vz_ckpt)->required();
  vz->add_option("--seq", vz_seq)->required();
  vz->add_option("--data", vz_data);
  vz->add_option("--out", vz_out);
  vz->add_option("--compare", vz_compare, "second checkpoint rendered alongside");

  auto* sn = app.add_subcommand("seqnms", "Seq-NMS over a JSON-lines detection file");
  std::string sn_in, sn_out, sn_rescore = "avg";
  SeqNmsConfig sn_cfg;
  sn->add_option("--in", sn_in)->required();
  sn->add_option("--out", sn_out)->required();
  sn->add_option("--rescore", sn_rescore);
  sn->add_option("--link-iou", sn_cfg.link_iou);
  sn->add_option("--suppress-iou", sn_cfg.suppress_iou);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gc) {
      const auto r = gradcheck_all(gc_seed, gc_tol);
      std::cout << r.text();
      return r.all_pass() ? kOk : kFailed;
    }
    if (*gen) {
      DatasetConfig cfg;
      cfg.frames = gen_frames;
      build_dataset(gen_out, gen_train, gen_val, gen_seed, cfg);
      std::cout << "wrote " << gen_train << " train and " << gen_val << " val sequences to " << gen_out << "\n";
      return kOk;
    }
    if (*tr) {
      auto cfg = load_train_config(tr_config);
      if (!tr_data.empty()) cfg.data = fs::absolute(tr_data).string();
      if (!tr_pretrained.empty()) cfg.pretrained = fs::absolute(tr_pretrained).string();
      const auto ds = dataset_for(cfg, "");
      std::optional<Checkpoint> base;
      if (cfg.model == ModelKind::stmn) {
        if (cfg.pretrained.empty()) throw UsageError("the recurrent model needs --pretrained or \"pretrained\"");
        base = load_checkpoint(cfg.pretrained);
      }
      const auto ck = train(cfg, ds, base ? &base->params : nullptr, [](const EpochLog& e) {
        std::printf("epoch %3zu  lr %.1e  train %.5f  val %.5f\n", e.epoch, e.lr, e.train_loss, e.val_loss);
        std::fflush(stdout);
      });
      save_checkpoint(ck, tr_out);
      std::cout << "checkpoint written to " << tr_out << "\n";
      return kOk;
    }
    if (*ev) {
      const auto ck = load_checkpoint(ev_ckpt);
      const auto ds = dataset_for(ck.config, ev_data);
      const std::size_t T = ev_T ? ev_T : ck.config.T_test;
      const auto r = evaluate(ck.params, ck.config, ds.val, T);
      std::printf("T_test %zu  mAP %.4f\n", T, r.map.map);
      for (const auto& [c, ap] : r.map.ap) std::printf("  class %d  AP %.4f  (%zu GT)\n", c, ap, r.map.gt_count.at(c));
      std::printf("recall visible %.4f  occluded %.4f\n", r.recall_visible, r.recall_occluded);
      if (!ev_dets.empty()) {
        std::ofstream out(ev_dets);
        if (!out) throw IoError("cannot write " + ev_dets);
        write_detections_jsonl(out, r.detections);
      }
      if (!ev_json.empty()) write_json(ev_json, report_json(r));
      return kOk;
    }
    if (*ab) {
      const auto cfg = load_train_config(ab_config);
      const auto ds = dataset_for(cfg, ab_data);
      const auto res = ablate(cfg, ds, parse_seeds(ab_seeds), [&](const std::string& name, std::uint64_t seed, const Checkpoint& ck) {
        std::printf("trained %s (seed %llu)\n", name.c_str(), static_cast<unsigned long long>(seed));
        std::fflush(stdout);
        if (!ab_save.empty()) save_checkpoint(ck, fs::path(ab_save) / (name + "_s" + std::to_string(seed)));
      });
      std::cout << res.table();
      if (!ab_json.empty()) write_json(ab_json, res.to_json());
      return kOk;
    }
    if (*sw) {
      const auto ck = load_checkpoint(sw_ckpt);
      const auto ds = dataset_for(ck.config, sw_data);
      std::vector<std::size_t> windows;
      for (auto v : parse_seeds(sw_windows)) windows.push_back(static_cast<std::size_t>(v));
      const auto rows = window_sweep(ck.params, ck.config, ds.val, windows);
      nlohmann::json j = nlohmann::json::array();
      for (const auto& r : rows) {
        std::printf("T_test %2zu  mAP %.4f  delta %+.1f\n", r.T, r.map, r.delta);
        j.push_back({{"T", r.T}, {"map", r.map}, {"delta", r.delta}});
      }
      std::cout << "deltas vs T=7: " << format_deltas(rows) << "\n";
      if (!sw_json.empty()) write_json(sw_json, j);
      return kOk;
    }
    if (*vz) {
      const auto ck = load_checkpoint(vz_ckpt);
      const auto ds = dataset_for(ck.config, vz_data);
      const DatasetEntry* entry = nullptr;
      for (const auto* split : {&ds.val, &ds.train})
        for (const auto& e : *split)
          if (e.id == vz_seq) entry = &e;
      if (!entry) throw UsageError("no sequence '" + vz_seq + "' in the dataset");
      std::optional<Checkpoint> other;
      if (!vz_compare.empty()) other = load_checkpoint(vz_compare);
      const auto r = visualize(ck.params, ck.config, *entry, vz_out, other ? &other->params : nullptr,
                               other ? &other->config : nullptr);
      std::cout << "wrote " << r.files.size() << " images to " << vz_out << "\n";
      return kOk;
    }
    if (*sn) {
      sn_cfg.rescore = parse_rescore_mode(sn_rescore);
      std::ifstream in(sn_in);
      if (!in) throw IoError("cannot open " + sn_in);
      const auto out_dets = seq_nms_videos(read_detections_jsonl(in), sn_cfg);
      std::ofstream out(sn_out);
      if (!out) throw IoError("cannot write " + sn_out);
      write_detections_jsonl(out, out_dets);
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
