#pragma once

// Run configuration: a JSON document with "schema_version": 1. Every key is
// optional; missing keys take the defaults below. Unknown keys are rejected.
//
// {
//   "schema_version": 1,
//   "seed": 7,
//   "paths": {"data_root": "data", "output_root": "runs/default"},
//   "ledger": {"corrections": "", "scale": 0.1},
//   "preprocess": {"slice_threshold": 150, "trim_fraction": 0.15, "input_kind": "orig_lung",
//                  "augment_prob": 0.2, "crop_fraction_min": 0.85, "crop_fraction_max": 1.0,
//                  "rotation_degrees": 10.0},
//   "stage1":  {"epochs", "batch_size", "lr", "optimizer", "clip_norm", "stem", "widths"},
//   "stage2a": {"epochs", "batch_size", "lr", "optimizer", "clip_norm", "variants", "k", "grid",
//               "channels", "embed", "pretrain_slices", "pretrain_epochs"},
//   "stage2b": {"epochs", "batch_size", "lr", "optimizer", "clip_norm", "variants",
//               "encoder_variant", "heads", "ff"},
//   "stage3":  {"epochs", "batch_size", "lr", "optimizer", "clip_norm"},
//   "ensemble": {"within_stage_rule": "majority_then_mean_prob", "source0_route": true}
// }
//
// "ledger.corrections" empty means the built-in corrections; otherwise a
// corrections file. Relative paths resolve against the working directory.

#include <array>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "srcaware/ensemble.hpp"
#include "srcaware/error.hpp"
#include "srcaware/expert3d.hpp"
#include "srcaware/expert_ctx.hpp"
#include "srcaware/expert_slice.hpp"
#include "srcaware/nn/optim.hpp"
#include "srcaware/rng.hpp"
#include "srcaware/training.hpp"
#include "srcaware/volume_prep.hpp"

namespace srcaware {

inline constexpr int kSchemaVersion = 1;

struct StageTrainConfig {
  int epochs = 8;
  int batch_size = 8;
  double lr = 1e-3;
  std::string optimizer = "adam";
  double clip_norm = 5.0;

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.opt.kind = nn::parse_optimizer(optimizer);
    t.opt.lr = lr;
    t.opt.clip_norm = clip_norm;
    return t;
  }
};

// A Stage 2a variant id: "<crs|drs><24|128>".
struct Stage2aVariantSpec {
  SliceSampling sampling = SliceSampling::contiguous;
  int depth = 24;

  std::string id() const { return to_string(sampling) + std::to_string(depth); }
};

inline Stage2aVariantSpec parse_stage2a_variant(const std::string& s) {
  Stage2aVariantSpec v;
  if (s == "crs24" || s == "crs128" || s == "drs24" || s == "drs128") {
    v.sampling = s.rfind("crs", 0) == 0 ? SliceSampling::contiguous : SliceSampling::depth_random;
    v.depth = std::stoi(s.substr(3));
    return v;
  }
  throw Error("unknown stage2a variant: " + s);
}

struct RunConfig {
  std::uint64_t seed = 7;
  std::string data_root = "data";
  std::string output_root = "runs/default";
  std::string corrections;  // empty: built-in corrections
  double ledger_scale = 0.1;

  int slice_threshold = 150;
  double trim_fraction = 0.15;
  InputKind input_kind = InputKind::orig_lung;
  double augment_prob = 0.2;
  AugmentBounds augment;

  StageTrainConfig stage1{10, 8, 1e-3};
  Volume3DConfig model3d;

  StageTrainConfig stage2a{10, 4, 3e-3};
  std::vector<std::string> stage2a_variants{"crs24", "crs128", "drs24"};
  int stage2a_k = 12;
  SliceEncoderConfig encoder;
  PretrainConfig pretrain;

  StageTrainConfig stage2b{15, 8, 1e-3};
  std::vector<std::string> stage2b_variants{"trans_last2", "flat_cls"};
  std::string stage2b_encoder_variant = "crs24";
  ContextConfig context;

  StageTrainConfig stage3{200, 8, 3e-2};

  VoteConfig vote;
};

namespace config_detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  require(j.is_object(), "config: " + where + " must be an object");
  for (const auto& [k, v] : j.items())
    require(allowed.count(k) > 0, "config: unknown key " + (where.empty() ? k : where + "." + k));
}

template <class T>
void get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline json stage_json(const StageTrainConfig& s) {
  return {{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"lr", s.lr}, {"optimizer", s.optimizer},
          {"clip_norm", s.clip_norm}};
}

inline const std::set<std::string> kStageKeys{"epochs", "batch_size", "lr", "optimizer", "clip_norm"};

inline std::set<std::string> with_stage_keys(std::set<std::string> extra) {
  extra.insert(kStageKeys.begin(), kStageKeys.end());
  return extra;
}

inline void read_stage(const json& j, StageTrainConfig& s) {
  get(j, "epochs", s.epochs);
  get(j, "batch_size", s.batch_size);
  get(j, "lr", s.lr);
  get(j, "optimizer", s.optimizer);
  get(j, "clip_norm", s.clip_norm);
  require(s.epochs >= 1 && s.batch_size >= 1, "config: epochs and batch_size must be >= 1");
  require(s.lr > 0, "config: lr must be positive");
  nn::parse_optimizer(s.optimizer);
}

}  // namespace config_detail

inline nlohmann::json to_json(const RunConfig& c) {
  using config_detail::stage_json;
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = c.seed;
  j["paths"] = {{"data_root", c.data_root}, {"output_root", c.output_root}};
  j["ledger"] = {{"corrections", c.corrections}, {"scale", c.ledger_scale}};
  j["preprocess"] = {{"slice_threshold", c.slice_threshold},
                     {"trim_fraction", c.trim_fraction},
                     {"input_kind", to_string(c.input_kind)},
                     {"augment_prob", c.augment_prob},
                     {"crop_fraction_min", c.augment.crop_fraction_min},
                     {"crop_fraction_max", c.augment.crop_fraction_max},
                     {"rotation_degrees", c.augment.rotation_max}};
  j["stage1"] = stage_json(c.stage1);
  j["stage1"]["stem"] = c.model3d.stem;
  j["stage1"]["widths"] = c.model3d.widths;
  j["stage2a"] = stage_json(c.stage2a);
  j["stage2a"]["variants"] = c.stage2a_variants;
  j["stage2a"]["k"] = c.stage2a_k;
  j["stage2a"]["grid"] = c.encoder.grid;
  j["stage2a"]["channels"] = c.encoder.channels;
  j["stage2a"]["embed"] = c.encoder.embed;
  j["stage2a"]["pretrain_slices"] = c.pretrain.slices;
  j["stage2a"]["pretrain_epochs"] = c.pretrain.epochs;
  j["stage2b"] = stage_json(c.stage2b);
  j["stage2b"]["variants"] = c.stage2b_variants;
  j["stage2b"]["encoder_variant"] = c.stage2b_encoder_variant;
  j["stage2b"]["heads"] = c.context.heads;
  j["stage2b"]["ff"] = c.context.ff > 0 ? c.context.ff : 4 * c.encoder.embed;
  j["stage3"] = stage_json(c.stage3);
  j["ensemble"] = {{"within_stage_rule", to_string(c.vote.within_stage_rule)},
                   {"source0_route", c.vote.source0_route}};
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  using namespace config_detail;
  RunConfig c;
  check_keys(j, "", {"schema_version", "seed", "paths", "ledger", "preprocess", "stage1", "stage2a", "stage2b", "stage3",
                     "ensemble"});
  require(j.contains("schema_version"), "config: schema_version is required");
  require(j.at("schema_version").is_number_integer() && j.at("schema_version").get<int>() == kSchemaVersion,
          "config: unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");
  get(j, "seed", c.seed);
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    check_keys(p, "paths", {"data_root", "output_root"});
    get(p, "data_root", c.data_root);
    get(p, "output_root", c.output_root);
  }
  if (j.contains("ledger")) {
    const auto& l = j.at("ledger");
    check_keys(l, "ledger", {"corrections", "scale"});
    get(l, "corrections", c.corrections);
    get(l, "scale", c.ledger_scale);
    require(c.ledger_scale > 0, "config: ledger.scale must be positive");
  }
  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    check_keys(p, "preprocess", {"slice_threshold", "trim_fraction", "input_kind", "augment_prob", "crop_fraction_min",
                                 "crop_fraction_max", "rotation_degrees"});
    get(p, "slice_threshold", c.slice_threshold);
    get(p, "trim_fraction", c.trim_fraction);
    if (p.contains("input_kind")) c.input_kind = parse_input_kind(p.at("input_kind").get<std::string>());
    get(p, "augment_prob", c.augment_prob);
    get(p, "crop_fraction_min", c.augment.crop_fraction_min);
    get(p, "crop_fraction_max", c.augment.crop_fraction_max);
    double rot = c.augment.rotation_max;
    get(p, "rotation_degrees", rot);
    c.augment.rotation_min = -rot;
    c.augment.rotation_max = rot;
    require(c.augment_prob >= 0 && c.augment_prob <= 1, "config: augment_prob must be in [0, 1]");
    validate_bounds(c.augment);
  }
  if (j.contains("stage1")) {
    const auto& s = j.at("stage1");
    check_keys(s, "stage1", with_stage_keys({"stem", "widths"}));
    read_stage(s, c.stage1);
    get(s, "stem", c.model3d.stem);
    get(s, "widths", c.model3d.widths);
  }
  if (j.contains("stage2a")) {
    const auto& s = j.at("stage2a");
    check_keys(s, "stage2a",
               with_stage_keys({"variants", "k", "grid", "channels", "embed", "pretrain_slices", "pretrain_epochs"}));
    read_stage(s, c.stage2a);
    get(s, "variants", c.stage2a_variants);
    get(s, "k", c.stage2a_k);
    get(s, "grid", c.encoder.grid);
    get(s, "channels", c.encoder.channels);
    get(s, "embed", c.encoder.embed);
    get(s, "pretrain_slices", c.pretrain.slices);
    get(s, "pretrain_epochs", c.pretrain.epochs);
  }
  require(!c.stage2a_variants.empty(), "config: stage2a.variants must not be empty");
  for (const auto& v : c.stage2a_variants) {
    const auto spec = parse_stage2a_variant(v);
    require(c.stage2a_k >= 1 && c.stage2a_k <= spec.depth, "config: stage2a.k must be in [1, " +
                                                               std::to_string(spec.depth) + "] for " + v);
  }
  if (j.contains("stage2b")) {
    const auto& s = j.at("stage2b");
    check_keys(s, "stage2b", with_stage_keys({"variants", "encoder_variant", "heads", "ff"}));
    read_stage(s, c.stage2b);
    get(s, "variants", c.stage2b_variants);
    get(s, "encoder_variant", c.stage2b_encoder_variant);
    get(s, "heads", c.context.heads);
    get(s, "ff", c.context.ff);
  }
  require(!c.stage2b_variants.empty(), "config: stage2b.variants must not be empty");
  for (const auto& v : c.stage2b_variants) parse_stage2b_variant(v);
  require(parse_stage2a_variant(c.stage2b_encoder_variant).depth == kContextSlices,
          "config: stage2b.encoder_variant must be a 24-slice stage2a variant");
  require(c.encoder.embed % c.context.heads == 0, "config: stage2a.embed must be divisible by stage2b.heads");
  if (j.contains("stage3")) {
    const auto& s = j.at("stage3");
    check_keys(s, "stage3", kStageKeys);
    read_stage(s, c.stage3);
  }
  if (j.contains("ensemble")) {
    const auto& e = j.at("ensemble");
    check_keys(e, "ensemble", {"within_stage_rule", "source0_route"});
    if (e.contains("within_stage_rule"))
      c.vote.within_stage_rule = parse_within_stage_rule(e.at("within_stage_rule").get<std::string>());
    get(e, "source0_route", c.vote.source0_route);
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("config " + path.string() + " is not valid JSON: " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
}

// Hash of the resolved configuration (canonical JSON dump), paths excluded so
// that a run can be moved.
inline std::uint64_t config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("paths");
  return fnv1a64(j.dump());
}

}  // namespace srcaware
