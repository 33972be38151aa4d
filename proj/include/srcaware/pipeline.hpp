#pragma once

// Command implementations behind the CLI. Layout under output_root:
//
//   prep/                       stems per scan and view, index.csv
//   train/stage1/<variant>/     checkpoint.ckpt, log.json, augment_log.csv
//   train/stage2a/<variant>/    checkpoint.ckpt, log.json
//   train/stage2b/<variant>/    checkpoint.ckpt, log.json
//   train/stage3/source_clf/    checkpoint.ckpt, log.json
//   predict/                    expert_predictions.csv, source_predictions.csv
//   fuse/                       final_predictions.csv
//   evaluate/                   metrics.json
//   report/                     report.md
//
// Every output directory (and data_root after synth) gets run_info.json with
// the resolved config, its hash and the ledger hash.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "srcaware/config.hpp"
#include "srcaware/ensemble.hpp"
#include "srcaware/expert3d.hpp"
#include "srcaware/expert_ctx.hpp"
#include "srcaware/expert_slice.hpp"
#include "srcaware/ledger.hpp"
#include "srcaware/manifest.hpp"
#include "srcaware/metrics.hpp"
#include "srcaware/nn/checkpoint.hpp"
#include "srcaware/source_clf.hpp"
#include "srcaware/synth.hpp"
#include "srcaware/volume_io.hpp"
#include "srcaware/volume_prep.hpp"

namespace srcaware {

namespace fs = std::filesystem;
using nlohmann::json;

// An error with a stable, machine-readable code.
class CommandError : public Error {
 public:
  CommandError(std::string code, const std::string& what) : Error(what), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

inline void fail(const std::string& code, const std::string& what) { throw CommandError(code, what); }

enum class Stage { s1, s2a, s2b, s3 };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::s1: return "1";
    case Stage::s2a: return "2a";
    case Stage::s2b: return "2b";
    case Stage::s3: return "3";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "1") return Stage::s1;
  if (s == "2a") return Stage::s2a;
  if (s == "2b") return Stage::s2b;
  if (s == "3") return Stage::s3;
  fail("invalid_argument", "unknown stage '" + s + "' (expected 1, 2a, 2b or 3)");
  return Stage::s1;
}

// ---------------------------------------------------------------------------
// Run context

struct RunContext {
  RunConfig cfg;
  SplitLedger ledger;
  std::string corrections_text;
  std::ostream* log = &std::cerr;

  fs::path data() const { return cfg.data_root; }
  fs::path out() const { return cfg.output_root; }
  fs::path prep_dir() const { return out() / "prep"; }
  fs::path train_dir(const std::string& stage, const std::string& variant) const {
    return out() / "train" / stage / variant;
  }
  fs::path predict_dir() const { return out() / "predict"; }
  fs::path fuse_dir() const { return out() / "fuse"; }
  fs::path evaluate_dir() const { return out() / "evaluate"; }
  fs::path report_dir() const { return out() / "report"; }

  std::uint64_t ledger_hash() const { return fnv1a64(format_ledger(ledger) + corrections_text); }

  void note(const std::string& msg) const {
    if (log) *log << "[srcaware] " << msg << std::endl;
  }
};

inline RunContext make_context(const RunConfig& cfg, std::ostream* log = &std::cerr) {
  RunContext ctx;
  ctx.cfg = cfg;
  ctx.log = log;
  std::vector<CorrectionRecord> corrections;
  if (cfg.corrections.empty()) {
    corrections = paper_corrections();
  } else {
    if (!fs::exists(cfg.corrections)) fail("io", "corrections file not found: " + cfg.corrections);
    corrections = read_corrections(fs::path(cfg.corrections));
  }
  std::ostringstream os;
  write_corrections(os, corrections);
  ctx.corrections_text = os.str();
  ctx.ledger = scale_ledger(apply_corrections(official_ledger(), corrections), cfg.ledger_scale);
  return ctx;
}

inline void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("io", "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail("io", "cannot read " + path.string());
  return json::parse(in);
}

inline void write_run_info(const RunContext& ctx, const fs::path& dir, const std::string& command) {
  json j;
  j["command"] = command;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = ctx.cfg.seed;
  j["config_hash"] = nn::hex64(config_hash(ctx.cfg));
  j["ledger_hash"] = nn::hex64(ctx.ledger_hash());
  j["config"] = to_json(ctx.cfg);
  write_json(dir / "run_info.json", j);
}

inline Manifest load_data_manifest(const RunContext& ctx) {
  const fs::path p = ctx.data() / "manifest.csv";
  if (!fs::exists(p)) fail("missing_dependency", "data manifest not found: " + p.string() + "; run synth first");
  return read_manifest(p);
}

// ---------------------------------------------------------------------------
// synth

inline Manifest cmd_synth(const RunContext& ctx) {
  ctx.note("synth: generating " + std::to_string(ctx.ledger.total(Split::train) + ctx.ledger.total(Split::val) +
                                                 ctx.ledger.total(Split::test)) +
           " scans into " + ctx.data().string());
  Manifest m = generate_dataset(ctx.ledger, ctx.cfg.seed, ctx.data());
  std::ofstream(ctx.data() / "ledger.txt", std::ios::trunc) << format_ledger(ctx.ledger);
  std::ofstream(ctx.data() / "corrections.txt", std::ios::trunc) << ctx.corrections_text;
  write_run_info(ctx, ctx.data(), "synth");
  return m;
}

// ---------------------------------------------------------------------------
// prep: stems of every non-excluded scan, per view
//
//   3d   [16, 32, 32]  pooled 3D canonical volume (Stage 1, Stage 3)
//   24   [24, G, G]    pooled 2D slice stack (Stage 2a depth 24, Stage 2b)
//   128  [128, G, G]   slices of the 3D canonical volume (Stage 2a depth 128)

enum class StemKind { s3d, s24, s128 };

inline std::string to_string(StemKind k) { return k == StemKind::s3d ? "3d" : k == StemKind::s24 ? "24" : "128"; }

inline StemKind stem_kind_for_depth(int depth) {
  require(depth == 24 || depth == 128, "stage2a depth must be 24 or 128");
  return depth == 24 ? StemKind::s24 : StemKind::s128;
}

// Scans that share a volume (borrowed validation rows) share their stems.
inline std::string stem_key(const ScanEntry& e) { return fs::path(e.path).stem().string(); }

inline fs::path stem_path(const RunContext& ctx, const ScanEntry& e, View v, StemKind k) {
  return ctx.prep_dir() / "stems" / stem_key(e) / (to_string(v) + "." + to_string(k) + ".ctv");
}

inline VolumeF tensor_to_volume(const nn::Tensor<float>& t) {
  require(t.shape.size() == 4 && t.shape[0] == 1, "stem must be [1, D, H, W]");
  return VolumeF(Shape3{t.shape[1], t.shape[2], t.shape[3]}, t.data);
}

inline nn::Tensor<float> volume_to_tensor(const VolumeF& v) {
  return nn::Tensor<float>({1, v.slices(), v.rows(), v.cols()}, v.data());
}

inline ScanVolume load_trimmed(const RunContext& ctx, const ScanEntry& e) {
  const fs::path p = ctx.data() / e.path;
  if (!fs::exists(p)) fail("io", "volume not found for scan " + e.scan_id + ": " + p.string());
  ScanVolume s{read_volume(p), e.scan_id, e.source, e.label, {}};
  return trim_slices(s, ctx.cfg.slice_threshold, ctx.cfg.trim_fraction);
}

inline ScanVolume view_of(const ScanVolume& trimmed, View v) {
  return v == View::orig ? trimmed : extract_lung(trimmed);
}

inline const std::array<View, 2> kAllViews{View::orig, View::lung};

inline void cmd_prep(const RunContext& ctx) {
  const Manifest m = load_data_manifest(ctx);
  const auto& c = ctx.cfg;
  std::set<std::string> done;
  csv::Table index;
  index.header = {"scan_id", "stem_key", "warnings"};
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t n = 0;
  for (const auto& e : m.entries) {
    if (e.excluded) continue;
    std::vector<std::string> warnings;
    if (done.insert(stem_key(e)).second) {
      const ScanVolume trimmed = load_trimmed(ctx, e);
      for (View v : kAllViews) {
        const ScanVolume view = view_of(trimmed, v);
        for (const auto& w : view.warnings) warnings.push_back(w);
        const CanonicalVolume3D c3 = canonicalize_3d(view);
        write_volume(stem_path(ctx, e, v, StemKind::s3d), tensor_to_volume(stem_3d<float>(c3.volume(), c.model3d.stem)));
        write_volume(stem_path(ctx, e, v, StemKind::s128), tensor_to_volume(slice_stem<float>(c3.volume(), c.encoder.grid)));
        const SliceStack2D c2 = canonicalize_2d(view);
        write_volume(stem_path(ctx, e, v, StemKind::s24), tensor_to_volume(slice_stem<float>(c2.volume(), c.encoder.grid)));
      }
      if (++n % 50 == 0) ctx.note("prep: " + std::to_string(n) + " volumes");
    }
    std::string w;
    for (const auto& s : warnings) w += (w.empty() ? "" : "; ") + s;
    index.rows.push_back({e.scan_id, stem_key(e), w});
  }
  csv::write(ctx.prep_dir() / "index.csv", index);
  write_run_info(ctx, ctx.prep_dir(), "prep");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ctx.note("prep: " + std::to_string(n) + " volumes in " + csv::fmt(secs, 1) + " s");
}

inline void require_prep(const RunContext& ctx) {
  if (!fs::exists(ctx.prep_dir() / "run_info.json"))
    fail("missing_dependency", "preprocessed stems not found in " + ctx.prep_dir().string() + "; run prep first");
}

inline nn::Tensor<float> load_stem(const RunContext& ctx, const ScanEntry& e, View v, StemKind k) {
  const fs::path p = stem_path(ctx, e, v, k);
  if (!fs::exists(p)) fail("missing_dependency", "stem not found for scan " + e.scan_id + ": " + p.string());
  return volume_to_tensor(read_volume(p));
}

inline std::vector<nn::Tensor<float>> load_views(const RunContext& ctx, const ScanEntry& e,
                                                 const std::vector<View>& views, StemKind k) {
  std::vector<nn::Tensor<float>> out;
  for (View v : views) out.push_back(load_stem(ctx, e, v, k));
  return out;
}

inline int label_of(const ScanEntry& e) {
  if (!e.label) fail("invalid_input", "scan " + e.scan_id + " has no label");
  return *e.label;
}

// ---------------------------------------------------------------------------
// train

inline const std::string kCheckpointFile = "checkpoint.ckpt";

inline std::string stage_dir_name(Stage s) { return "stage" + to_string(s); }

inline std::string stage1_variant(const RunConfig& c) { return to_string(c.input_kind); }

inline fs::path checkpoint_path(const RunContext& ctx, Stage s, const std::string& variant) {
  return ctx.train_dir(stage_dir_name(s), variant) / kCheckpointFile;
}

inline nn::Checkpoint require_checkpoint(const RunContext& ctx, Stage s, const std::string& variant,
                                         const std::string& needed_by) {
  const fs::path p = checkpoint_path(ctx, s, variant);
  if (!fs::exists(p))
    fail("missing_dependency", needed_by + " requires the stage " + to_string(s) + " checkpoint (" + variant + ") at " +
                                   p.string() + "; run train --stage " + to_string(s) + " first");
  return nn::load_checkpoint(p);
}

inline json train_summary(const TrainLog& log) {
  json j = log.to_json();
  if (log.best_epoch >= 0 && log.best().val) {
    const auto& v = *log.best().val;
    j["best"] = {{"Macro-F1", v.macro_f1}, {"ACC", v.acc}, {"AUC", v.auc ? json(*v.auc) : json(nullptr)}};
  }
  return j;
}

inline void save_stage(const RunContext& ctx, Stage s, const std::string& variant, const nn::ParamStore<float>& params,
                       const json& metrics, const json& extra = json::object()) {
  const fs::path dir = ctx.train_dir(stage_dir_name(s), variant);
  nn::Checkpoint ck;
  ck.stage = stage_dir_name(s);
  ck.variant_id = variant;
  ck.config_hash = config_hash(ctx.cfg);
  ck.config = to_json(ctx.cfg);
  ck.metrics = metrics;
  ck.extra = extra;
  ck.params = params;
  nn::save_checkpoint(dir / kCheckpointFile, ck);
  write_json(dir / "log.json", metrics);
  write_run_info(ctx, dir, "train --stage " + to_string(s) + " --variant " + variant);
}

inline std::string best_line(const TrainLog& log) {
  if (log.best_epoch < 0 || !log.best().val) return "no validation";
  const auto& v = *log.best().val;
  return "best epoch " + std::to_string(log.best_epoch) + ", val Macro-F1 " + csv::fmt(v.macro_f1, 4) + ", ACC " +
         csv::fmt(v.acc, 4);
}

inline void write_augment_log(const fs::path& path, const AugmentLog& log) {
  csv::Table t;
  t.header = {"call", "scan_id", "slice0", "slices", "row0", "rows", "col0", "cols", "rotation_degrees"};
  for (std::size_t i = 0; i < log.entries.size(); ++i) {
    const auto& e = log.entries[i];
    const auto& b = e.params.crop;
    t.rows.push_back({std::to_string(i), e.scan_id, std::to_string(b.slice0), std::to_string(b.slices),
                      std::to_string(b.row0), std::to_string(b.rows), std::to_string(b.col0), std::to_string(b.cols),
                      csv::fmt(e.params.rotation_degrees, 6)});
  }
  csv::write(path, t);
}

inline void train_stage1(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const Manifest m = load_data_manifest(ctx);
  const auto views = views_of(c.input_kind);
  AugmentBounds bounds = c.augment;
  if (!rotation_enabled(c.input_kind)) bounds.rotation_min = bounds.rotation_max = 0.0;
  AugmentLog aug;

  Stage1Data data;
  for (const ScanEntry* e : m.select(Split::train))
    for (View v : views) {
      Stage1Sample s;
      s.label = label_of(*e);
      s.input = [&ctx, &aug, &bounds, e, v, stem = load_stem(ctx, *e, v, StemKind::s3d)](Rng& r) {
        if (r.uniform() >= ctx.cfg.augment_prob) return stem;
        const CanonicalVolume3D c3 = canonicalize_3d(view_of(load_trimmed(ctx, *e), v));
        const AugmentParams p = sample_augment_params(r, bounds, kCanonical3DShape);
        const CanonicalVolume3D a = augment_scan(c3, p, &aug, e->scan_id);
        return stem_3d<float>(a.volume(), ctx.cfg.model3d.stem);
      };
      data.train.push_back(std::move(s));
    }
  for (const ScanEntry* e : m.select(Split::val)) {
    data.val_labels.push_back(label_of(*e));
    data.val_views.push_back(load_views(ctx, *e, views, StemKind::s3d));
  }
  const std::string variant = stage1_variant(c);
  ctx.note("train stage 1 (" + variant + "): " + std::to_string(data.train.size()) + " samples");
  Rng init(c.seed, "init/stage1/" + variant), rng(c.seed, "train/stage1/" + variant);
  Volume3DModel<float> model(c.model3d, init);
  const TrainLog log = srcaware::train_stage1(model, data, c.stage1.train_config(), rng);
  ctx.note("train stage 1: " + best_line(log) + ", " + std::to_string(aug.entries.size()) + " augmentations");
  json metrics = train_summary(log);
  metrics["augment_calls"] = aug.entries.size();
  save_stage(ctx, Stage::s1, variant, model.params, metrics);
  write_augment_log(ctx.train_dir("stage1", variant) / "augment_log.csv", aug);
}

inline Stage2aData stage2_data(const RunContext& ctx, const Manifest& m, StemKind k) {
  const std::vector<View> views(kAllViews.begin(), kAllViews.end());
  Stage2aData data;
  for (const ScanEntry* e : m.select(Split::train))
    for (View v : views) data.train.push_back({label_of(*e), load_stem(ctx, *e, v, k)});
  for (const ScanEntry* e : m.select(Split::val)) {
    data.val_labels.push_back(label_of(*e));
    data.val_views.push_back(load_views(ctx, *e, views, k));
  }
  return data;
}

inline void train_stage2a_variant(const RunContext& ctx, const Manifest& m, const std::string& variant) {
  const auto& c = ctx.cfg;
  const auto spec = parse_stage2a_variant(variant);
  const Stage2aData data = stage2_data(ctx, m, stem_kind_for_depth(spec.depth));
  ctx.note("train stage 2a (" + variant + "): " + std::to_string(data.train.size()) + " samples");
  Rng init(c.seed, "init/stage2a/" + variant), pre(c.seed, "pretrain/stage2a/" + variant),
      rng(c.seed, "train/stage2a/" + variant);
  SliceModel<float> model(c.encoder, init);
  const TrainLog pl = pretrain_slice_encoder(model.params, model.enc, c.pretrain, pre);
  const TrainLog log = srcaware::train_stage2a(model, data, Stage2aConfig{spec.sampling, c.stage2a_k},
                                               c.stage2a.train_config(), rng);
  ctx.note("train stage 2a (" + variant + "): " + best_line(log));
  json metrics = train_summary(log);
  metrics["pretrain_final_loss"] = pl.epochs.back().train_loss;
  save_stage(ctx, Stage::s2a, variant, model.params, metrics);
}

inline SliceModel<float> load_stage2a(const RunContext& ctx, const nn::Checkpoint& ck) {
  Rng dummy(0);
  SliceModel<float> m(ctx.cfg.encoder, dummy);
  nn::load_values(m.params, ck.params);
  return m;
}

inline void train_stage2b_variant(const RunContext& ctx, const Manifest& m, const std::string& variant) {
  const auto& c = ctx.cfg;
  const nn::Checkpoint enc_ck = require_checkpoint(ctx, Stage::s2a, c.stage2b_encoder_variant, "stage 2b");
  const SliceModel<float> s2a = load_stage2a(ctx, enc_ck);
  const Stage2aData data = stage2_data(ctx, m, StemKind::s24);
  ctx.note("train stage 2b (" + variant + "): " + std::to_string(data.train.size()) + " samples");
  Rng init(c.seed, "init/stage2b/" + variant), rng(c.seed, "train/stage2b/" + variant);
  ContextModel<float> model = build_stage2b(s2a, parse_stage2b_variant(variant), c.context, init);
  const TrainLog log = srcaware::train_stage2b(model, data, c.stage2b.train_config(), rng);
  ctx.note("train stage 2b (" + variant + "): " + best_line(log));
  save_stage(ctx, Stage::s2b, variant, model.params, train_summary(log),
             {{"encoder_variant", c.stage2b_encoder_variant}});
}

inline ContextModel<float> load_stage2b(const RunContext& ctx, const std::string& variant, const nn::Checkpoint& ck) {
  Rng dummy(0);
  const SliceModel<float> s2a(ctx.cfg.encoder, dummy);
  ContextModel<float> m = build_stage2b(s2a, parse_stage2b_variant(variant), ctx.cfg.context, dummy);
  nn::load_values(m.params, ck.params);
  return m;
}

inline Volume3DModel<float> load_stage1(const RunContext& ctx, const nn::Checkpoint& ck) {
  Rng dummy(0);
  Volume3DModel<float> m(ctx.cfg.model3d, dummy);
  nn::load_values(m.params, ck.params);
  return m;
}

inline const std::string kSourceVariant = "source_clf";

inline void train_stage3(const RunContext& ctx) {
  const auto& c = ctx.cfg;
  const nn::Checkpoint s1 = require_checkpoint(ctx, Stage::s1, stage1_variant(c), "stage 3");
  const Manifest m = load_data_manifest(ctx);
  Rng init(c.seed, "init/stage3"), rng(c.seed, "train/stage3");
  Volume3DModel<float> model = build_source_clf(load_stage1(ctx, s1), init);
  // Source cues sit outside the lungs, so the classifier sees the original view.
  SourceData data;
  for (const ScanEntry* e : m.select(Split::train)) {
    if (!e->source) fail("invalid_input", "training scan " + e->scan_id + " has no source");
    data.train_stems.push_back(load_stem(ctx, *e, View::orig, StemKind::s3d));
    data.train_sources.push_back(*e->source);
  }
  for (const ScanEntry* e : m.select(Split::val)) {
    if (!e->source) fail("invalid_input", "validation scan " + e->scan_id + " has no source");
    data.val_stems.push_back(load_stem(ctx, *e, View::orig, StemKind::s3d));
    data.val_sources.push_back(*e->source);
  }
  ctx.note("train stage 3: " + std::to_string(data.train_stems.size()) + " samples");
  const SourceTrainResult r = train_source_clf(model, data, c.stage3.train_config(), rng);
  ctx.note("train stage 3: val source ACC " + csv::fmt(r.val_acc, 4));
  json metrics = r.log.to_json();
  metrics["best"] = {{"ACC", r.val_acc}, {"Macro-F1", r.val_macro_f1}};
  save_stage(ctx, Stage::s3, kSourceVariant, model.params, metrics);
}

// Trains one stage; `variant` empty means every configured variant.
inline void cmd_train(const RunContext& ctx, Stage stage, const std::string& variant = "") {
  require_prep(ctx);
  const auto& c = ctx.cfg;
  auto pick = [&](const std::vector<std::string>& all) {
    if (variant.empty()) return all;
    if (std::find(all.begin(), all.end(), variant) == all.end())
      fail("invalid_argument", "variant '" + variant + "' is not configured for stage " + to_string(stage));
    return std::vector<std::string>{variant};
  };
  switch (stage) {
    case Stage::s1:
      pick({stage1_variant(c)});
      train_stage1(ctx);
      break;
    case Stage::s2a: {
      const Manifest m = load_data_manifest(ctx);
      for (const auto& v : pick(c.stage2a_variants)) train_stage2a_variant(ctx, m, v);
      break;
    }
    case Stage::s2b: {
      require_checkpoint(ctx, Stage::s2a, c.stage2b_encoder_variant, "stage 2b");
      const Manifest m = load_data_manifest(ctx);
      for (const auto& v : pick(c.stage2b_variants)) train_stage2b_variant(ctx, m, v);
      break;
    }
    case Stage::s3:
      pick({kSourceVariant});
      train_stage3(ctx);
      break;
  }
}

// ---------------------------------------------------------------------------
// predict

inline const std::string kExpertFile = "expert_predictions.csv";
inline const std::string kSourceFile = "source_predictions.csv";
inline const std::string kFinalFile = "final_predictions.csv";

template <class F>
ExpertPrediction view_mean(const std::vector<nn::Tensor<float>>& views, const std::string& scan_id,
                           const std::string& expert, const std::string& variant, F&& prob) {
  double p = 0;
  for (const auto& v : views) p += prob(v);
  p /= static_cast<double>(views.size());
  return ExpertPrediction{scan_id, {1.0 - p, p}, expert, variant};
}

// Predicts every non-excluded scan of `split` with every trained expert and
// the source classifier.
inline void cmd_predict(const RunContext& ctx, Split split = Split::test) {
  require_prep(ctx);
  const auto& c = ctx.cfg;
  const Manifest m = load_data_manifest(ctx);
  const std::string s1v = stage1_variant(c);
  const Volume3DModel<float> s1 = load_stage1(ctx, require_checkpoint(ctx, Stage::s1, s1v, "predict"));
  std::vector<std::pair<std::string, SliceModel<float>>> s2a;
  for (const auto& v : c.stage2a_variants)
    s2a.emplace_back(v, load_stage2a(ctx, require_checkpoint(ctx, Stage::s2a, v, "predict")));
  std::vector<std::pair<std::string, ContextModel<float>>> s2b;
  for (const auto& v : c.stage2b_variants)
    s2b.emplace_back(v, load_stage2b(ctx, v, require_checkpoint(ctx, Stage::s2b, v, "predict")));
  const nn::Checkpoint s3ck = require_checkpoint(ctx, Stage::s3, kSourceVariant, "predict");
  Rng dummy(0);
  Volume3DModel<float> s3(c.model3d, dummy);
  s3.replace_head(kNumSources, true, dummy);
  nn::load_values(s3.params, s3ck.params);

  const auto views1 = views_of(c.input_kind);
  const std::vector<View> views2(kAllViews.begin(), kAllViews.end());
  std::vector<ExpertPrediction> experts;
  std::vector<SourcePrediction> sources;
  auto entries = m.select(split);
  std::sort(entries.begin(), entries.end(), [](auto a, auto b) { return a->scan_id < b->scan_id; });
  ctx.note("predict: " + std::to_string(entries.size()) + " " + to_string(split) + " scans");
  for (const ScanEntry* e : entries) {
    const auto& id = e->scan_id;
    experts.push_back(view_mean(load_views(ctx, *e, views1, StemKind::s3d), id, "stage1", s1v,
                                [&](const auto& x) { return predict_probs_3d(s1, x)[1]; }));
    std::map<StemKind, std::vector<nn::Tensor<float>>> stems;
    for (const auto& [v, model] : s2a) {
      const StemKind k = stem_kind_for_depth(parse_stage2a_variant(v).depth);
      if (!stems.count(k)) stems[k] = load_views(ctx, *e, views2, k);
      experts.push_back(view_mean(stems[k], id, "stage2a", v, [&](const auto& x) { return scan_probability(model, x)[1]; }));
    }
    if (!stems.count(StemKind::s24)) stems[StemKind::s24] = load_views(ctx, *e, views2, StemKind::s24);
    for (const auto& [v, model] : s2b)
      experts.push_back(view_mean(stems[StemKind::s24], id, "stage2b", v, [&](const auto& x) { return forward_ctx(model, x)[1]; }));
    sources.push_back(predict_source(s3, load_stem(ctx, *e, View::orig, StemKind::s3d), id));
  }
  write_expert_predictions(ctx.predict_dir() / kExpertFile, experts);
  write_source_predictions(ctx.predict_dir() / kSourceFile, sources);
  write_run_info(ctx, ctx.predict_dir(), "predict");
}

// ---------------------------------------------------------------------------
// fuse

inline std::vector<FinalPrediction> cmd_fuse(const RunContext& ctx) {
  const fs::path ep = ctx.predict_dir() / kExpertFile, sp = ctx.predict_dir() / kSourceFile;
  if (!fs::exists(ep) || !fs::exists(sp))
    fail("missing_dependency", "predictions not found in " + ctx.predict_dir().string() + "; run predict first");
  auto sources = read_source_predictions(sp);
  std::sort(sources.begin(), sources.end(), [](const auto& a, const auto& b) { return a.scan_id < b.scan_id; });
  std::vector<FinalPrediction> out;
  try {
    out = fuse(sources, read_expert_predictions(ep), ctx.cfg.vote);
  } catch (const CommandError&) {
    throw;
  } catch (const Error& e) {
    fail("invalid_input", e.what());
  }
  write_final_predictions(ctx.fuse_dir() / kFinalFile, out);
  write_run_info(ctx, ctx.fuse_dir(), "fuse");
  long s0 = 0;
  for (const auto& f : out) s0 += f.route == Route::stage1_only;
  ctx.note("fuse: " + std::to_string(out.size()) + " scans, " + std::to_string(s0) + " on the source-0 route");
  return out;
}

// ---------------------------------------------------------------------------
// evaluate

struct TruthRow {
  int source = 0;
  int label = 0;
};

inline std::map<std::string, TruthRow> read_truth(const fs::path& path) {
  if (!fs::exists(path)) fail("missing_dependency", "test labels not found: " + path.string());
  const auto t = csv::read(path);
  std::map<std::string, TruthRow> out;
  for (const auto& r : t.rows)
    out[r[t.column("scan_id")]] = {std::stoi(r[t.column("source")]), std::stoi(r[t.column("label")])};
  return out;
}

inline json cmd_evaluate(const RunContext& ctx) {
  const fs::path fp = ctx.fuse_dir() / kFinalFile;
  if (!fs::exists(fp)) fail("missing_dependency", "final predictions not found: " + fp.string() + "; run fuse first");
  const auto finals = read_final_predictions(fp);
  const auto truth = read_truth(ctx.data() / "test_labels.csv");
  auto truth_of = [&](const std::string& id) {
    const auto it = truth.find(id);
    if (it == truth.end()) fail("invalid_input", "no ground truth for scan " + id);
    return it->second;
  };

  std::vector<int> labels, preds, srcs;
  std::vector<double> scores;
  for (const auto& f : finals) {
    const TruthRow t = truth_of(f.scan_id);
    labels.push_back(t.label);
    srcs.push_back(t.source);
    preds.push_back(f.label);
    scores.push_back(f.score);
  }
  json j = evaluate_binary(labels, preds, scores, srcs).to_json();
  j["n_scans"] = finals.size();

  const auto sources = read_source_predictions(ctx.predict_dir() / kSourceFile);
  std::vector<int> st, sp;
  for (const auto& s : sources) {
    st.push_back(truth_of(s.scan_id).source);
    sp.push_back(s.predicted_source);
  }
  const auto [sacc, sf1] = multiclass_acc_macro_f1(st, sp, kNumSources);
  j["source_accuracy"] = sacc;
  j["source_macro_f1"] = sf1;

  // Per expert: the within-stage vote, and each variant on its own.
  const auto experts = read_expert_predictions(ctx.predict_dir() / kExpertFile);
  std::map<std::string, std::map<std::string, std::vector<ExpertPrediction>>> by_stage_scan;
  std::map<std::string, std::vector<ExpertPrediction>> by_variant;
  for (const auto& p : experts) {
    by_stage_scan[p.expert_id][p.scan_id].push_back(p);
    by_variant[p.expert_id + "/" + p.variant_id].push_back(p);
  }
  auto report = [&](const std::vector<std::string>& ids, const std::vector<int>& pl, const std::vector<double>& sc) {
    std::vector<int> y, ss;
    for (const auto& id : ids) {
      const TruthRow t = truth_of(id);
      y.push_back(t.label);
      ss.push_back(t.source);
    }
    json r = evaluate_binary(y, pl, sc, ss).to_json();
    int n0 = 0, r0 = 0;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ss[i] == 0) ++n0, r0 += pl[i] == y[i];
    r["S0_accuracy"] = n0 ? json(static_cast<double>(r0) / n0) : json(nullptr);
    r.erase("warnings");
    return r;
  };
  json ex = json::object();
  for (const auto& [stage, scans] : by_stage_scan) {
    std::vector<std::string> ids;
    std::vector<int> pl;
    std::vector<double> sc;
    for (const auto& [id, ps] : scans) {
      const StageVote v = within_stage_vote(ps, ctx.cfg.vote.within_stage_rule);
      ids.push_back(id);
      pl.push_back(v.label);
      sc.push_back(v.mean_probs[1]);
    }
    ex[stage] = report(ids, pl, sc);
  }
  for (const auto& [key, ps] : by_variant) {
    std::vector<std::string> ids;
    std::vector<int> pl;
    std::vector<double> sc;
    for (const auto& p : ps) {
      ids.push_back(p.scan_id);
      pl.push_back(p.label());
      sc.push_back(p.probs[1]);
    }
    ex[key] = report(ids, pl, sc);
  }
  j["experts"] = ex;
  j["stage1_s0_accuracy"] = ex.contains("stage1") ? ex["stage1"]["S0_accuracy"] : json(nullptr);
  write_json(ctx.evaluate_dir() / "metrics.json", j);
  write_run_info(ctx, ctx.evaluate_dir(), "evaluate");
  ctx.note("evaluate: Macro-F1 " + csv::fmt(j["Macro-F1"].get<double>(), 4) + ", ACC " +
           csv::fmt(j["ACC"].get<double>(), 4) + ", source ACC " + csv::fmt(sacc, 4));
  return j;
}

// ---------------------------------------------------------------------------
// report

inline std::string cmd_report(const RunContext& ctx) {
  std::ostringstream md;
  md << "# Run report\n\n";
  md << "config hash `" << nn::hex64(config_hash(ctx.cfg)) << "`, ledger hash `" << nn::hex64(ctx.ledger_hash())
     << "`, seed " << ctx.cfg.seed << ", ledger scale " << ctx.cfg.ledger_scale << "\n\n";
  md << "## Split ledger\n\n```\n" << format_ledger(ctx.ledger) << "```\n\n";
  md << "## Corrections\n\n```\n" << ctx.corrections_text << "```\n\n";
  const fs::path sp = ctx.predict_dir() / kSourceFile;
  if (fs::exists(sp)) {
    const auto d = predicted_test_distribution(read_source_predictions(sp));
    md << "## Predicted test source distribution\n\n| S0 | S1 | S2 | S3 | Total |\n|---|---|---|---|---|\n";
    md << "| " << d[0] << " | " << d[1] << " | " << d[2] << " | " << d[3] << " | " << d[0] + d[1] + d[2] + d[3]
       << " |\n\n";
  }
  const fs::path mp = ctx.evaluate_dir() / "metrics.json";
  if (fs::exists(mp)) {
    const json j = read_json(mp);
    auto cell = [](const json& v) { return v.is_null() ? std::string("n/a") : csv::fmt(v.get<double>(), 4); };
    md << "## Test metrics\n\n| Model | ACC | Macro-F1 | AUC | S0 | S1 | S2 | S3 |\n|---|---|---|---|---|---|---|---|\n";
    auto row = [&](const std::string& name, const json& r) {
      md << "| " << name;
      for (const char* k : {"ACC", "Macro-F1", "AUC", "S0", "S1", "S2", "S3"}) md << " | " << cell(r[k]);
      md << " |\n";
    };
    row("fused", j);
    for (const auto& [k, v] : j["experts"].items()) row(k, v);
    md << "\nsource ACC " << cell(j["source_accuracy"]) << ", Stage 1 ACC on source 0 "
       << cell(j["stage1_s0_accuracy"]) << "\n";
  }
  const std::string text = md.str();
  fs::create_directories(ctx.report_dir());
  std::ofstream(ctx.report_dir() / "report.md", std::ios::trunc) << text;
  write_run_info(ctx, ctx.report_dir(), "report");
  return text;
}

}  // namespace srcaware
