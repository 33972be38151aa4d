#pragma once

// Hierarchical fusion: variants of one stage are aggregated first, then scans
// predicted as source 0 take the Stage 1 label and all others the majority of
// the three stage labels.
//
// Final prediction file:
//   scan_id,label,route,predicted_source,stage1_label,stage2a_label,stage2b_label,tie_flag,score
//
// score is a COVID score for ranking (AUC): the Stage 1 mean probability on the
// source-0 route, else the mean of the three stage means.

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "srcaware/csv.hpp"
#include "srcaware/error.hpp"
#include "srcaware/predictions.hpp"

namespace srcaware {

enum class WithinStageRule { majority_then_mean_prob, mean_prob };

inline std::string to_string(WithinStageRule r) {
  return r == WithinStageRule::majority_then_mean_prob ? "majority_then_mean_prob" : "mean_prob";
}

inline WithinStageRule parse_within_stage_rule(const std::string& s) {
  if (s == "majority_then_mean_prob") return WithinStageRule::majority_then_mean_prob;
  if (s == "mean_prob") return WithinStageRule::mean_prob;
  throw Error("unknown within-stage rule: " + s);
}

struct VoteConfig {
  WithinStageRule within_stage_rule = WithinStageRule::majority_then_mean_prob;
  bool source0_route = true;
};

inline const std::array<std::string, 3> kStages{"stage1", "stage2a", "stage2b"};

// One stage's aggregated decision for one scan.
struct StageVote {
  std::string scan_id;
  std::string expert_id;
  std::array<double, 2> mean_probs{0.5, 0.5};
  int label = 0;
  int variants = 0;
  bool tie_flag = false;  // decided by an exact 0.5 mean probability
};

inline StageVote within_stage_vote(const std::vector<ExpertPrediction>& preds, WithinStageRule rule) {
  require(!preds.empty(), "within-stage vote needs at least one prediction");
  StageVote v;
  v.scan_id = preds.front().scan_id;
  v.expert_id = preds.front().expert_id;
  v.variants = static_cast<int>(preds.size());
  v.mean_probs = {0.0, 0.0};
  int ones = 0;
  for (const auto& p : preds) {
    require(p.expert_id == v.expert_id, "within-stage vote mixes " + v.expert_id + " and " + p.expert_id);
    require(p.scan_id == v.scan_id, "within-stage vote mixes scans " + v.scan_id + " and " + p.scan_id);
    check_probabilities(p);
    v.mean_probs[0] += p.probs[0];
    v.mean_probs[1] += p.probs[1];
    ones += p.label();
  }
  const double n = static_cast<double>(preds.size());
  v.mean_probs[0] /= n, v.mean_probs[1] /= n;
  const int zeros = v.variants - ones;
  if (rule == WithinStageRule::majority_then_mean_prob && ones != zeros) {
    v.label = ones > zeros ? 1 : 0;
  } else {
    v.label = v.mean_probs[1] >= 0.5 ? 1 : 0;
    v.tie_flag = v.mean_probs[1] == 0.5;
  }
  return v;
}

inline int cross_expert_vote(int s1, int s2a, int s2b) {
  for (int l : {s1, s2a, s2b}) require(l == 0 || l == 1, "stage labels must be 0 or 1");
  return s1 + s2a + s2b >= 2 ? 1 : 0;
}

enum class Route { stage1_only, three_expert_vote };

inline std::string to_string(Route r) { return r == Route::stage1_only ? "stage1_only" : "three_expert_vote"; }

struct FinalPrediction {
  std::string scan_id;
  int label = 0;
  Route route = Route::three_expert_vote;
  int predicted_source = 0;
  std::array<int, 3> stage_labels{};
  bool tie_flag = false;
  double score = 0.5;
};

inline FinalPrediction route_and_predict(const SourcePrediction& src, const std::array<StageVote, 3>& stages,
                                         const VoteConfig& cfg) {
  for (std::size_t i = 0; i < 3; ++i) {
    require(stages[i].variants > 0, "missing " + kStages[i] + " prediction for scan " + src.scan_id);
    require(stages[i].expert_id == kStages[i], "expected a " + kStages[i] + " prediction, got " + stages[i].expert_id);
    require(stages[i].scan_id == src.scan_id, "stage prediction for " + stages[i].scan_id + " does not match scan " +
                                                  src.scan_id);
  }
  require(src.predicted_source >= 0 && src.predicted_source <= 3, "predicted_source out of range");
  FinalPrediction f;
  f.scan_id = src.scan_id;
  f.predicted_source = src.predicted_source;
  f.stage_labels = {stages[0].label, stages[1].label, stages[2].label};
  if (cfg.source0_route && src.predicted_source == 0) {
    f.route = Route::stage1_only;
    f.label = stages[0].label;
    f.tie_flag = stages[0].tie_flag;
    f.score = stages[0].mean_probs[1];
  } else {
    f.route = Route::three_expert_vote;
    f.label = cross_expert_vote(f.stage_labels[0], f.stage_labels[1], f.stage_labels[2]);
    f.tie_flag = stages[0].tie_flag || stages[1].tie_flag || stages[2].tie_flag;
    f.score = (stages[0].mean_probs[1] + stages[1].mean_probs[1] + stages[2].mean_probs[1]) / 3.0;
  }
  return f;
}

// Fuses every scan that has a source prediction. `expert_preds` may hold any
// number of variants per stage.
inline std::vector<FinalPrediction> fuse(const std::vector<SourcePrediction>& sources,
                                         const std::vector<ExpertPrediction>& expert_preds, const VoteConfig& cfg) {
  std::map<std::string, std::array<std::vector<ExpertPrediction>, 3>> by_scan;
  for (const auto& p : expert_preds) {
    std::size_t k = 0;
    while (k < 3 && kStages[k] != p.expert_id) ++k;
    require(k < 3, "unknown expert_id " + p.expert_id);
    by_scan[p.scan_id][k].push_back(p);
  }
  std::vector<FinalPrediction> out;
  for (const auto& s : sources) {
    const auto it = by_scan.find(s.scan_id);
    std::array<StageVote, 3> votes;
    for (std::size_t k = 0; k < 3; ++k) {
      require(it != by_scan.end() && !it->second[k].empty(),
              "missing " + kStages[k] + " prediction for scan " + s.scan_id);
      votes[k] = within_stage_vote(it->second[k], cfg.within_stage_rule);
    }
    out.push_back(route_and_predict(s, votes, cfg));
  }
  return out;
}

inline void write_final_predictions(const std::filesystem::path& path, const std::vector<FinalPrediction>& preds) {
  csv::Table t;
  t.header = {"scan_id", "label", "route", "predicted_source", "stage1_label", "stage2a_label", "stage2b_label",
              "tie_flag", "score"};
  for (const auto& p : preds)
    t.rows.push_back({p.scan_id, std::to_string(p.label), to_string(p.route), std::to_string(p.predicted_source),
                      std::to_string(p.stage_labels[0]), std::to_string(p.stage_labels[1]),
                      std::to_string(p.stage_labels[2]), p.tie_flag ? "1" : "0", csv::fmt(p.score)});
  csv::write(path, t);
}

inline std::vector<FinalPrediction> read_final_predictions(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  std::vector<FinalPrediction> out;
  for (const auto& r : t.rows) {
    FinalPrediction p;
    p.scan_id = r[t.column("scan_id")];
    p.label = std::stoi(r[t.column("label")]);
    const auto& route = r[t.column("route")];
    require(route == "stage1_only" || route == "three_expert_vote", "unknown route " + route);
    p.route = route == "stage1_only" ? Route::stage1_only : Route::three_expert_vote;
    p.predicted_source = std::stoi(r[t.column("predicted_source")]);
    for (std::size_t k = 0; k < 3; ++k) p.stage_labels[k] = std::stoi(r[t.column(kStages[k] + "_label")]);
    p.tie_flag = r[t.column("tie_flag")] == "1";
    p.score = std::stod(r[t.column("score")]);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace srcaware
