#pragma once

// Binary classification metrics: accuracy, per-class and macro F1, rank-based
// AUC, and F1 restricted to each source.

#include <algorithm>
#include <array>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "srcaware/error.hpp"

namespace srcaware {

struct Confusion {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  long total() const { return tp + fp + tn + fn; }
};

inline void check_binary(std::span<const int> v, const char* what) {
  for (int x : v) require(x == 0 || x == 1, std::string(what) + " must be binary");
}

inline Confusion confusion(std::span<const int> labels, std::span<const int> preds) {
  require(labels.size() == preds.size(), "labels/predictions length mismatch");
  check_binary(labels, "labels");
  check_binary(preds, "predictions");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) (preds[i] == 1 ? c.tp : c.fn)++;
    else (preds[i] == 1 ? c.fp : c.tn)++;
  }
  return c;
}

inline double accuracy(const Confusion& c) {
  require(c.total() > 0, "accuracy of an empty sample");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

// F1 of class `cls` (1 = COVID, 0 = Non-COVID). A class that is neither present
// nor predicted scores 0 and adds a warning.
inline double class_f1(const Confusion& c, int cls, std::vector<std::string>* warnings = nullptr) {
  const long tp = cls == 1 ? c.tp : c.tn;
  const long fp = cls == 1 ? c.fp : c.fn;
  const long fn = cls == 1 ? c.fn : c.fp;
  const long denom = 2 * tp + fp + fn;
  if (denom == 0) {
    if (warnings) warnings->push_back("class " + std::to_string(cls) + " has no true and no predicted samples; F1 set to 0");
    return 0.0;
  }
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

inline double macro_f1(const Confusion& c, std::vector<std::string>* warnings = nullptr) {
  return 0.5 * (class_f1(c, 0, warnings) + class_f1(c, 1, warnings));
}

inline double macro_f1(std::span<const int> labels, std::span<const int> preds,
                       std::vector<std::string>* warnings = nullptr) {
  require(!labels.empty(), "macro_f1 of an empty sample");
  return macro_f1(confusion(labels, preds), warnings);
}

// Mann-Whitney AUC with half credit for tied scores.
inline double auc(std::span<const int> labels, std::span<const double> scores) {
  require(labels.size() == scores.size(), "labels/scores length mismatch");
  check_binary(labels, "labels");
  const long n1 = std::count(labels.begin(), labels.end(), 1);
  const long n0 = static_cast<long>(labels.size()) - n1;
  if (n1 == 0) throw Error("AUC undefined: no positive (class 1, COVID) samples");
  if (n0 == 0) throw Error("AUC undefined: no negative (class 0, Non-COVID) samples");

  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;  // sum of 1-based average ranks of positives
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += avg_rank;
    i = j;
  }
  const double u = rank_sum - 0.5 * static_cast<double>(n1) * static_cast<double>(n1 + 1);
  return u / (static_cast<double>(n1) * static_cast<double>(n0));
}

// Accuracy and unweighted mean of per-class F1 over `k` classes; classes never
// present nor predicted score 0.
inline std::pair<double, double> multiclass_acc_macro_f1(std::span<const int> labels, std::span<const int> preds, int k) {
  require(labels.size() == preds.size() && !labels.empty(), "multiclass metrics need equal, nonempty inputs");
  std::vector<long> tp(static_cast<std::size_t>(k)), fp(static_cast<std::size_t>(k)), fn(static_cast<std::size_t>(k));
  long correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < k && preds[i] >= 0 && preds[i] < k, "class index out of range");
    if (labels[i] == preds[i]) {
      ++correct;
      tp[static_cast<std::size_t>(labels[i])]++;
    } else {
      fp[static_cast<std::size_t>(preds[i])]++;
      fn[static_cast<std::size_t>(labels[i])]++;
    }
  }
  double f1 = 0.0;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    const long d = 2 * tp[c] + fp[c] + fn[c];
    f1 += d == 0 ? 0.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(d);
  }
  return {static_cast<double>(correct) / static_cast<double>(labels.size()), f1 / k};
}

enum class PerSourceMode { positive_f1, macro_f1 };

// F1 within each source subset. Subsets that are empty, or (positive mode)
// have no true and no predicted positives, are skipped with a warning.
inline std::map<int, double> per_source_f1(std::span<const int> labels, std::span<const int> preds,
                                           std::span<const int> sources, PerSourceMode mode = PerSourceMode::positive_f1,
                                           std::vector<std::string>* warnings = nullptr) {
  require(labels.size() == preds.size() && labels.size() == sources.size(), "per_source_f1 length mismatch");
  std::map<int, double> out;
  for (int s = 0; s < 4; ++s) {
    std::vector<int> l, p;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (sources[i] == s) l.push_back(labels[i]), p.push_back(preds[i]);
    if (l.empty()) {
      if (warnings) warnings->push_back("source " + std::to_string(s) + ": no samples; per-source F1 skipped");
      continue;
    }
    const Confusion c = confusion(l, p);
    if (mode == PerSourceMode::positive_f1) {
      if (c.tp + c.fn + c.fp == 0) {
        if (warnings)
          warnings->push_back("source " + std::to_string(s) +
                              ": no positive samples and no positive predictions; per-source F1 skipped");
        continue;
      }
      out[s] = class_f1(c, 1);
    } else {
      out[s] = macro_f1(c, warnings);
    }
  }
  return out;
}

struct MetricsReport {
  double acc = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> auc;
  std::map<int, double> per_source_f1;
  Confusion confusion;
  std::vector<std::string> warnings;

  // Keys follow the result-table headers: ACC, Macro-F1, AUC, S0..S3.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["ACC"] = acc;
    j["Macro-F1"] = macro_f1;
    j["AUC"] = auc ? nlohmann::json(*auc) : nlohmann::json(nullptr);
    for (int s = 0; s < 4; ++s) {
      auto it = per_source_f1.find(s);
      j["S" + std::to_string(s)] = it == per_source_f1.end() ? nlohmann::json(nullptr) : nlohmann::json(it->second);
    }
    j["confusion"] = {{"tp", confusion.tp}, {"fp", confusion.fp}, {"tn", confusion.tn}, {"fn", confusion.fn}};
    j["warnings"] = warnings;
    return j;
  }
};

// Full report. `scores` are COVID probabilities; when the labels are single-class
// the AUC error is recorded as a warning and AUC is left empty unless `strict_auc`.
inline MetricsReport evaluate_binary(std::span<const int> labels, std::span<const int> preds,
                                     std::span<const double> scores, std::span<const int> sources,
                                     PerSourceMode mode = PerSourceMode::positive_f1, bool strict_auc = false) {
  MetricsReport r;
  r.confusion = confusion(labels, preds);
  r.acc = accuracy(r.confusion);
  r.macro_f1 = macro_f1(r.confusion, &r.warnings);
  try {
    r.auc = auc(labels, scores);
  } catch (const Error& e) {
    if (strict_auc) throw;
    r.warnings.emplace_back(e.what());
  }
  if (!sources.empty()) r.per_source_f1 = per_source_f1(labels, preds, sources, mode, &r.warnings);
  return r;
}

}  // namespace srcaware
