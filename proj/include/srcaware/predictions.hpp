#pragma once

// Per-scan prediction records and their file formats.
//
// Expert prediction file:  scan_id,expert_id,variant_id,p_non_covid,p_covid,label
// Source prediction file:  scan_id,p_source0,p_source1,p_source2,p_source3,predicted_source

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "srcaware/csv.hpp"
#include "srcaware/error.hpp"

namespace srcaware {

struct ExpertPrediction {
  std::string scan_id;
  std::array<double, 2> probs{0.5, 0.5};  // (p_non_covid, p_covid)
  std::string expert_id;                  // "stage1", "stage2a" or "stage2b"
  std::string variant_id;

  // p_covid == 0.5 resolves to COVID.
  int label() const { return probs[1] >= 0.5 ? 1 : 0; }
};

struct SourcePrediction {
  std::string scan_id;
  std::array<double, 4> source_probs{0.25, 0.25, 0.25, 0.25};
  int predicted_source = 0;
};

// Argmax with ties broken toward the lowest index.
template <class Container>
int argmax_lowest(const Container& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(std::size(v)); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

inline void check_probabilities(const ExpertPrediction& p) {
  require(std::isfinite(p.probs[0]) && std::isfinite(p.probs[1]) && p.probs[0] >= 0 && p.probs[1] >= 0 &&
              std::abs(p.probs[0] + p.probs[1] - 1.0) <= 1e-6,
          "prediction for " + p.scan_id + " is not a probability pair");
}

inline void write_expert_predictions(const std::filesystem::path& path, const std::vector<ExpertPrediction>& preds) {
  csv::Table t;
  t.header = {"scan_id", "expert_id", "variant_id", "p_non_covid", "p_covid", "label"};
  for (const auto& p : preds)
    t.rows.push_back({p.scan_id, p.expert_id, p.variant_id, csv::fmt(p.probs[0]), csv::fmt(p.probs[1]),
                      std::to_string(p.label())});
  csv::write(path, t);
}

inline std::vector<ExpertPrediction> read_expert_predictions(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto c_id = t.column("scan_id"), c_e = t.column("expert_id"), c_v = t.column("variant_id"),
             c_p0 = t.column("p_non_covid"), c_p1 = t.column("p_covid");
  std::vector<ExpertPrediction> out;
  for (const auto& r : t.rows) {
    ExpertPrediction p{r[c_id], {std::stod(r[c_p0]), std::stod(r[c_p1])}, r[c_e], r[c_v]};
    out.push_back(std::move(p));
  }
  return out;
}

inline void write_source_predictions(const std::filesystem::path& path, const std::vector<SourcePrediction>& preds) {
  csv::Table t;
  t.header = {"scan_id", "p_source0", "p_source1", "p_source2", "p_source3", "predicted_source"};
  for (const auto& p : preds) {
    csv::Row r{p.scan_id};
    for (double q : p.source_probs) r.push_back(csv::fmt(q));
    r.push_back(std::to_string(p.predicted_source));
    t.rows.push_back(std::move(r));
  }
  csv::write(path, t);
}

inline std::vector<SourcePrediction> read_source_predictions(const std::filesystem::path& path) {
  const auto t = csv::read(path);
  const auto c_id = t.column("scan_id"), c_ps = t.column("predicted_source");
  std::vector<SourcePrediction> out;
  for (const auto& r : t.rows) {
    SourcePrediction p;
    p.scan_id = r[c_id];
    for (int k = 0; k < 4; ++k) p.source_probs[static_cast<std::size_t>(k)] = std::stod(r[t.column("p_source" + std::to_string(k))]);
    p.predicted_source = std::stoi(r[c_ps]);
    require(p.predicted_source >= 0 && p.predicted_source <= 3, "predicted_source out of range");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace srcaware
