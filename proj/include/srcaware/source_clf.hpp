#pragma once

// Stage 3 source classifier: the Stage 1 backbone, frozen, with a fresh
// four-class head.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/expert3d.hpp"
#include "srcaware/metrics.hpp"
#include "srcaware/nn/loss.hpp"
#include "srcaware/predictions.hpp"
#include "srcaware/training.hpp"

namespace srcaware {

inline constexpr int kNumSources = 4;

// Copies the Stage 1 model, swaps in a zero-initialized 4-class head and
// freezes every backbone parameter.
template <class T>
Volume3DModel<T> build_source_clf(const Volume3DModel<T>& stage1, Rng& rng) {
  Volume3DModel<T> m = stage1;
  m.replace_head(kNumSources, true, rng);
  m.params.set_trainable("backbone", false);
  m.params.set_trainable("head", true);
  return m;
}

template <class T>
SourcePrediction source_from_logits(std::string scan_id, const std::vector<T>& z) {
  require(z.size() == kNumSources, "source head must have 4 logits");
  const std::vector<T> p = nn::softmax(std::span<const T>(z));
  SourcePrediction s;
  s.scan_id = std::move(scan_id);
  for (int k = 0; k < kNumSources; ++k) s.source_probs[static_cast<std::size_t>(k)] = static_cast<double>(p[static_cast<std::size_t>(k)]);
  s.predicted_source = argmax_lowest(s.source_probs);
  return s;
}

template <class T>
SourcePrediction predict_source(const Volume3DModel<T>& model, const nn::Tensor<T>& stem, std::string scan_id) {
  return source_from_logits(std::move(scan_id), model.logits(stem));
}

template <class T>
SourcePrediction predict_source(const Volume3DModel<T>& model, const CanonicalVolume3D& volume, std::string scan_id) {
  return predict_source(model, stem_3d<T>(volume.volume(), model.config().stem), std::move(scan_id));
}

struct SourceData {
  std::vector<nn::Tensor<float>> train_stems;
  std::vector<int> train_sources;
  std::vector<nn::Tensor<float>> val_stems;
  std::vector<int> val_sources;
};

struct SourceTrainResult {
  TrainLog log;
  double val_acc = 0.0;
  double val_macro_f1 = 0.0;
};

// Four-class cross-entropy on the head only. Backbone features are computed
// once, since the backbone is frozen.
inline SourceTrainResult train_source_clf(Volume3DModel<float>& model, const SourceData& data, const TrainConfig& cfg,
                                          Rng& rng) {
  require(!model.backbone_trainable(), "source classifier backbone must be frozen");
  require(data.train_stems.size() == data.train_sources.size(), "source training data size mismatch");
  std::array<int, kNumSources> seen{};
  for (int s : data.train_sources) {
    require(s >= 0 && s < kNumSources, "source label out of range");
    seen[static_cast<std::size_t>(s)]++;
  }
  for (int s = 0; s < kNumSources; ++s)
    require(seen[static_cast<std::size_t>(s)] > 0,
            "source " + std::to_string(s) + " is absent from the source-classifier training set");

  std::vector<nn::Tensor<float>> train_f, val_f;
  for (const auto& s : data.train_stems) train_f.push_back(model.features(s));
  for (const auto& s : data.val_stems) val_f.push_back(model.features(s));

  auto step = [&](std::size_t i, Rng&) {
    const auto z = model.head_logits(train_f[i]);
    std::vector<float> dz;
    const float loss = nn::cross_entropy(std::span<const float>(z), data.train_sources[i], &dz);
    model.head_backward(train_f[i], dz);
    return loss;
  };
  auto eval = [&]() -> std::optional<ValMetrics> {
    if (val_f.empty()) return std::nullopt;
    std::vector<int> pred;
    for (const auto& f : val_f) pred.push_back(source_from_logits("", model.head_logits(f)).predicted_source);
    const auto [acc, f1] = multiclass_acc_macro_f1(data.val_sources, pred, kNumSources);
    return ValMetrics{f1, acc, std::nullopt};
  };
  SourceTrainResult r;
  r.log = run_training(model.params, train_f.size(), cfg, rng, step, eval);
  if (r.log.best().val) {
    r.val_acc = r.log.best().val->acc;
    r.val_macro_f1 = r.log.best().val->macro_f1;
  }
  return r;
}

}  // namespace srcaware
