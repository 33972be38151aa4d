#pragma once

// Stage 1 volumetric expert: a fixed average-pooling stem, a four-stage
// residual 3D convolutional backbone, global average+max pooling and a linear head.

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/nn/layers.hpp"
#include "srcaware/nn/loss.hpp"
#include "srcaware/nn/params.hpp"
#include "srcaware/predictions.hpp"
#include "srcaware/rng.hpp"
#include "srcaware/training.hpp"
#include "srcaware/volume.hpp"

namespace srcaware {

// Stage 1 input settings: which canonical views the expert trains on and
// whether random rotation is enabled.
enum class InputKind { lung, lung_rot, orig_lung, orig };

inline std::string to_string(InputKind k) {
  switch (k) {
    case InputKind::lung: return "lung";
    case InputKind::lung_rot: return "lung_rot";
    case InputKind::orig_lung: return "orig_lung";
    case InputKind::orig: return "orig";
  }
  return "?";
}

inline InputKind parse_input_kind(const std::string& s) {
  for (InputKind k : {InputKind::lung, InputKind::lung_rot, InputKind::orig_lung, InputKind::orig})
    if (to_string(k) == s) return k;
  throw Error("unknown input kind '" + s + "' (expected lung, lung_rot, orig_lung or orig)");
}

enum class View { orig, lung };

inline std::string to_string(View v) { return v == View::orig ? "orig" : "lung"; }

inline std::vector<View> views_of(InputKind k) {
  switch (k) {
    case InputKind::lung:
    case InputKind::lung_rot: return {View::lung};
    case InputKind::orig_lung: return {View::orig, View::lung};
    case InputKind::orig: return {View::orig};
  }
  return {};
}

inline bool rotation_enabled(InputKind k) { return k == InputKind::lung_rot; }

struct Volume3DConfig {
  std::array<int, 3> stem{16, 32, 32};  // pooled input grid
  std::array<int, 4> widths{8, 16, 24, 32};
  int num_classes = 2;
  bool zero_head = true;
};

// Fixed, parameter-free input stem: adaptive average pooling of the canonical
// volume to `cfg.stem`.
template <class T>
nn::Tensor<T> stem_3d(const VolumeF& v, const std::array<int, 3>& grid) {
  return nn::adaptive_avg_pool<T, float>(v.data(), {v.slices(), v.rows(), v.cols()}, grid);
}

template <class T>
class Volume3DModel {
 public:
  struct Block {
    nn::Conv3dSpec conv1, conv2, shortcut;
    std::size_t w1, b1, w2, b2, ws, bs;
  };
  struct BlockCache {
    nn::Tensor<T> x, a0, pre1, a1;
  };
  struct Cache {
    std::vector<BlockCache> blocks;
    nn::Tensor<T> last;  // output of the final block
    std::vector<std::size_t> argmax;
    nn::Tensor<T> features;
  };

  Volume3DModel() = default;
  Volume3DModel(const Volume3DConfig& cfg, Rng& rng) : cfg_(cfg) {
    require(cfg.num_classes >= 2, "num_classes must be >= 2");
    int in = 1;
    for (int i = 0; i < 4; ++i) {
      const int w = cfg.widths[static_cast<std::size_t>(i)];
      const std::string pre = "backbone.stage" + std::to_string(i);
      Block b;
      b.conv1 = nn::Conv3dSpec{in, w, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}};
      b.conv2 = nn::Conv3dSpec{w, w, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}};
      b.shortcut = nn::Conv3dSpec{in, w, {1, 1, 1}, {2, 2, 2}, {0, 0, 0}};
      b.w1 = params.add(pre + ".conv1.weight", "backbone", b.conv1.weight_shape());
      b.b1 = params.add(pre + ".conv1.bias", "backbone", {w});
      b.w2 = params.add(pre + ".conv2.weight", "backbone", b.conv2.weight_shape());
      b.b2 = params.add(pre + ".conv2.bias", "backbone", {w});
      b.ws = params.add(pre + ".shortcut.weight", "backbone", b.shortcut.weight_shape());
      b.bs = params.add(pre + ".shortcut.bias", "backbone", {w});
      nn::init_he(params[b.w1], rng, b.conv1.fan_in());
      // Residual branch starts small so each block begins near its shortcut.
      nn::init_normal(params[b.w2], rng, 0.5 * std::sqrt(2.0 / b.conv2.fan_in()));
      nn::init_he(params[b.ws], rng, b.shortcut.fan_in());
      blocks_.push_back(b);
      in = w;
    }
    add_head(cfg.num_classes, cfg.zero_head, rng);
  }

  const Volume3DConfig& config() const { return cfg_; }
  // Global average and global max of every final channel.
  int feature_dim() const { return 2 * cfg_.widths[3]; }
  int num_classes() const { return cfg_.num_classes; }

  // Replaces the classification head with a fresh one of `num_classes` outputs.
  void replace_head(int num_classes, bool zero, Rng& rng) {
    nn::ParamStore<T> kept;
    for (const auto& p : params)
      if (p.group != "head") {
        const std::size_t i = kept.add(p.name, p.group, p.shape);
        kept[i].value = p.value;
        kept[i].trainable = p.trainable;
      }
    params = std::move(kept);
    cfg_.num_classes = num_classes;
    add_head(num_classes, zero, rng);
  }

  nn::Tensor<T> features(const nn::Tensor<T>& stem, Cache* cache = nullptr) const {
    require(stem.shape == std::vector<int>({1, cfg_.stem[0], cfg_.stem[1], cfg_.stem[2]}),
            "3D model input shape mismatch");
    nn::Tensor<T> x = stem;
    if (cache) cache->blocks.assign(blocks_.size(), {});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const Block& b = blocks_[i];
      // Pre-activation block: out = conv2(relu(conv1(relu(x)))) + shortcut(relu(x)).
      nn::Tensor<T> a0 = nn::relu_forward(x);
      nn::Tensor<T> pre1 = nn::conv3d_forward(b.conv1, params[b.w1], params[b.b1], a0);
      nn::Tensor<T> a1 = nn::relu_forward(pre1);
      nn::Tensor<T> out = nn::conv3d_forward(b.conv2, params[b.w2], params[b.b2], a1);
      nn::add_inplace(out, nn::conv3d_forward(b.shortcut, params[b.ws], params[b.bs], a0));
      if (cache) cache->blocks[i] = BlockCache{std::move(x), std::move(a0), std::move(pre1), std::move(a1)};
      x = std::move(out);
    }
    const nn::Tensor<T> avg = nn::global_avg_pool_forward(x);
    const nn::Tensor<T> mx = nn::global_max_pool_forward(x, cache ? &cache->argmax : nullptr);
    nn::Tensor<T> f({feature_dim()});
    std::copy(avg.data.begin(), avg.data.end(), f.data.begin());
    std::copy(mx.data.begin(), mx.data.end(), f.data.begin() + static_cast<std::ptrdiff_t>(avg.size()));
    if (cache) {
      cache->last = std::move(x);
      cache->features = f;
    }
    return f;
  }

  std::vector<T> head_logits(const nn::Tensor<T>& feats) const {
    return nn::linear_forward(head_spec(), params[hw_], params[hb_], feats).data;
  }

  std::vector<T> logits(const nn::Tensor<T>& stem, Cache* cache = nullptr) const {
    return head_logits(features(stem, cache));
  }

  // Head-only backward from cached features.
  nn::Tensor<T> head_backward(const nn::Tensor<T>& feats, std::span<const T> dlogits) {
    nn::Tensor<T> dy({cfg_.num_classes}, std::vector<T>(dlogits.begin(), dlogits.end()));
    return nn::linear_backward(head_spec(), params[hw_], params[hb_], feats, dy, true);
  }

  void backward(const Cache& cache, std::span<const T> dlogits) {
    nn::Tensor<T> g = head_backward(cache.features, dlogits);
    if (!backbone_trainable()) return;
    const int C = cfg_.widths[3];
    nn::Tensor<T> g_avg({C}, std::vector<T>(g.data.begin(), g.data.begin() + C));
    nn::Tensor<T> gx = nn::global_avg_pool_backward(cache.last.shape, g_avg);
    nn::global_max_pool_backward_add(gx, cache.argmax, g.ptr() + C);
    g = std::move(gx);
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      const Block& b = blocks_[i];
      const BlockCache& c = cache.blocks[i];
      const bool want_dx = i > 0;
      nn::Tensor<T> da0 = nn::conv3d_backward(b.shortcut, params[b.ws], params[b.bs], c.a0, g, want_dx);
      nn::Tensor<T> da1 = nn::conv3d_backward(b.conv2, params[b.w2], params[b.b2], c.a1, g, true);
      da1 = nn::relu_backward(c.pre1, da1);
      nn::Tensor<T> da0_main = nn::conv3d_backward(b.conv1, params[b.w1], params[b.b1], c.a0, da1, want_dx);
      if (want_dx) {
        nn::add_inplace(da0, da0_main);
        g = nn::relu_backward(c.x, da0);
      }
    }
  }

  bool backbone_trainable() const {
    for (const auto& p : params)
      if (p.group == "backbone" && p.trainable) return true;
    return false;
  }

  nn::ParamStore<T> params;

 private:
  nn::LinearSpec head_spec() const { return {feature_dim(), cfg_.num_classes}; }

  void add_head(int num_classes, bool zero, Rng& rng) {
    hw_ = params.add("head.weight", "head", {num_classes, feature_dim()});
    hb_ = params.add("head.bias", "head", {num_classes});
    if (!zero) nn::init_normal(params[hw_], rng, std::sqrt(1.0 / feature_dim()));
  }

  Volume3DConfig cfg_;
  std::vector<Block> blocks_;
  std::size_t hw_ = 0, hb_ = 0;
};

// Cross-entropy step for one stem; returns the loss.
template <class T>
T stage1_step(Volume3DModel<T>& model, const nn::Tensor<T>& stem, int label) {
  typename Volume3DModel<T>::Cache cache;
  const std::vector<T> z = model.logits(stem, &cache);
  std::vector<T> dz;
  const T loss = nn::cross_entropy(std::span<const T>(z), label, &dz);
  model.backward(cache, dz);
  return loss;
}

template <class T>
std::array<double, 2> predict_probs_3d(const Volume3DModel<T>& model, const nn::Tensor<T>& stem) {
  require(model.num_classes() == 2, "binary prediction needs a 2-class head");
  const std::vector<T> z = model.logits(stem);
  const std::vector<T> p = nn::softmax(std::span<const T>(z));
  return {static_cast<double>(p[0]), static_cast<double>(p[1])};
}

// Softmax of the logits for a canonical volume (deterministic, no augmentation).
template <class T>
ExpertPrediction predict_3d(const Volume3DModel<T>& model, const CanonicalVolume3D& volume, std::string scan_id,
                            std::string variant_id = "orig_lung") {
  const auto p = predict_probs_3d(model, stem_3d<T>(volume.volume(), model.config().stem));
  return ExpertPrediction{std::move(scan_id), {p[0], p[1]}, "stage1", std::move(variant_id)};
}

// A training/validation sample for Stage 1: produces the model input for a
// given draw of the random stream (augmented or not).
struct Stage1Sample {
  int label = 0;
  std::function<nn::Tensor<float>(Rng&)> input;
};

struct Stage1Data {
  std::vector<Stage1Sample> train;
  // Per validation scan: label and the deterministic stems of every view.
  std::vector<int> val_labels;
  std::vector<std::vector<nn::Tensor<float>>> val_views;
};

// Trains the 3D expert; validation probability of a scan is the mean over its views.
inline TrainLog train_stage1(Volume3DModel<float>& model, const Stage1Data& data, const TrainConfig& cfg, Rng& rng) {
  require(!data.train.empty(), "stage 1 training set is empty");
  auto step = [&](std::size_t i, Rng& r) {
    const auto& s = data.train[i];
    return stage1_step(model, s.input(r), s.label);
  };
  auto eval = [&]() -> std::optional<ValMetrics> {
    if (data.val_labels.empty()) return std::nullopt;
    std::vector<double> p(data.val_labels.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      double acc = 0;
      for (const auto& v : data.val_views[i]) acc += predict_probs_3d(model, v)[1];
      p[i] = acc / static_cast<double>(data.val_views[i].size());
    }
    return binary_val_metrics(data.val_labels, p);
  };
  return run_training(model.params, data.train.size(), cfg, rng, step, eval);
}

}  // namespace srcaware
