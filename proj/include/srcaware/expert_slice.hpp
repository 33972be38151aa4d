#pragma once

// Stage 2a slice-wise expert: a small 2D slice encoder (applied to every slice
// independently) with a per-slice binary head. Training samples K slices of a
// stack and applies the loss to the mean of the per-slice probabilities.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
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

struct SliceEncoderConfig {
  int grid = 28;                          // pooled in-plane size of each slice
  std::array<int, 3> channels{8, 16, 16};  // conv layers encoder.0..2
  int embed = 32;                         // E, output of encoder.3
};

inline constexpr int kEncoderLayers = 4;

// Layer i of the encoder lives in parameter group "encoder.<i>". Layers 0-2 are
// 3x3 convolutions (stride 2, 2, 1) with ReLU; layer 3 pools each slice
// (average and max per channel) and projects to E with GELU.
struct SliceEncoderLayout {
  SliceEncoderConfig cfg;
  std::array<nn::Conv3dSpec, 3> conv;
  std::array<std::size_t, 3> w{}, b{};
  nn::LinearSpec proj;
  std::size_t pw = 0, pb = 0;
};

template <class T>
SliceEncoderLayout add_slice_encoder(nn::ParamStore<T>& ps, const SliceEncoderConfig& cfg, Rng& rng) {
  SliceEncoderLayout L;
  L.cfg = cfg;
  int in = 1;
  for (int i = 0; i < 3; ++i) {
    const int out = cfg.channels[static_cast<std::size_t>(i)];
    const int s = i < 2 ? 2 : 1;
    L.conv[static_cast<std::size_t>(i)] = nn::Conv3dSpec{in, out, {1, 3, 3}, {1, s, s}, {0, 1, 1}};
    const std::string g = "encoder." + std::to_string(i);
    L.w[static_cast<std::size_t>(i)] = ps.add(g + ".conv.weight", g, L.conv[static_cast<std::size_t>(i)].weight_shape());
    L.b[static_cast<std::size_t>(i)] = ps.add(g + ".conv.bias", g, {out});
    nn::init_he(ps[L.w[static_cast<std::size_t>(i)]], rng, L.conv[static_cast<std::size_t>(i)].fan_in());
    in = out;
  }
  L.proj = nn::LinearSpec{2 * in, cfg.embed};
  L.pw = ps.add("encoder.3.proj.weight", "encoder.3", {cfg.embed, 2 * in});
  L.pb = ps.add("encoder.3.proj.bias", "encoder.3", {cfg.embed});
  nn::init_normal(ps[L.pw], rng, std::sqrt(1.0 / (2 * in)));
  return L;
}

// Per-slice average and max over the plane: [C, K, H, W] -> [K, 2C].
template <class T>
nn::Tensor<T> slice_pool_forward(const nn::Tensor<T>& x, std::vector<std::size_t>& argmax) {
  const int C = x.shape[0], K = x.shape[1];
  const std::size_t hw = static_cast<std::size_t>(x.shape[2]) * x.shape[3];
  nn::Tensor<T> y({K, 2 * C});
  argmax.assign(static_cast<std::size_t>(K) * C, 0);
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < K; ++k) {
      const std::size_t base = (static_cast<std::size_t>(c) * K + k) * hw;
      const T* p = x.ptr() + base;
      T acc{0};
      std::size_t best = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        acc += p[i];
        if (p[i] > p[best]) best = i;
      }
      y.data[static_cast<std::size_t>(k) * 2 * C + c] = acc / static_cast<T>(hw);
      y.data[static_cast<std::size_t>(k) * 2 * C + C + c] = p[best];
      argmax[static_cast<std::size_t>(k) * C + c] = base + best;
    }
  return y;
}

template <class T>
nn::Tensor<T> slice_pool_backward(const std::vector<int>& in_shape, const std::vector<std::size_t>& argmax,
                                  const nn::Tensor<T>& dy) {
  const int C = in_shape[0], K = in_shape[1];
  const std::size_t hw = static_cast<std::size_t>(in_shape[2]) * in_shape[3];
  nn::Tensor<T> dx(in_shape);
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < K; ++k) {
      const T g = dy.data[static_cast<std::size_t>(k) * 2 * C + c] / static_cast<T>(hw);
      T* p = dx.ptr() + (static_cast<std::size_t>(c) * K + k) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += g;
      dx.data[argmax[static_cast<std::size_t>(k) * C + c]] += dy.data[static_cast<std::size_t>(k) * 2 * C + C + c];
    }
  return dx;
}

// Activations of one encoder pass over K slices. acts[i] is the input of layer
// i (acts[0] is the stem [1, K, G, G]); pre[i] the conv output before ReLU.
template <class T>
struct EncoderCache {
  std::array<nn::Tensor<T>, 4> acts;
  std::array<nn::Tensor<T>, 3> pre;
  std::vector<std::size_t> argmax;
  nn::Tensor<T> pooled, proj_pre;
};

// Runs layers `from`..3 on `input` (the input of layer `from`) and returns the
// slice embeddings [K, E].
template <class T>
nn::Tensor<T> encode_from(const nn::ParamStore<T>& ps, const SliceEncoderLayout& L, int from, const nn::Tensor<T>& input,
                          EncoderCache<T>* cache = nullptr) {
  require(from >= 0 && from < kEncoderLayers, "encoder layer index out of range");
  EncoderCache<T> local;
  EncoderCache<T>& c = cache ? *cache : local;
  nn::Tensor<T> x = input;
  for (int i = from; i < 3; ++i) {
    c.acts[static_cast<std::size_t>(i)] = x;
    c.pre[static_cast<std::size_t>(i)] = nn::conv3d_forward(L.conv[static_cast<std::size_t>(i)], ps[L.w[static_cast<std::size_t>(i)]],
                                                            ps[L.b[static_cast<std::size_t>(i)]], x);
    x = nn::relu_forward(c.pre[static_cast<std::size_t>(i)]);
  }
  c.acts[3] = x;
  c.pooled = slice_pool_forward(x, c.argmax);
  c.proj_pre = nn::linear_forward(L.proj, ps[L.pw], ps[L.pb], c.pooled);
  return nn::gelu_forward(c.proj_pre);
}

template <class T>
nn::Tensor<T> encode(const nn::ParamStore<T>& ps, const SliceEncoderLayout& L, const nn::Tensor<T>& stem,
                     EncoderCache<T>* cache = nullptr) {
  require(stem.shape.size() == 4 && stem.shape[0] == 1 && stem.shape[2] == L.cfg.grid && stem.shape[3] == L.cfg.grid,
          "slice encoder input must be [1, K, grid, grid]");
  return encode_from(ps, L, 0, stem, cache);
}

// Input of layer `layer` (0..3) for a stem; used to cache the frozen prefix.
template <class T>
nn::Tensor<T> encoder_prefix(const nn::ParamStore<T>& ps, const SliceEncoderLayout& L, int layer, const nn::Tensor<T>& stem) {
  nn::Tensor<T> x = stem;
  for (int i = 0; i < layer; ++i)
    x = nn::relu_forward(nn::conv3d_forward(L.conv[static_cast<std::size_t>(i)], ps[L.w[static_cast<std::size_t>(i)]],
                                            ps[L.b[static_cast<std::size_t>(i)]], x));
  return x;
}

// First encoder layer with a trainable parameter, or 4 when fully frozen.
template <class T>
int first_trainable_layer(const nn::ParamStore<T>& ps) {
  int first = kEncoderLayers;
  for (const auto& p : ps)
    if (p.trainable && p.group.rfind("encoder.", 0) == 0) first = std::min(first, std::stoi(p.group.substr(8)));
  return first;
}

// Backward from dL/d(embeddings) through layers `from`..3.
template <class T>
void encode_backward(nn::ParamStore<T>& ps, const SliceEncoderLayout& L, int from, const EncoderCache<T>& c,
                     const nn::Tensor<T>& d_embed) {
  nn::Tensor<T> g = nn::gelu_backward(c.proj_pre, d_embed);
  g = nn::linear_backward(L.proj, ps[L.pw], ps[L.pb], c.pooled, g, from < 3);
  if (from >= 3) return;
  g = slice_pool_backward(c.acts[3].shape, c.argmax, g);
  for (int i = 2; i >= from; --i) {
    g = nn::relu_backward(c.pre[static_cast<std::size_t>(i)], g);
    g = nn::conv3d_backward(L.conv[static_cast<std::size_t>(i)], ps[L.w[static_cast<std::size_t>(i)]],
                            ps[L.b[static_cast<std::size_t>(i)]], c.acts[static_cast<std::size_t>(i)], g, i > from);
  }
}

// Pools a slice stack to the encoder grid: [D, R, C] -> [1, D, G, G].
template <class T>
nn::Tensor<T> slice_stem(const VolumeF& stack, int grid) {
  return nn::adaptive_avg_pool<T, float>(stack.data(), {stack.slices(), stack.rows(), stack.cols()},
                                         {stack.slices(), grid, grid});
}

// Selects slices `idx` of a [1, D, G, G] stem.
template <class T>
nn::Tensor<T> gather_slices(const nn::Tensor<T>& stem, const std::vector<int>& idx) {
  const int D = stem.shape[1];
  const std::size_t plane = static_cast<std::size_t>(stem.shape[2]) * stem.shape[3];
  nn::Tensor<T> out({1, static_cast<int>(idx.size()), stem.shape[2], stem.shape[3]});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    require(idx[k] >= 0 && idx[k] < D, "slice index out of range");
    std::copy_n(stem.ptr() + static_cast<std::size_t>(idx[k]) * plane, plane, out.ptr() + k * plane);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slice sampling

struct SliceSubsequence {
  std::vector<int> indices;
  int start_offset = 0;  // tau for contiguous samples; -1 for depth-random samples
};

enum class SliceSampling { contiguous, depth_random };

inline std::string to_string(SliceSampling s) { return s == SliceSampling::contiguous ? "crs" : "drs"; }

// tau uniform in {0, ..., depth - k}; slices tau..tau+k-1.
inline SliceSubsequence sample_contiguous(int depth, int k, Rng& rng) {
  require(k >= 1 && k <= depth, "contiguous sample size must be in [1, depth]");
  SliceSubsequence s;
  s.start_offset = rng.uniform_int(0, depth - k);
  for (int i = 0; i < k; ++i) s.indices.push_back(s.start_offset + i);
  return s;
}

// k distinct depths uniformly without replacement, sorted ascending.
inline SliceSubsequence sample_depth_random(int depth, int k, Rng& rng) {
  require(k >= 1 && k <= depth, "depth-random sample size must be in [1, depth]");
  std::vector<int> all(static_cast<std::size_t>(depth));
  for (int i = 0; i < depth; ++i) all[static_cast<std::size_t>(i)] = i;
  // Partial Fisher-Yates.
  for (int i = 0; i < k; ++i) std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(rng.uniform_int(i, depth - 1))]);
  SliceSubsequence s;
  s.start_offset = -1;
  s.indices.assign(all.begin(), all.begin() + k);
  std::sort(s.indices.begin(), s.indices.end());
  return s;
}

inline SliceSubsequence sample_slices(SliceSampling mode, int depth, int k, Rng& rng) {
  return mode == SliceSampling::contiguous ? sample_contiguous(depth, k, rng) : sample_depth_random(depth, k, rng);
}

// ---------------------------------------------------------------------------
// Slice model: encoder + per-slice head

template <class T>
struct SliceModel {
  nn::ParamStore<T> params;
  SliceEncoderLayout enc;
  std::size_t hw = 0, hb = 0;

  SliceModel() = default;
  SliceModel(const SliceEncoderConfig& cfg, Rng& rng, bool zero_head = true) {
    enc = add_slice_encoder(params, cfg, rng);
    hw = params.add("head.weight", "head", {2, cfg.embed});
    hb = params.add("head.bias", "head", {2});
    if (!zero_head) nn::init_normal(params[hw], rng, std::sqrt(1.0 / cfg.embed));
  }

  nn::LinearSpec head_spec() const { return {enc.cfg.embed, 2}; }

  // Per-slice logits [K][2] for a [1, K, G, G] input.
  std::vector<std::array<T, 2>> slice_logits(const nn::Tensor<T>& x, EncoderCache<T>* cache = nullptr,
                                             nn::Tensor<T>* embed = nullptr) const {
    nn::Tensor<T> e = encode(params, enc, x, cache);
    const nn::Tensor<T> z = nn::linear_forward(head_spec(), params[hw], params[hb], e);
    if (embed) *embed = std::move(e);
    std::vector<std::array<T, 2>> out(static_cast<std::size_t>(x.shape[1]));
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = {z.data[2 * k], z.data[2 * k + 1]};
    return out;
  }
};

// Mean of per-slice softmax probabilities over the slices of `x`.
template <class T>
std::array<double, 2> scan_probability(const SliceModel<T>& m, const nn::Tensor<T>& x) {
  const auto z = m.slice_logits(x);
  std::array<double, 2> p{0.0, 0.0};
  for (const auto& zk : z) {
    const auto s = nn::softmax(std::span<const T>(zk));
    require(std::isfinite(static_cast<double>(s[0])) && std::isfinite(static_cast<double>(s[1])),
            "non-finite slice probability");
    p[0] += static_cast<double>(s[0]);
    p[1] += static_cast<double>(s[1]);
  }
  p[0] /= static_cast<double>(z.size());
  p[1] /= static_cast<double>(z.size());
  return p;
}

// Per-slice COVID probabilities, computed `batch` slices at a time.
template <class T>
std::vector<double> slice_probabilities(const SliceModel<T>& m, const nn::Tensor<T>& stem, int batch) {
  const int D = stem.shape[1];
  require(batch >= 1, "batch must be >= 1");
  std::vector<double> out;
  for (int s0 = 0; s0 < D; s0 += batch) {
    std::vector<int> idx;
    for (int s = s0; s < std::min(D, s0 + batch); ++s) idx.push_back(s);
    for (const auto& zk : m.slice_logits(gather_slices(stem, idx)))
      out.push_back(static_cast<double>(nn::softmax(std::span<const T>(zk))[1]));
  }
  return out;
}

// Slice-level MIL step on the slices of `x`; returns the loss.
template <class T>
T stage2a_step(SliceModel<T>& m, const nn::Tensor<T>& x, int label) {
  EncoderCache<T> cache;
  nn::Tensor<T> e;
  const auto z = m.slice_logits(x, &cache, &e);
  const auto sl = nn::slice_loss_from_logits(std::span<const std::array<T, 2>>(z), label);
  nn::Tensor<T> dz({static_cast<int>(z.size()), 2});
  for (std::size_t k = 0; k < z.size(); ++k) dz.data[2 * k] = sl.dlogits[k][0], dz.data[2 * k + 1] = sl.dlogits[k][1];
  const nn::Tensor<T> de = nn::linear_backward(m.head_spec(), m.params[m.hw], m.params[m.hb], e, dz, true);
  const int from = first_trainable_layer(m.params);
  if (from < kEncoderLayers) encode_backward(m.params, m.enc, from, cache, de);
  return sl.loss;
}

// Inference over every slice of the stack.
template <class T>
ExpertPrediction predict_stage2a(const SliceModel<T>& m, const nn::Tensor<T>& stem, std::string scan_id,
                                 std::string variant_id) {
  const auto p = scan_probability(m, stem);
  return ExpertPrediction{std::move(scan_id), {p[0], p[1]}, "stage2a", std::move(variant_id)};
}

// ---------------------------------------------------------------------------
// Pretraining stand-in: a brief supervised warm-up of the encoder on generated
// single slices (lesion present or not), through a temporary head that is
// discarded afterwards.

struct PretrainConfig {
  int slices = 512;
  int epochs = 8;
  int batch_size = 8;
  double lr = 3e-3;
};

// A grid x grid slice: body background, two lung ellipses, optional lesions,
// noise, min-max normalized.
inline std::vector<float> pretrain_slice(int grid, int label, Rng& rng) {
  std::vector<float> img(static_cast<std::size_t>(grid) * grid);
  const double mid = (grid - 1) / 2.0, bg = rng.uniform(0.0, 0.3);
  const double lr_ = rng.uniform(0.2, 0.3) * grid, lc = rng.uniform(0.12, 0.18) * grid;
  struct Spot { double r, c, rad; };
  std::vector<Spot> spots;
  if (label == 1) {
    const int n = rng.uniform_int(1, 2);
    for (int i = 0; i < n; ++i) {
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      spots.push_back({mid + rng.uniform(-0.5, 0.5) * lr_, mid + side * 0.2 * grid + rng.uniform(-0.5, 0.5) * lc,
                       rng.uniform(0.05, 0.09) * grid});
    }
  }
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      double v = bg;
      for (double side : {-1.0, 1.0}) {
        const double dr = (r - mid) / lr_, dc = (c - mid - side * 0.2 * grid) / lc;
        if (dr * dr + dc * dc <= 1.0) v = 0.65;
      }
      for (const auto& s : spots) {
        const double d = std::hypot(r - s.r, c - s.c);
        if (d < s.rad) v += 0.3;
      }
      img[static_cast<std::size_t>(r) * grid + c] = static_cast<float>(v + rng.normal(0.0, 0.03));
    }
  const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
  const float a = *lo, span = *hi - *lo;
  for (float& v : img) v = span > 0 ? (v - a) / span : 0.0f;
  return img;
}

template <class T>
TrainLog pretrain_slice_encoder(nn::ParamStore<T>& ps, const SliceEncoderLayout& L, const PretrainConfig& cfg, Rng& rng) {
  // Temporary model sharing the encoder layout; its parameters are copied back.
  SliceModel<T> tmp;
  tmp.params = ps;
  tmp.enc = L;
  tmp.hw = tmp.params.add("pretrain_head.weight", "pretrain_head", {2, L.cfg.embed});
  tmp.hb = tmp.params.add("pretrain_head.bias", "pretrain_head", {2});
  nn::init_normal(tmp.params[tmp.hw], rng, std::sqrt(1.0 / L.cfg.embed));
  std::vector<nn::Tensor<T>> xs;
  std::vector<int> ys;
  for (int i = 0; i < cfg.slices; ++i) {
    const int y = i % 2;
    const auto img = pretrain_slice(L.cfg.grid, y, rng);
    xs.emplace_back(std::vector<int>{1, 1, L.cfg.grid, L.cfg.grid}, std::vector<T>(img.begin(), img.end()));
    ys.push_back(y);
  }
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.opt.lr = cfg.lr;
  auto step = [&](std::size_t i, Rng&) { return stage2a_step(tmp, xs[i], ys[i]); };
  auto eval = [] { return std::optional<ValMetrics>{}; };
  TrainLog log = run_training(tmp.params, xs.size(), tc, rng, step, eval);
  for (std::size_t k = 0; k < ps.size(); ++k) ps[k].value = tmp.params[k].value;
  return log;
}

// ---------------------------------------------------------------------------
// Stage 2a training

struct Stage2aSample {
  int label = 0;
  nn::Tensor<float> stem;  // [1, D, G, G]
};

struct Stage2aData {
  std::vector<Stage2aSample> train;
  std::vector<int> val_labels;
  std::vector<std::vector<nn::Tensor<float>>> val_views;  // full stems per view
};

struct Stage2aConfig {
  SliceSampling sampling = SliceSampling::contiguous;
  int k = 12;
};

// Every epoch draws a fresh subsequence per scan. Validation uses all slices
// and averages over views.
inline TrainLog train_stage2a(SliceModel<float>& m, const Stage2aData& data, const Stage2aConfig& sc,
                              const TrainConfig& cfg, Rng& rng) {
  auto step = [&](std::size_t i, Rng& r) {
    const auto& s = data.train[i];
    const auto sub = sample_slices(sc.sampling, s.stem.shape[1], sc.k, r);
    return stage2a_step(m, gather_slices(s.stem, sub.indices), s.label);
  };
  auto eval = [&]() -> std::optional<ValMetrics> {
    if (data.val_labels.empty()) return std::nullopt;
    std::vector<double> p;
    for (const auto& views : data.val_views) {
      double acc = 0;
      for (const auto& v : views) acc += scan_probability(m, v)[1];
      p.push_back(acc / static_cast<double>(views.size()));
    }
    return binary_val_metrics(data.val_labels, p);
  };
  return run_training(m.params, data.train.size(), cfg, rng, step, eval);
}

}  // namespace srcaware
