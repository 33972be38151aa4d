#pragma once

// Stage 2b context expert: the Stage 2a slice encoder (mostly frozen), learned
// positional embeddings, two pre-norm Transformer blocks over the 24 slice
// embeddings, mean pooling and a binary head. flat_cls replaces the context
// blocks by a head over the concatenated embeddings.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/expert_slice.hpp"
#include "srcaware/nn/attention.hpp"
#include "srcaware/nn/loss.hpp"
#include "srcaware/training.hpp"

namespace srcaware {

enum class Stage2bVariant { trans_only, trans_last2, flat_cls };

inline std::string to_string(Stage2bVariant v) {
  switch (v) {
    case Stage2bVariant::trans_only: return "trans_only";
    case Stage2bVariant::trans_last2: return "trans_last2";
    case Stage2bVariant::flat_cls: return "flat_cls";
  }
  return "?";
}

inline Stage2bVariant parse_stage2b_variant(const std::string& s) {
  if (s == "trans_only") return Stage2bVariant::trans_only;
  if (s == "trans_last2") return Stage2bVariant::trans_last2;
  if (s == "flat_cls") return Stage2bVariant::flat_cls;
  throw Error("unknown stage2b variant: " + s);
}

inline constexpr int kContextSlices = 24;

struct ContextConfig {
  int heads = 4;
  int ff = 0;  // 0 means 4 * E
  int blocks = 2;
  bool positional = true;
  bool identity_attention = false;  // test hook
};

template <class T>
struct ContextCache {
  EncoderCache<T> enc;
  nn::Tensor<T> embed;  // [24, E]
  std::vector<nn::TransformerBlockCache<T>> blocks;
  nn::Tensor<T> pooled;  // [1, E] or [1, 24E]
};

template <class T>
class ContextModel {
 public:
  Stage2bVariant variant = Stage2bVariant::trans_only;
  ContextConfig cfg;
  nn::ParamStore<T> params;
  SliceEncoderLayout enc;
  nn::TransformerBlockSpec block_spec;
  std::vector<nn::TransformerBlockParams> blocks;
  std::size_t pos = 0, hw = 0, hb = 0;

  int embed_dim() const { return enc.cfg.embed; }
  bool has_context() const { return variant != Stage2bVariant::flat_cls; }
  nn::LinearSpec head_spec() const {
    return {has_context() ? embed_dim() : kContextSlices * embed_dim(), 2};
  }

  // Index of the first encoder layer that is recomputed during training; the
  // output of the layers before it can be cached. 4 means embeddings are cached.
  int live_from() const { return first_trainable_layer(params); }

  // Input to the live part of the encoder for a [1, 24, G, G] stem.
  nn::Tensor<T> live_input(const nn::Tensor<T>& stem) const {
    require(stem.shape.size() == 4 && stem.shape[1] == kContextSlices,
            "stage2b expects a 24-slice stack, got " + std::to_string(stem.shape.size() == 4 ? stem.shape[1] : -1));
    for (T v : stem.data) require(std::isfinite(static_cast<double>(v)), "stage2b input contains NaN or Inf");
    const int from = live_from();
    if (from >= kEncoderLayers) return encode(params, enc, stem);
    return encoder_prefix(params, enc, from, stem);
  }

  std::vector<T> logits_from(const nn::Tensor<T>& live, ContextCache<T>* cache = nullptr) const {
    ContextCache<T> local;
    ContextCache<T>& c = cache ? *cache : local;
    const int from = live_from();
    c.embed = from >= kEncoderLayers ? live : encode_from(params, enc, from, live, &c.enc);
    const int E = embed_dim();
    if (!has_context()) {
      c.pooled = nn::Tensor<T>({1, kContextSlices * E}, c.embed.data);
    } else {
      nn::Tensor<T> x = c.embed;
      if (cfg.positional)
        for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += params[pos].value[i];
      c.blocks.assign(blocks.size(), {});
      for (std::size_t b = 0; b < blocks.size(); ++b)
        x = nn::transformer_block_forward(block_spec, params, blocks[b], x, c.blocks[b]);
      c.pooled = nn::Tensor<T>({1, E});
      for (int n = 0; n < kContextSlices; ++n)
        for (int e = 0; e < E; ++e)
          c.pooled.data[static_cast<std::size_t>(e)] += x.data[static_cast<std::size_t>(n) * E + e] / T(kContextSlices);
    }
    return nn::linear_forward(head_spec(), params[hw], params[hb], c.pooled).data;
  }

  std::vector<T> logits(const nn::Tensor<T>& stem, ContextCache<T>* cache = nullptr) const {
    return logits_from(live_input(stem), cache);
  }

  void backward(const ContextCache<T>& c, const std::vector<T>& dlogits) {
    nn::Tensor<T> dz({1, 2}, dlogits);
    const nn::Tensor<T> dpool = nn::linear_backward(head_spec(), params[hw], params[hb], c.pooled, dz, true);
    const int E = embed_dim();
    nn::Tensor<T> dembed({kContextSlices, E});
    if (!has_context()) {
      dembed.data = dpool.data;
    } else {
      nn::Tensor<T> dx({kContextSlices, E});
      for (int n = 0; n < kContextSlices; ++n)
        for (int e = 0; e < E; ++e)
          dx.data[static_cast<std::size_t>(n) * E + e] = dpool.data[static_cast<std::size_t>(e)] / T(kContextSlices);
      for (std::size_t b = blocks.size(); b-- > 0;)
        dx = nn::transformer_block_backward(block_spec, params, blocks[b], c.blocks[b], dx);
      if (cfg.positional && params[pos].trainable)
        for (std::size_t i = 0; i < dx.size(); ++i) params[pos].grad[i] += dx.data[i];
      dembed = std::move(dx);
    }
    const int from = live_from();
    if (from < kEncoderLayers) encode_backward(params, enc, from, c.enc, dembed);
  }
};

// Builds a Stage 2b model around a copy of the Stage 2a encoder. The Stage 2a
// head is not carried over.
template <class T>
ContextModel<T> build_stage2b(const SliceModel<T>& stage2a, Stage2bVariant variant, const ContextConfig& cfg,
                              Rng& rng) {
  ContextModel<T> m;
  m.variant = variant;
  m.cfg = cfg;
  m.enc = add_slice_encoder(m.params, stage2a.enc.cfg, rng);
  for (auto& p : m.params) p.value = stage2a.params.by_name(p.name).value;
  const int E = stage2a.enc.cfg.embed;
  if (m.has_context()) {
    require(cfg.blocks >= 1, "context model needs at least one block");
    m.block_spec = nn::TransformerBlockSpec{E, cfg.heads, cfg.ff > 0 ? cfg.ff : 4 * E, cfg.identity_attention};
    m.pos = m.params.add("context.pos_embed", "context", {kContextSlices, E});
    nn::init_normal(m.params[m.pos], rng, 0.02);
    for (int b = 0; b < cfg.blocks; ++b)
      m.blocks.push_back(nn::add_transformer_block(m.params, m.block_spec, "context.block" + std::to_string(b), "context", rng));
  }
  const auto hs = m.head_spec();
  m.hw = m.params.add("head.weight", "head", {2, hs.in});
  m.hb = m.params.add("head.bias", "head", {2});
  m.params.set_trainable("encoder", false);
  if (variant == Stage2bVariant::trans_last2) {
    m.params.set_trainable("encoder.2", true);
    m.params.set_trainable("encoder.3", true);
  }
  return m;
}

template <class T>
std::array<double, 2> forward_ctx(const ContextModel<T>& m, const nn::Tensor<T>& stem) {
  const auto z = m.logits(stem);
  const auto p = nn::softmax(std::span<const T>(z));
  return {static_cast<double>(p[0]), static_cast<double>(p[1])};
}

// Context-model step from a cached live input; returns the loss.
template <class T>
T stage2b_step(ContextModel<T>& m, const nn::Tensor<T>& live, int label) {
  ContextCache<T> cache;
  const auto z = m.logits_from(live, &cache);
  std::vector<T> dz;
  const T loss = nn::cross_entropy(std::span<const T>(z), label, &dz);
  m.backward(cache, dz);
  return loss;
}

template <class T>
ExpertPrediction predict_stage2b(const ContextModel<T>& m, const nn::Tensor<T>& stem, std::string scan_id,
                                 std::string variant_id) {
  const auto p = forward_ctx(m, stem);
  return ExpertPrediction{std::move(scan_id), {p[0], p[1]}, "stage2b", std::move(variant_id)};
}

// Same data layout as Stage 2a; stems must have 24 slices. The frozen encoder
// prefix is computed once per stem.
inline TrainLog train_stage2b(ContextModel<float>& m, const Stage2aData& data, const TrainConfig& cfg, Rng& rng) {
  std::vector<nn::Tensor<float>> live;
  for (const auto& s : data.train) live.push_back(m.live_input(s.stem));
  std::vector<std::vector<nn::Tensor<float>>> val_live;
  for (const auto& views : data.val_views) {
    val_live.emplace_back();
    for (const auto& v : views) val_live.back().push_back(m.live_input(v));
  }
  auto step = [&](std::size_t i, Rng&) { return stage2b_step(m, live[i], data.train[i].label); };
  auto eval = [&]() -> std::optional<ValMetrics> {
    if (data.val_labels.empty()) return std::nullopt;
    std::vector<double> p;
    for (const auto& views : val_live) {
      double acc = 0;
      for (const auto& v : views) acc += static_cast<double>(nn::softmax(std::span<const float>(m.logits_from(v)))[1]);
      p.push_back(acc / static_cast<double>(views.size()));
    }
    return binary_val_metrics(data.val_labels, p);
  };
  return run_training(m.params, data.train.size(), cfg, rng, step, eval);
}

}  // namespace srcaware
