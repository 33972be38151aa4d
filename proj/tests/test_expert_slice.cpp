#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "gradcheck.hpp"
#include "srcaware/expert_slice.hpp"

using namespace srcaware;

namespace {

SliceEncoderConfig mini_enc() {
  SliceEncoderConfig c;
  c.grid = 8;
  c.channels = {2, 3, 3};
  c.embed = 4;
  return c;
}

template <class T>
nn::Tensor<T> random_slices(Rng& rng, int k, int grid) {
  nn::Tensor<T> t({1, k, grid, grid});
  for (auto& v : t.data) v = static_cast<T>(rng.uniform());
  return t;
}

// D-slice stem; for label 1 the middle two thirds of the slices carry lesions.
nn::Tensor<float> toy_stack(Rng& rng, int depth, int grid, int label) {
  nn::Tensor<float> t({1, depth, grid, grid});
  const std::size_t plane = static_cast<std::size_t>(grid) * grid;
  for (int s = 0; s < depth; ++s) {
    const int y = label == 1 && s >= depth / 6 && s < 5 * depth / 6 ? 1 : 0;
    const auto img = pretrain_slice(grid, y, rng);
    std::copy(img.begin(), img.end(), t.ptr() + static_cast<std::size_t>(s) * plane);
  }
  return t;
}

}  // namespace

TEST(SliceLoss, LogOfMeanNotMeanOfLogs) {
  const double z = std::log(9.0);
  const std::vector<std::array<double, 2>> logits{{0.0, z}, {0.0, -z}};
  const auto r = nn::slice_loss_from_logits(std::span<const std::array<double, 2>>(logits), 1);
  EXPECT_NEAR(r.scan_prob[1], 0.5, 1e-12);
  EXPECT_NEAR(r.loss, 0.6931, 1e-4);
  const double mean_of_logs = -(std::log(0.9) + std::log(0.1)) / 2;
  EXPECT_NEAR(mean_of_logs, 1.2040, 1e-4);
  EXPECT_GT(std::abs(r.loss - mean_of_logs), 0.5);
}

TEST(SliceLoss, GradientCheckThroughEncoder) {
  Rng rng(1);
  SliceModel<double> m(mini_enc(), rng, false);
  ASSERT_LE(m.params.count(), 5000u);
  // Non-zero biases keep pre-activations off the ReLU kink at exactly 0.
  for (auto& p : m.params)
    if (p.name.ends_with("bias")) nn::init_normal(p, rng, 0.1);
  const auto x = random_slices<double>(rng, 5, 8);
  m.params.zero_grad();
  stage2a_step(m, x, 1);
  const auto grads = gradcheck::grads_of(m.params);
  auto loss = [&] {
    const auto z = m.slice_logits(x);
    return nn::slice_loss_from_logits(std::span<const std::array<double, 2>>(z), 1).loss;
  };
  const auto r = gradcheck::check(m.params, grads, loss, 150, 2);
  EXPECT_GE(r.checked, 100u);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(SliceModel, ZeroHeadGivesHalf) {
  Rng rng(2);
  SliceModel<float> m(SliceEncoderConfig{}, rng);
  const auto x = random_slices<float>(rng, 24, 28);
  const auto p = scan_probability(m, x);
  EXPECT_FLOAT_EQ(p[0], 0.5);
  EXPECT_FLOAT_EQ(p[1], 0.5);
  const auto pred = predict_stage2a(m, x, "ct_scan_1", "crs24");
  EXPECT_EQ(pred.expert_id, "stage2a");
  EXPECT_EQ(pred.label(), 1);
}

TEST(SliceModel, SlicePartitionDoesNotChangeProbabilities) {
  Rng rng(3);
  SliceModel<double> m(SliceEncoderConfig{}, rng, false);
  const auto x = random_slices<double>(rng, 24, 28);
  const auto whole = slice_probabilities(m, x, 24);
  const auto parts = slice_probabilities(m, x, 6);
  ASSERT_EQ(whole.size(), 24u);
  ASSERT_EQ(parts.size(), 24u);
  for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(whole[i], parts[i], 1e-12);
  double mean = 0;
  for (double p : whole) mean += p / 24;
  EXPECT_NEAR(scan_probability(m, x)[1], mean, 1e-12);
}

TEST(SliceModel, EncoderGroupsAndShapes) {
  Rng rng(4);
  SliceModel<float> m(SliceEncoderConfig{}, rng);
  std::set<std::string> groups;
  for (const auto& p : m.params) groups.insert(p.group);
  EXPECT_EQ(groups, (std::set<std::string>{"encoder.0", "encoder.1", "encoder.2", "encoder.3", "head"}));
  const auto e = encode(m.params, m.enc, random_slices<float>(rng, 3, 28));
  EXPECT_EQ(e.shape, (std::vector<int>{3, 32}));
  EXPECT_THROW(encode(m.params, m.enc, random_slices<float>(rng, 3, 16)), Error);
}

TEST(SliceModel, CachedPrefixMatchesFullPass) {
  Rng rng(5);
  SliceModel<double> m(SliceEncoderConfig{}, rng);
  const auto x = random_slices<double>(rng, 4, 28);
  const auto full = encode(m.params, m.enc, x);
  for (int layer = 0; layer < 4; ++layer) {
    const auto part = encode_from(m.params, m.enc, layer, encoder_prefix(m.params, m.enc, layer, x));
    for (std::size_t i = 0; i < full.size(); ++i) ASSERT_EQ(full.data[i], part.data[i]);
  }
}

TEST(SliceModel, FrozenEncoderStaysBitwiseFixed) {
  Rng rng(6);
  SliceModel<float> m(SliceEncoderConfig{}, rng);
  m.params.set_trainable("encoder", false);
  EXPECT_EQ(first_trainable_layer(m.params), 4);
  const auto before = m.params;
  nn::Optimizer<float> opt(nn::OptimizerConfig{}, m.params, 10);
  for (int i = 0; i < 10; ++i) {
    m.params.zero_grad();
    stage2a_step(m, toy_stack(rng, 12, 28, i % 2), i % 2);
    opt.step(m.params, 1.0);
  }
  for (std::size_t k = 0; k < m.params.size(); ++k) {
    if (m.params[k].group == "head")
      EXPECT_NE(m.params[k].value, before[k].value);
    else
      EXPECT_EQ(m.params[k].value, before[k].value) << m.params[k].name;
  }
  m.params.set_trainable("encoder.2", true);
  m.params.set_trainable("encoder.3", true);
  EXPECT_EQ(first_trainable_layer(m.params), 2);
}

TEST(SliceSampling, ContiguousOffsetsAreUniform) {
  Rng rng(7);
  const int D = 24, K = 12, n = 10000;
  std::map<int, int> counts;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_contiguous(D, K, rng);
    ASSERT_EQ(s.indices.size(), static_cast<std::size_t>(K));
    for (int j = 0; j < K; ++j) ASSERT_EQ(s.indices[static_cast<std::size_t>(j)], s.start_offset + j);
    counts[s.start_offset]++;
  }
  ASSERT_EQ(counts.size(), 13u);
  EXPECT_EQ(counts.begin()->first, 0);
  EXPECT_EQ(counts.rbegin()->first, 12);
  const double p = 1.0 / 13, sigma = std::sqrt(n * p * (1 - p));
  for (const auto& [tau, c] : counts) EXPECT_NEAR(c, n * p, 3 * sigma) << "tau=" << tau;
}

TEST(SliceSampling, DepthRandomIsSortedDistinctAndUniform) {
  Rng rng(8);
  const int D = 24, K = 12, n = 10000;
  std::vector<int> hits(D, 0);
  int adjacent = 0;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_depth_random(D, K, rng);
    EXPECT_EQ(s.start_offset, -1);
    ASSERT_EQ(s.indices.size(), static_cast<std::size_t>(K));
    for (std::size_t j = 1; j < s.indices.size(); ++j) ASSERT_LT(s.indices[j - 1], s.indices[j]);
    for (int v : s.indices) hits[static_cast<std::size_t>(v)]++;
    // Pair inclusion of slices 0 and 1: K(K-1) / (D(D-1)).
    if (s.indices[0] == 0 && s.indices[1] == 1) adjacent++;
  }
  const double p = static_cast<double>(K) / D, sigma = std::sqrt(n * p * (1 - p));
  for (int d = 0; d < D; ++d) EXPECT_NEAR(hits[static_cast<std::size_t>(d)], n * p, 4 * sigma) << "depth " << d;
  const double q = static_cast<double>(K * (K - 1)) / (D * (D - 1));
  EXPECT_NEAR(adjacent, n * q, 4 * std::sqrt(n * q * (1 - q)));
}

TEST(SliceSampling, RejectsBadSizes) {
  Rng rng(9);
  EXPECT_THROW(sample_contiguous(10, 11, rng), Error);
  EXPECT_THROW(sample_depth_random(10, 0, rng), Error);
  EXPECT_EQ(sample_contiguous(5, 5, rng).start_offset, 0);
  nn::Tensor<float> stem({1, 4, 28, 28});
  EXPECT_THROW(gather_slices(stem, {0, 4}), Error);
}

TEST(Pretrain, WarmUpLowersLossAndKeepsLayout) {
  Rng rng(10);
  SliceModel<float> m(SliceEncoderConfig{}, rng);
  const std::size_t n = m.params.size();
  PretrainConfig pc;
  pc.slices = 128;
  pc.epochs = 4;
  const auto log = pretrain_slice_encoder(m.params, m.enc, pc, rng);
  EXPECT_EQ(m.params.size(), n);
  EXPECT_LT(log.epochs.back().train_loss, log.epochs.front().train_loss);
}

TEST(Stage2a, LearnsLesionSlicesDeterministically) {
  auto run = [](SliceSampling mode) {
    Rng drng(11);
    Stage2aData data;
    for (int i = 0; i < 16; ++i) data.train.push_back({i % 2, toy_stack(drng, 24, 28, i % 2)});
    for (int i = 0; i < 8; ++i) {
      data.val_labels.push_back(i % 2);
      data.val_views.push_back({toy_stack(drng, 24, 28, i % 2)});
    }
    Rng rng(12);
    SliceModel<float> m(SliceEncoderConfig{}, rng);
    pretrain_slice_encoder(m.params, m.enc, PretrainConfig{}, rng);
    Stage2aConfig sc;
    sc.sampling = mode;
    TrainConfig tc;
    tc.epochs = 12;
    tc.batch_size = 4;
    tc.opt.lr = 3e-3;
    const auto log = train_stage2a(m, data, sc, tc, rng);
    return std::make_pair(log.best().val->macro_f1, m.params.checksum());
  };
  const auto a = run(SliceSampling::contiguous), b = run(SliceSampling::contiguous);
  EXPECT_EQ(a.second, b.second);
  EXPECT_GE(a.first, 0.85);
  EXPECT_GE(run(SliceSampling::depth_random).first, 0.85);
}
