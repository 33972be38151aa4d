#include <chrono>
#include <cmath>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "srcaware/expert3d.hpp"

using namespace srcaware;

namespace {

Volume3DConfig mini_config() {
  Volume3DConfig c;
  c.stem = {4, 8, 8};
  c.widths = {2, 3, 3, 4};
  c.zero_head = false;
  return c;
}

nn::Tensor<double> random_stem(Rng& rng, std::array<int, 3> d) {
  nn::Tensor<double> t({1, d[0], d[1], d[2]});
  for (auto& v : t.data) v = rng.uniform();
  return t;
}

// Stem with a bright cube for class 1.
nn::Tensor<float> class_stem(Rng& rng, std::array<int, 3> d, int label) {
  nn::Tensor<float> t({1, d[0], d[1], d[2]});
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(0.3, 0.5));
  if (label == 1) {
    const int s0 = rng.uniform_int(0, d[0] - 3), r0 = rng.uniform_int(0, d[1] - 4), c0 = rng.uniform_int(0, d[2] - 4);
    for (int s = s0; s < s0 + 3; ++s)
      for (int r = r0; r < r0 + 4; ++r)
        for (int c = c0; c < c0 + 4; ++c) t.data[(static_cast<std::size_t>(s) * d[1] + r) * d[2] + c] = 0.9f;
  }
  return t;
}

}  // namespace

TEST(LossCe, UniformLogits) {
  EXPECT_NEAR(nn::loss_ce<double>({0.0, 0.0}, 0), std::log(2.0), 1e-15);
  EXPECT_NEAR(nn::loss_ce<double>({0.0, 0.0}, 1), 0.693147, 1e-6);
}

TEST(LossCe, HandComputedValue) {
  const long double oracle = std::log1p(std::exp(-2.0L));
  EXPECT_NEAR(nn::loss_ce<double>({1.0, 3.0}, 1), static_cast<double>(oracle), 1e-15);
  EXPECT_NEAR(nn::loss_ce<double>({1.0, 3.0}, 1), 0.126928, 1e-6);
}

TEST(LossCe, ShiftInvariance) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(-5, 5), c = rng.uniform(-5, 5), t = rng.uniform(-50, 50);
    for (int y : {0, 1}) EXPECT_NEAR(nn::loss_ce<double>({a + t, a + c + t}, y), nn::loss_ce<double>({a, a + c}, y), 1e-9);
  }
}

TEST(LossCe, StableForLargeLogitsAndRejectsNaN) {
  EXPECT_NEAR(nn::loss_ce<double>({1000.0, 0.0}, 1), 1000.0, 1e-9);
  EXPECT_THROW(nn::loss_ce<double>({std::nan(""), 0.0}, 0), Error);
}

TEST(Expert3d, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  Volume3DConfig c;
  c.stem = {8, 16, 16};
  c.widths = {3, 4, 4, 5};
  c.zero_head = false;
  Volume3DModel<double> model(c, rng);
  for (auto& p : model.params)
    if (p.name.ends_with("bias")) nn::init_normal(p, rng, 0.1);
  ASSERT_LE(model.params.count(), 5000u);
  const auto stem = random_stem(rng, c.stem);
  model.params.zero_grad();
  stage1_step(model, stem, 1);
  const auto grads = gradcheck::grads_of(model.params);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    double mx = 0;
    for (double g : grads[k]) mx = std::max(mx, std::abs(g));
    EXPECT_GT(mx, 0.0) << model.params[k].name;
  }
  auto loss = [&] {
    const auto z = model.logits(stem);
    return nn::cross_entropy(std::span<const double>(z), 1);
  };
  const auto r = gradcheck::check(model.params, grads, loss, 150, 5);
  EXPECT_EQ(r.checked, 150);
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(Expert3d, ZeroHeadGivesUniformAndRepeatable) {
  Rng rng(1);
  Volume3DModel<float> model(Volume3DConfig{}, rng);
  VolumeF v(kCanonical3DShape);
  for (auto& x : v.data()) x = static_cast<float>(rng.uniform());
  const CanonicalVolume3D vol(std::move(v));
  const auto p = predict_3d(model, vol, "a");
  EXPECT_EQ(p.probs[0], 0.5);
  EXPECT_EQ(p.probs[1], 0.5);
  EXPECT_EQ(p.expert_id, "stage1");
  const auto q = predict_3d(model, vol, "a");
  EXPECT_EQ(p.probs, q.probs);
}

TEST(Expert3d, ProbabilitiesSumToOneAndShapeChecked) {
  Rng rng(3);
  auto cfg = mini_config();
  Volume3DModel<double> model(cfg, rng);
  for (int i = 0; i < 20; ++i) {
    const auto p = predict_probs_3d(model, random_stem(rng, cfg.stem));
    EXPECT_NEAR(p[0] + p[1], 1.0, 1e-6);
  }
  EXPECT_THROW(model.logits(random_stem(rng, {4, 8, 9})), Error);
}

TEST(Expert3d, InputKindsMirrorStageOneSettings) {
  EXPECT_EQ(views_of(parse_input_kind("orig_lung")).size(), 2u);
  EXPECT_EQ(views_of(parse_input_kind("lung")), std::vector<View>{View::lung});
  EXPECT_EQ(views_of(parse_input_kind("orig")), std::vector<View>{View::orig});
  EXPECT_TRUE(rotation_enabled(parse_input_kind("lung_rot")));
  EXPECT_FALSE(rotation_enabled(InputKind::orig_lung));
  EXPECT_THROW(parse_input_kind("both"), Error);
}

TEST(Expert3d, TrainingIsDeterministic) {
  auto run = [] {
    Rng data_rng(9);
    Stage1Data data;
    const std::array<int, 3> d{8, 16, 16};
    for (int i = 0; i < 8; ++i) {
      auto t = class_stem(data_rng, d, i % 2);
      data.train.push_back({i % 2, [t](Rng&) { return t; }});
    }
    Volume3DConfig cfg;
    cfg.stem = d;
    cfg.widths = {4, 4, 8, 8};
    Rng rng(1);
    Volume3DModel<float> model(cfg, rng);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    const auto log = train_stage1(model, data, tc, rng);
    return std::pair{model.params.checksum(), log.epochs.back().train_loss};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Expert3d, SeparableDataDrivesLossDown) {
  Rng data_rng(4);
  Stage1Data data;
  const std::array<int, 3> d{16, 32, 32};
  for (int i = 0; i < 24; ++i) {
    auto t = class_stem(data_rng, d, i % 2);
    data.train.push_back({i % 2, [t](Rng&) { return t; }});
  }
  Volume3DConfig cfg;
  cfg.stem = d;
  Rng rng(2);
  Volume3DModel<float> model(cfg, rng);
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 4;
  tc.opt.lr = 3e-3;
  const auto log = train_stage1(model, data, tc, rng);
  EXPECT_LT(log.epochs.back().train_loss, 0.1);
  EXPECT_LT(log.epochs.back().train_loss, 0.25 * log.epochs.front().train_loss);
}

TEST(Expert3d, ReplaceHeadKeepsBackbone) {
  Rng rng(5);
  Volume3DModel<double> model(mini_config(), rng);
  const auto before = model.params.by_name("backbone.stage2.conv1.weight").value;
  model.replace_head(4, true, rng);
  EXPECT_EQ(model.num_classes(), 4);
  EXPECT_EQ(model.params.by_name("backbone.stage2.conv1.weight").value, before);
  EXPECT_EQ(model.params.by_name("head.weight").shape, (std::vector<int>{4, 8}));
  const auto z = model.logits(random_stem(rng, mini_config().stem));
  EXPECT_EQ(z.size(), 4u);
}

TEST(Expert3d, DefaultModelForwardCost) {
  Rng rng(6);
  Volume3DModel<float> model(Volume3DConfig{}, rng);
  nn::Tensor<float> stem({1, 16, 32, 32});
  for (auto& v : stem.data) v = static_cast<float>(rng.uniform());
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 5; ++i) stage1_step(model, stem, i % 2);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / 5;
  RecordProperty("train_step_ms", std::to_string(ms));
  std::printf("default 3D model train step: %.1f ms, %zu params\n", ms, model.params.count());
}
