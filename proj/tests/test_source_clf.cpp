#include <gtest/gtest.h>

#include "srcaware/source_clf.hpp"

using namespace srcaware;

namespace {

Volume3DConfig small_config() {
  Volume3DConfig c;
  c.stem = {8, 16, 16};
  c.widths = {4, 4, 8, 8};
  return c;
}

// Stems whose mean intensity depends on the source.
SourceData toy_sources(Rng& rng, int per_source) {
  SourceData d;
  const auto cfg = small_config();
  for (int s = 0; s < kNumSources; ++s)
    for (int i = 0; i < per_source; ++i) {
      nn::Tensor<float> t({1, cfg.stem[0], cfg.stem[1], cfg.stem[2]});
      for (auto& v : t.data) v = static_cast<float>(0.2 * s + rng.uniform(0.0, 0.1));
      d.train_stems.push_back(t);
      d.train_sources.push_back(s);
    }
  return d;
}

}  // namespace

TEST(SourceClf, OnlyHeadIsTrainable) {
  Rng rng(1);
  Volume3DModel<float> stage1(small_config(), rng);
  const auto m = build_source_clf(stage1, rng);
  EXPECT_EQ(m.num_classes(), kNumSources);
  for (const auto& p : m.params) EXPECT_EQ(p.trainable, p.group == "head") << p.name;
  EXPECT_FALSE(m.backbone_trainable());
  // The Stage 1 model itself is untouched.
  EXPECT_TRUE(stage1.backbone_trainable());
  EXPECT_EQ(stage1.num_classes(), 2);
}

TEST(SourceClf, BackboneBitwiseUnchangedAfterTraining) {
  Rng rng(2);
  Volume3DModel<float> stage1(small_config(), rng);
  auto m = build_source_clf(stage1, rng);
  std::vector<std::vector<float>> before;
  for (const auto& p : m.params)
    if (p.group == "backbone") before.push_back(p.value);
  const auto head_before = m.params.by_name("head.weight").value;
  Rng drng(3);
  const auto data = toy_sources(drng, 3);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 6;  // 2 steps per epoch, 10 in total
  tc.opt.lr = 1e-2;
  const auto r = train_source_clf(m, data, tc, rng);
  EXPECT_EQ(r.log.steps, 10);
  std::size_t k = 0;
  for (const auto& p : m.params)
    if (p.group == "backbone") EXPECT_EQ(p.value, before[k++]) << p.name;
  EXPECT_NE(m.params.by_name("head.weight").value, head_before);
}

TEST(SourceClf, ZeroHeadGivesUniformAndLowestIndex) {
  Rng rng(4);
  Volume3DModel<float> stage1(small_config(), rng);
  const auto m = build_source_clf(stage1, rng);
  nn::Tensor<float> stem({1, 8, 16, 16}, 0.5f);
  const auto s = predict_source(m, stem, "ct_scan_0");
  for (double p : s.source_probs) EXPECT_NEAR(p, 0.25, 1e-7);
  EXPECT_EQ(s.predicted_source, 0);
  EXPECT_EQ(m.logits(stem).size(), 4u);
}

TEST(SourceClf, LogitsMustBeFourWide) {
  EXPECT_THROW(source_from_logits("x", std::vector<double>{0.0, 1.0}), Error);
  const auto s = source_from_logits("x", std::vector<double>{0.0, 3.0, 3.0, 1.0});
  EXPECT_EQ(s.predicted_source, 1);
}

TEST(SourceClf, AbsentSourceIsAnError) {
  Rng rng(5);
  Volume3DModel<float> stage1(small_config(), rng);
  auto m = build_source_clf(stage1, rng);
  Rng drng(6);
  auto data = toy_sources(drng, 2);
  for (std::size_t i = data.train_sources.size(); i-- > 0;)
    if (data.train_sources[i] == 2) {
      data.train_sources.erase(data.train_sources.begin() + static_cast<long>(i));
      data.train_stems.erase(data.train_stems.begin() + static_cast<long>(i));
    }
  try {
    train_source_clf(m, data, TrainConfig{}, rng);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("source 2 is absent"), std::string::npos);
  }
}

TEST(SourceClf, TrainableBackboneIsRejected) {
  Rng rng(7);
  Volume3DModel<float> m(small_config(), rng);
  m.replace_head(kNumSources, true, rng);
  Rng drng(8);
  EXPECT_THROW(train_source_clf(m, toy_sources(drng, 2), TrainConfig{}, rng), Error);
}

TEST(SourceClf, LearnsSeparableSourcesDeterministically) {
  auto run = [] {
    Rng rng(9);
    Volume3DModel<float> stage1(small_config(), rng);
    auto m = build_source_clf(stage1, rng);
    Rng drng(10);
    auto data = toy_sources(drng, 6);
    data.val_stems = data.train_stems;
    data.val_sources = data.train_sources;
    TrainConfig tc;
    tc.epochs = 200;
    tc.opt.lr = 3e-2;
    const auto r = train_source_clf(m, data, tc, rng);
    return std::make_pair(r.val_acc, m.params.checksum());
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.second, b.second);
  EXPECT_GE(a.first, 0.9);
}
