#include <cmath>

#include <gtest/gtest.h>

#include "srcaware/metrics.hpp"
#include "srcaware/rng.hpp"

using namespace srcaware;

namespace {

double pairwise_auc(const std::vector<int>& y, const std::vector<double>& s) {
  double num = 0;
  long pairs = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        ++pairs;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / static_cast<double>(pairs);
}

double direct_f1(const std::vector<int>& y, const std::vector<int>& p, int cls) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    tp += y[i] == cls && p[i] == cls;
    fp += y[i] != cls && p[i] == cls;
    fn += y[i] == cls && p[i] != cls;
  }
  return tp + fp + fn == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
}

struct Instance {
  std::vector<int> y, p, src;
  std::vector<double> s;
};

Instance random_instance(Rng& rng, int n) {
  Instance in;
  for (int i = 0; i < n; ++i) {
    in.y.push_back(rng.uniform_int(0, 1));
    // Integer hundredths so ties occur and distinct scores stay well separated.
    in.s.push_back((rng.uniform_int(0, 100) + 20 * in.y.back()) / 100.0);
    in.p.push_back(in.s.back() >= 0.6 ? 1 : 0);
    in.src.push_back(rng.uniform_int(0, 3));
  }
  in.y[0] = 0, in.y[1] = 1;
  return in;
}

}  // namespace

TEST(MacroF1, HandComputedCases) {
  EXPECT_DOUBLE_EQ(macro_f1(std::vector<int>{1, 1, 0, 0}, std::vector<int>{1, 1, 0, 0}), 1.0);
  const auto c = confusion(std::vector<int>{1, 1, 0, 0}, std::vector<int>{1, 0, 0, 0});
  EXPECT_NEAR(class_f1(c, 1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(class_f1(c, 0), 0.8, 1e-15);
  EXPECT_NEAR(macro_f1(c), 0.7333333333333333, 1e-12);
  const auto all_one = confusion(std::vector<int>{1, 1, 0, 0}, std::vector<int>{1, 1, 1, 1});
  EXPECT_EQ(class_f1(all_one, 0), 0.0);
  EXPECT_NEAR(macro_f1(all_one), 1.0 / 3.0, 1e-15);
}

TEST(MacroF1, AbsentClassContributesZeroWithWarning) {
  std::vector<std::string> w;
  EXPECT_DOUBLE_EQ(macro_f1(std::vector<int>{1, 1}, std::vector<int>{1, 1}, &w), 0.5);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_NE(w[0].find("class 0"), std::string::npos);
}

TEST(MacroF1, LengthMismatchRejected) {
  EXPECT_THROW(macro_f1(std::vector<int>{1, 0}, std::vector<int>{1}), Error);
}

TEST(MacroF1, ConfusionMatchesDirectDefinitions) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const auto in = random_instance(rng, 100);
    const auto c = confusion(in.y, in.p);
    EXPECT_EQ(c.total(), 100);
    long correct = 0;
    for (std::size_t i = 0; i < in.y.size(); ++i) correct += in.y[i] == in.p[i];
    EXPECT_DOUBLE_EQ(accuracy(c), correct / 100.0);
    EXPECT_NEAR(macro_f1(c), 0.5 * (direct_f1(in.y, in.p, 0) + direct_f1(in.y, in.p, 1)), 1e-15);
  }
}

TEST(Auc, SimpleCases) {
  EXPECT_DOUBLE_EQ(auc(std::vector<int>{0, 0, 1, 1}, std::vector<double>{0.1, 0.2, 0.8, 0.9}), 1.0);
  EXPECT_DOUBLE_EQ(auc(std::vector<int>{1, 0}, std::vector<double>{0.3, 0.3}), 0.5);
  EXPECT_DOUBLE_EQ(auc(std::vector<int>{1, 1, 0, 0}, std::vector<double>{0.1, 0.2, 0.8, 0.9}), 0.0);
}

TEST(Auc, DegenerateClassNamed) {
  try {
    auc(std::vector<int>{0, 0}, std::vector<double>{0.1, 0.2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("no positive"), std::string::npos);
  }
  try {
    auc(std::vector<int>{1, 1}, std::vector<double>{0.1, 0.2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("no negative"), std::string::npos);
  }
}

TEST(Auc, MatchesPairwiseOracle) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    const auto in = random_instance(rng, 200);
    EXPECT_NEAR(auc(in.y, in.s), pairwise_auc(in.y, in.s), 1e-9);
  }
}

TEST(Auc, InvariantUnderMonotoneTransforms) {
  Rng rng(13);
  for (int t = 0; t < 50; ++t) {
    const auto in = random_instance(rng, 200);
    std::vector<double> e(in.s.size()), a(in.s.size());
    for (std::size_t i = 0; i < in.s.size(); ++i) e[i] = std::exp(in.s[i]), a[i] = 3.0 * in.s[i] - 7.0;
    const double base = auc(in.y, in.s);
    EXPECT_NEAR(auc(in.y, e), base, 1e-12);
    EXPECT_NEAR(auc(in.y, a), base, 1e-12);
  }
}

TEST(PerSourceF1, PerfectSubsetAndDegenerateSkip) {
  const std::vector<int> y{1, 0, 1, 0, 0, 0}, p{1, 0, 0, 0, 0, 0}, src{0, 0, 1, 1, 2, 2};
  std::vector<std::string> w;
  const auto f = per_source_f1(y, p, src, PerSourceMode::positive_f1, &w);
  EXPECT_DOUBLE_EQ(f.at(0), 1.0);
  EXPECT_DOUBLE_EQ(f.at(1), 0.0);
  EXPECT_FALSE(f.count(2));
  EXPECT_FALSE(f.count(3));
  ASSERT_EQ(w.size(), 2u);
  EXPECT_NE(w[0].find("source 2"), std::string::npos);
  EXPECT_NE(w[1].find("source 3"), std::string::npos);
}

TEST(PerSourceF1, MatchesSubsetExtractionOracle) {
  Rng rng(14);
  for (int t = 0; t < 20; ++t) {
    const auto in = random_instance(rng, 200);
    const auto pos = per_source_f1(in.y, in.p, in.src);
    const auto mac = per_source_f1(in.y, in.p, in.src, PerSourceMode::macro_f1);
    for (int s = 0; s < 4; ++s) {
      std::vector<int> y, p;
      for (std::size_t i = 0; i < in.y.size(); ++i)
        if (in.src[i] == s) y.push_back(in.y[i]), p.push_back(in.p[i]);
      EXPECT_NEAR(pos.at(s), direct_f1(y, p, 1), 1e-15);
      EXPECT_NEAR(mac.at(s), 0.5 * (direct_f1(y, p, 0) + direct_f1(y, p, 1)), 1e-15);
    }
  }
}

TEST(MetricsReport, JointPermutationInvariance) {
  Rng rng(15);
  auto in = random_instance(rng, 120);
  const auto a = evaluate_binary(in.y, in.p, in.s, in.src);
  std::vector<std::size_t> perm(in.y.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  Instance q;
  for (auto i : perm) q.y.push_back(in.y[i]), q.p.push_back(in.p[i]), q.s.push_back(in.s[i]), q.src.push_back(in.src[i]);
  const auto b = evaluate_binary(q.y, q.p, q.s, q.src);
  EXPECT_EQ(a.acc, b.acc);
  EXPECT_EQ(a.macro_f1, b.macro_f1);
  EXPECT_NEAR(*a.auc, *b.auc, 1e-15);
  EXPECT_EQ(a.per_source_f1, b.per_source_f1);
}

TEST(MetricsReport, KeysAndPerfectPredictions) {
  const std::vector<int> y{1, 0, 1, 0}, src{0, 1, 2, 3};
  const std::vector<double> s{0.9, 0.1, 0.8, 0.2};
  const auto r = evaluate_binary(y, y, s, src);
  const auto j = r.to_json();
  for (const char* k : {"ACC", "Macro-F1", "AUC", "S0", "S1", "S2", "S3"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["ACC"], 1.0);
  EXPECT_EQ(j["Macro-F1"], 1.0);
  EXPECT_EQ(j["AUC"], 1.0);
  EXPECT_EQ(j["S0"], 1.0);
  EXPECT_TRUE(j["S1"].is_null());  // no positives in source 1
}

TEST(MetricsReport, SingleClassAucBecomesWarningUnlessStrict) {
  const std::vector<int> y{0, 0}, p{0, 1}, src{2, 2};
  const std::vector<double> s{0.1, 0.7};
  const auto r = evaluate_binary(y, p, s, src);
  EXPECT_FALSE(r.auc);
  EXPECT_FALSE(r.warnings.empty());
  EXPECT_THROW(evaluate_binary(y, p, s, src, PerSourceMode::positive_f1, true), Error);
}
