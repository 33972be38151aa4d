#include <algorithm>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "srcaware/ledger.hpp"

using namespace srcaware;

namespace {

// Revised train/val statistics, rows: train COVID, train Non-COVID, val COVID, val Non-COVID.
constexpr long kTable2[4][4] = {{175, 175, 39, 175}, {230, 165, 165, 165}, {43, 43, 39, 42}, {45, 45, 45, 45}};

long cell(const SplitLedger& l, int row, int source) {
  return l.count(row < 2 ? Split::train : Split::val, source, row % 2 == 0 ? 1 : 0);
}

}  // namespace

TEST(OfficialLedger, PublishedCells) {
  const auto l = official_ledger();
  EXPECT_EQ(l.count(Split::train, 2, 1), 39);
  EXPECT_EQ(l.count(Split::val, 2, 1), 0);
  EXPECT_EQ(l.total(Split::test), 1488);
  EXPECT_EQ(l.total(Split::train, 1), 564);
  EXPECT_EQ(l.total(Split::train, 0), 660);
  EXPECT_EQ(l.total(Split::val, 1), 128);
  EXPECT_EQ(l.total(Split::val, 0), 180);
}

TEST(ApplyCorrections, ReproducesRevisedTableCellForCell) {
  const auto l = revised_ledger();
  for (int row = 0; row < 4; ++row)
    for (int s = 0; s < 4; ++s) EXPECT_EQ(cell(l, row, s), kTable2[row][s]) << "row " << row << " source " << s;
  EXPECT_EQ(l.total(Split::train, 1), 564);
  EXPECT_EQ(l.total(Split::train, 0), 725);
  EXPECT_EQ(l.total(Split::val, 1), 167);
  EXPECT_EQ(l.total(Split::val, 0), 180);
  EXPECT_EQ(l.total(Split::train), 1289);
  EXPECT_EQ(l.total(Split::test), 1487);
  EXPECT_EQ(l.corrections().size(), 4u);
}

TEST(ApplyCorrections, EmptyIsIdentity) {
  EXPECT_EQ(apply_corrections(official_ledger(), {}), official_ledger());
}

TEST(ApplyCorrections, SourceZeroExpansionThenAbsence) {
  const auto corr = paper_corrections();
  const auto expand = *std::find_if(corr.begin(), corr.end(),
                                    [](auto& c) { return c.kind == CorrectionKind::multi_sample_expansion; });
  const auto absent = *std::find_if(corr.begin(), corr.end(), [](auto& c) { return c.kind == CorrectionKind::exclusion; });
  auto l = official_ledger();
  EXPECT_EQ(l.count(Split::train, 0, 0), 165);
  l = apply_corrections(l, {expand});
  EXPECT_EQ(l.count(Split::train, 0, 0), 231);
  l = apply_corrections(l, {absent});
  EXPECT_EQ(l.count(Split::train, 0, 0), 230);
}

TEST(ApplyCorrections, RejectsNegativeCounts) {
  const CorrectionRecord bad{CorrectionKind::exclusion, "val/2/1/x", -1, ""};
  EXPECT_THROW(apply_corrections(official_ledger(), {bad}), Error);
}

TEST(ApplyCorrections, OrderIndependentForDisjointTargets) {
  auto corr = paper_corrections();
  const auto ref = apply_corrections(official_ledger(), corr);
  std::mt19937 g(3);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(corr.begin(), corr.end(), g);
    EXPECT_EQ(apply_corrections(official_ledger(), corr), ref);
  }
}

TEST(CorrectionsFile, RoundTrip) {
  std::stringstream ss;
  write_corrections(ss, paper_corrections());
  const auto back = read_corrections(ss);
  ASSERT_EQ(back.size(), paper_corrections().size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].kind, paper_corrections()[i].kind);
    EXPECT_EQ(back[i].target, paper_corrections()[i].target);
    EXPECT_EQ(back[i].delta, paper_corrections()[i].delta);
    EXPECT_EQ(back[i].note, paper_corrections()[i].note);
  }
  EXPECT_EQ(apply_corrections(official_ledger(), back), revised_ledger());
}

TEST(CorrectionsFile, MalformedLineRejected) {
  std::stringstream ss("multi_sample_expansion\ttrain/0/0/x\tnot-a-number\tnote\n");
  EXPECT_THROW(read_corrections(ss), Error);
  std::stringstream ss2("bogus_kind\ttrain/0/0/x\t1\tnote\n");
  EXPECT_THROW(read_corrections(ss2), Error);
}

TEST(ExpandFolder, SixtySevenSubfoldersGiveNetPlusSixtySix) {
  FolderManifest f{"ct_scan_8", Split::train, 0, 0, {}};
  for (int i = 0; i < 67; ++i) f.subfolders.push_back("sample_" + std::to_string(i));
  const auto entries = expand_multi_sample_folder(f);
  ASSERT_EQ(entries.size(), 67u);
  for (const auto& e : entries) {
    EXPECT_EQ(e.split, Split::train);
    EXPECT_EQ(e.source, 0);
    EXPECT_EQ(e.label, 0);
  }
  const auto c = expansion_correction(f);
  EXPECT_EQ(c.delta, 66);
  EXPECT_EQ(apply_corrections(official_ledger(), {c}).count(Split::train, 0, 0), 231);
}

TEST(ExpandFolder, SingleAndEmpty) {
  FolderManifest f{"one", Split::val, 3, 1, {"a"}};
  const auto e = expand_multi_sample_folder(f);
  ASSERT_EQ(e.size(), 1u);
  EXPECT_EQ(e[0].source, 3);
  EXPECT_EQ(e[0].label, 1);
  EXPECT_EQ(expansion_correction(f).delta, 0);
  f.subfolders.clear();
  EXPECT_THROW(expand_multi_sample_folder(f), Error);
}

TEST(PredictedTestDistribution, ExclusionGivesPublishedCounts) {
  std::vector<SourcePrediction> preds;
  const long raw[4] = {549, 314, 245, 380};
  int id = 0;
  for (int s = 0; s < 4; ++s)
    for (long i = 0; i < raw[s]; ++i) {
      SourcePrediction p;
      p.scan_id = "ct_scan_" + std::to_string(id++);
      p.predicted_source = s;
      preds.push_back(p);
    }
  ASSERT_EQ(preds.size(), 1488u);
  const auto counts = predicted_test_distribution(preds, {"ct_scan_492"});
  EXPECT_EQ(counts, (std::array<long, 4>{548, 314, 245, 380}));
  EXPECT_EQ(counts[0] + counts[1] + counts[2] + counts[3], 1487);
}

TEST(PredictedTestDistribution, TrivialAndDuplicates) {
  std::vector<SourcePrediction> preds(5);
  for (int i = 0; i < 5; ++i) preds[i].scan_id = "s" + std::to_string(i), preds[i].predicted_source = 1;
  EXPECT_EQ(predicted_test_distribution(preds), (std::array<long, 4>{0, 5, 0, 0}));
  preds.push_back(preds[0]);
  EXPECT_THROW(predicted_test_distribution(preds), Error);
}

TEST(ScaleLedger, TenPercentOfRevised) {
  const auto l = scale_ledger(revised_ledger(), 0.1);
  EXPECT_EQ(l.count(Split::train, 0, 1), 18);
  EXPECT_EQ(l.count(Split::train, 0, 0), 23);
  EXPECT_EQ(l.count(Split::train, 2, 1), 4);
  EXPECT_EQ(l.count(Split::val, 2, 1), 4);
  EXPECT_EQ(l.count(Split::val, 3, 1), 4);
  EXPECT_EQ(l.count(Split::val, 0, 0), 5);
  EXPECT_EQ(l.total(Split::train), 132);
  EXPECT_EQ(l.total(Split::test), 149);
  // Scan-specific corrections keep their unit delta.
  const auto& c = l.corrections();
  const auto sp = std::find_if(c.begin(), c.end(), [](auto& r) { return r.kind == CorrectionKind::source_prediction; });
  ASSERT_NE(sp, c.end());
  EXPECT_EQ(sp->delta, -1);
}
