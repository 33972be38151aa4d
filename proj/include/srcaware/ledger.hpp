#pragma once

// Per-(split, source, class) scan-count bookkeeping and the correction engine
// that turns the official split into the revised one.
//
// Corrections file (tab-separated, '#' starts a comment):
//   kind <TAB> target <TAB> delta <TAB> note
// kind   : multi_sample_expansion | exclusion | val_augmentation | source_prediction
// target : split/source/class[/identifier], source and class may be "unknown"

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/manifest.hpp"
#include "srcaware/predictions.hpp"

namespace srcaware {

struct LedgerCell {
  Split split = Split::train;
  std::optional<int> source;
  std::optional<int> label;

  auto key() const { return std::tuple(static_cast<int>(split), source.value_or(-1), label.value_or(-1)); }
  bool operator<(const LedgerCell& o) const { return key() < o.key(); }
  bool operator==(const LedgerCell& o) const { return key() == o.key(); }
};

inline std::string to_string(const LedgerCell& c) {
  return to_string(c.split) + "/" + optional_to_string(c.source) + "/" + optional_to_string(c.label);
}

enum class CorrectionKind { multi_sample_expansion, exclusion, val_augmentation, source_prediction };

inline std::string to_string(CorrectionKind k) {
  switch (k) {
    case CorrectionKind::multi_sample_expansion: return "multi_sample_expansion";
    case CorrectionKind::exclusion: return "exclusion";
    case CorrectionKind::val_augmentation: return "val_augmentation";
    case CorrectionKind::source_prediction: return "source_prediction";
  }
  return "?";
}

inline CorrectionKind parse_correction_kind(const std::string& s) {
  for (auto k : {CorrectionKind::multi_sample_expansion, CorrectionKind::exclusion, CorrectionKind::val_augmentation,
                 CorrectionKind::source_prediction})
    if (to_string(k) == s) return k;
  throw Error("unknown correction kind '" + s + "'");
}

struct CorrectionRecord {
  CorrectionKind kind = CorrectionKind::exclusion;
  std::string target;  // split/source/class[/identifier]
  long delta = 0;
  std::string note;

  LedgerCell cell() const;
  std::string identifier() const;
};

namespace detail {

inline std::vector<std::string> split_path(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == '/') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  return parts;
}

}  // namespace detail

inline LedgerCell CorrectionRecord::cell() const {
  const auto parts = detail::split_path(target);
  require(parts.size() >= 3, "correction target must be split/source/class[/identifier]: '" + target + "'");
  return LedgerCell{parse_split(parts[0]), parse_optional_int(parts[1], 0, 3, "source"),
                    parse_optional_int(parts[2], 0, 1, "class")};
}

inline std::string CorrectionRecord::identifier() const {
  const auto parts = detail::split_path(target);
  std::string id;
  for (std::size_t i = 3; i < parts.size(); ++i) id += (i > 3 ? "/" : "") + parts[i];
  return id;
}

class SplitLedger {
 public:
  long count(const LedgerCell& c) const {
    auto it = counts_.find(c);
    return it == counts_.end() ? 0 : it->second;
  }
  long count(Split s, std::optional<int> source, std::optional<int> label) const {
    return count(LedgerCell{s, source, label});
  }
  void set(const LedgerCell& c, long n) {
    require(n >= 0, "ledger count for " + to_string(c) + " would be negative");
    if (c.split == Split::test) require(!c.label, "test ledger entries carry class = unknown");
    counts_[c] = n;
  }

  // Sum over all cells of a split, optionally restricted to a class.
  long total(Split s, std::optional<std::optional<int>> label = std::nullopt) const {
    long t = 0;
    for (const auto& [c, n] : counts_)
      if (c.split == s && (!label || c.label == *label)) t += n;
    return t;
  }

  const std::map<LedgerCell, long>& counts() const { return counts_; }
  const std::vector<CorrectionRecord>& corrections() const { return corrections_; }
  std::vector<CorrectionRecord>& corrections() { return corrections_; }

  bool operator==(const SplitLedger& o) const { return counts_ == o.counts_; }

 private:
  std::map<LedgerCell, long> counts_;
  std::vector<CorrectionRecord> corrections_;
};

// The challenge's published split.
inline SplitLedger official_ledger() {
  SplitLedger l;
  const std::array<long, 4> train_covid{175, 175, 39, 175}, train_non{165, 165, 165, 165};
  const std::array<long, 4> val_covid{43, 43, 0, 42}, val_non{45, 45, 45, 45};
  for (int s = 0; s < 4; ++s) {
    l.set({Split::train, s, 1}, train_covid[s]);
    l.set({Split::train, s, 0}, train_non[s]);
    l.set({Split::val, s, 1}, val_covid[s]);
    l.set({Split::val, s, 0}, val_non[s]);
  }
  l.set({Split::test, std::nullopt, std::nullopt}, 1488);
  return l;
}

// The bookkeeping corrections applied to the published split.
inline std::vector<CorrectionRecord> paper_corrections() {
  return {
      {CorrectionKind::val_augmentation, "val/2/1/source2_train_positives", 39,
       "source-2 validation has no COVID scans; the 39 source-2 COVID training scans join validation analysis"},
      {CorrectionKind::multi_sample_expansion, "train/0/0/ct_scan_8", 66,
       "ct_scan_8 holds 67 sample folders; the single entry becomes 67 (net +66, inferred from 165 -> 231)"},
      {CorrectionKind::exclusion, "train/0/0/ct_scan_0", -1, "ct_scan_0 confirmed absent"},
      {CorrectionKind::source_prediction, "test/unknown/unknown/ct_scan_492", -1,
       "ct_scan_492 contains multiple samples and is ambiguous; discarded from the test set"},
  };
}

// Applies every correction to `ledger`. Counts are checked after all deltas
// are summed, so corrections commute.
inline SplitLedger apply_corrections(const SplitLedger& ledger, const std::vector<CorrectionRecord>& corrections) {
  std::map<LedgerCell, long> next = ledger.counts();
  for (const auto& c : corrections) {
    const LedgerCell cell = c.cell();
    if (c.kind == CorrectionKind::val_augmentation) require(cell.split == Split::val, "val_augmentation must target val");
    if (c.kind == CorrectionKind::source_prediction) require(cell.split == Split::test, "source_prediction must target test");
    next[cell] += c.delta;
  }
  SplitLedger out;
  for (const auto& [cell, n] : next) {
    if (n < 0) throw Error("correction would make " + to_string(cell) + " negative (" + std::to_string(n) + ")");
    out.set(cell, n);
  }
  out.corrections() = ledger.corrections();
  out.corrections().insert(out.corrections().end(), corrections.begin(), corrections.end());
  return out;
}

inline SplitLedger revised_ledger() { return apply_corrections(official_ledger(), paper_corrections()); }

// Multiplies every cell by `factor`, rounding half away from zero. Exclusions
// and source_prediction records name individual scans and keep their delta.
inline SplitLedger scale_ledger(const SplitLedger& ledger, double factor) {
  require(factor >= 0.0, "scale factor must be nonnegative");
  SplitLedger out;
  for (const auto& [cell, n] : ledger.counts()) out.set(cell, std::lround(n * factor));
  for (auto c : ledger.corrections()) {
    if (c.kind != CorrectionKind::exclusion && c.kind != CorrectionKind::source_prediction)
      c.delta = std::lround(c.delta * factor);
    out.corrections().push_back(c);
  }
  return out;
}

// --- corrections file -------------------------------------------------------

inline std::vector<CorrectionRecord> read_corrections(std::istream& in, const std::string& origin = "corrections") {
  std::vector<CorrectionRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) f.push_back(field);
    if (f.size() != 4) throw Error(origin + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
    CorrectionRecord r;
    r.kind = parse_correction_kind(f[0]);
    r.target = f[1];
    try {
      r.delta = std::stol(f[2]);
    } catch (...) {
      throw Error(origin + ":" + std::to_string(lineno) + ": invalid delta '" + f[2] + "'");
    }
    r.note = f[3];
    (void)r.cell();  // validates the target
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<CorrectionRecord> read_corrections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corrections file: " + path.string());
  return read_corrections(in, path.string());
}

inline void write_corrections(std::ostream& out, const std::vector<CorrectionRecord>& records) {
  out << "# srcaware corrections v1\n# kind\ttarget\tdelta\tnote\n";
  for (const auto& r : records) out << to_string(r.kind) << '\t' << r.target << '\t' << r.delta << '\t' << r.note << '\n';
}

inline void write_corrections(const std::filesystem::path& path, const std::vector<CorrectionRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  write_corrections(out, records);
}

// --- folder expansion and test-source distribution --------------------------

struct FolderManifest {
  std::string folder_id;
  Split split = Split::train;
  std::optional<int> source;
  std::optional<int> label;
  std::vector<std::string> subfolders;
};

// One scan entry per subfolder, each inheriting the parent's split, source and class.
inline std::vector<ScanEntry> expand_multi_sample_folder(const FolderManifest& folder) {
  require(!folder.subfolders.empty(), "folder " + folder.folder_id + " has no subfolders");
  std::vector<ScanEntry> out;
  out.reserve(folder.subfolders.size());
  for (const auto& sub : folder.subfolders)
    out.push_back(ScanEntry{folder.folder_id + "/" + sub, folder.split, folder.source, folder.label,
                            folder.folder_id + "/" + sub, false});
  return out;
}

// The ledger correction implied by expanding `folder` in place of its single entry.
inline CorrectionRecord expansion_correction(const FolderManifest& folder) {
  require(!folder.subfolders.empty(), "folder " + folder.folder_id + " has no subfolders");
  return CorrectionRecord{CorrectionKind::multi_sample_expansion,
                          to_string(folder.split) + "/" + optional_to_string(folder.source) + "/" +
                              optional_to_string(folder.label) + "/" + folder.folder_id,
                          static_cast<long>(folder.subfolders.size()) - 1,
                          folder.folder_id + " expands to " + std::to_string(folder.subfolders.size()) + " samples"};
}

// Per-source counts of predicted test sources after dropping `exclusions`.
inline std::array<long, 4> predicted_test_distribution(const std::vector<SourcePrediction>& predictions,
                                                       const std::set<std::string>& exclusions = {}) {
  std::set<std::string> seen;
  std::array<long, 4> counts{};
  for (const auto& p : predictions) {
    require(seen.insert(p.scan_id).second, "duplicate scan id in source predictions: " + p.scan_id);
    require(p.predicted_source >= 0 && p.predicted_source <= 3, "predicted source out of range for " + p.scan_id);
    if (exclusions.count(p.scan_id)) continue;
    counts[static_cast<std::size_t>(p.predicted_source)]++;
  }
  return counts;
}

// Counts of a manifest per ledger cell. Test rows are counted with class
// unknown; excluded rows are skipped.
inline SplitLedger ledger_from_manifest(const Manifest& m) {
  std::map<LedgerCell, long> counts;
  for (const auto& e : m.entries) {
    if (e.excluded) continue;
    LedgerCell c{e.split, e.source, e.split == Split::test ? std::nullopt : e.label};
    if (e.split == Split::test) c.source = std::nullopt;
    counts[c]++;
  }
  SplitLedger l;
  for (const auto& [c, n] : counts) l.set(c, n);
  return l;
}

inline std::string format_ledger(const SplitLedger& l) {
  std::ostringstream os;
  os << "Split  Class      S0    S1    S2    S3    Total\n";
  for (Split s : {Split::train, Split::val}) {
    for (int label : {1, 0}) {
      os << (s == Split::train ? "Train  " : "Val    ") << (label ? "COVID     " : "Non-COVID ");
      long tot = 0;
      for (int src = 0; src < 4; ++src) {
        const long n = l.count(s, src, label);
        tot += n;
        os << std::string(6 - std::min<std::size_t>(6, std::to_string(n).size()), ' ') << n;
      }
      os << std::string(9 - std::min<std::size_t>(9, std::to_string(tot).size()), ' ') << tot << '\n';
    }
  }
  os << "Test   --         --    --    --    --   " << std::string(6 - std::min<std::size_t>(6, std::to_string(l.total(Split::test)).size()), ' ')
     << l.total(Split::test) << '\n';
  return os.str();
}

}  // namespace srcaware
