#pragma once

// Dataset manifest: one row per scan with header
//   scan_id,split,source,label,path,excluded
// source/label are "unknown" when not available; path is relative to the
// manifest's directory; excluded is 0/1.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "srcaware/csv.hpp"
#include "srcaware/error.hpp"

namespace srcaware {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error("unknown split '" + s + "'");
}

inline std::string optional_to_string(const std::optional<int>& v) {
  return v ? std::to_string(*v) : std::string("unknown");
}

inline std::optional<int> parse_optional_int(const std::string& s, int lo, int hi, const char* what) {
  if (s == "unknown" || s.empty()) return std::nullopt;
  int v = 0;
  try {
    std::size_t pos = 0;
    v = std::stoi(s, &pos);
    if (pos != s.size()) throw Error("");
  } catch (...) {
    throw Error(std::string("invalid ") + what + " '" + s + "'");
  }
  require(v >= lo && v <= hi, std::string(what) + " out of range: " + s);
  return v;
}

struct ScanEntry {
  std::string scan_id;
  Split split = Split::train;
  std::optional<int> source;
  std::optional<int> label;
  std::string path;
  bool excluded = false;
};

struct Manifest {
  std::vector<ScanEntry> entries;

  std::vector<const ScanEntry*> select(Split split, bool include_excluded = false) const {
    std::vector<const ScanEntry*> out;
    for (const auto& e : entries)
      if (e.split == split && (include_excluded || !e.excluded)) out.push_back(&e);
    return out;
  }
};

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  csv::Table t;
  t.header = {"scan_id", "split", "source", "label", "path", "excluded"};
  for (const auto& e : m.entries)
    t.rows.push_back({e.scan_id, to_string(e.split), optional_to_string(e.source), optional_to_string(e.label),
                      e.path, e.excluded ? "1" : "0"});
  csv::write(path, t);
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  const auto c_id = t.column("scan_id"), c_split = t.column("split"), c_src = t.column("source"),
             c_lab = t.column("label"), c_path = t.column("path"), c_ex = t.column("excluded");
  Manifest m;
  for (const auto& r : t.rows) {
    ScanEntry e;
    e.scan_id = r[c_id];
    e.split = parse_split(r[c_split]);
    e.source = parse_optional_int(r[c_src], 0, 3, "source");
    e.label = parse_optional_int(r[c_lab], 0, 1, "label");
    e.path = r[c_path];
    require(r[c_ex] == "0" || r[c_ex] == "1", "excluded flag must be 0 or 1");
    e.excluded = r[c_ex] == "1";
    m.entries.push_back(std::move(e));
  }
  return m;
}

}  // namespace srcaware
