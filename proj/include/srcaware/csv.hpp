#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "srcaware/error.hpp"

namespace srcaware::csv {

// Minimal comma-separated reader/writer. Fields never contain commas,
// quotes or newlines in any file this library produces.

using Row = std::vector<std::string>;

inline Row split(const std::string& line, char sep = ',') {
  Row out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

struct Table {
  Row header;
  std::vector<Row> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw Error("missing column '" + name + "'");
  }
};

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  Table t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    Row r = split(line);
    if (first) {
      t.header = std::move(r);
      first = false;
      continue;
    }
    if (r.size() != t.header.size())
      throw Error(path.string() + ": row has " + std::to_string(r.size()) + " fields, header has " +
                  std::to_string(t.header.size()));
    t.rows.push_back(std::move(r));
  }
  if (first) throw Error(path.string() + ": missing header row");
  return t;
}

inline void write(const std::filesystem::path& path, const Table& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  auto emit = [&](const Row& r) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  };
  emit(t.header);
  for (const auto& r : t.rows) emit(r);
  if (!out) throw Error("failed writing " + path.string());
}

// Fixed-precision formatting so files compare byte-for-byte across runs.
inline std::string fmt(double v, int digits = 8) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace srcaware::csv
