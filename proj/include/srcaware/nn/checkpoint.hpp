#pragma once

// Checkpoint container:
//   bytes 0..7   magic "SACKPT01"
//   bytes 8..15  uint64 little-endian length L of the JSON header
//   L bytes      JSON header (UTF-8):
//                  { "stage", "variant_id", "config_hash" (hex string), "config", "metrics",
//                    "extra", "params": [ {"name", "group", "shape", "trainable"} ... ] }
//   then every parameter's values as float32 little-endian, in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "srcaware/error.hpp"
#include "srcaware/nn/params.hpp"

namespace srcaware::nn {

using json = nlohmann::json;

struct Checkpoint {
  std::string stage;
  std::string variant_id;
  std::uint64_t config_hash = 0;
  json config = json::object();
  json metrics = json::object();
  json extra = json::object();
  ParamStore<float> params;
};

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

inline constexpr char kCheckpointMagic[9] = "SACKPT01";

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  json header;
  header["stage"] = ck.stage;
  header["variant_id"] = ck.variant_id;
  header["config_hash"] = hex64(ck.config_hash);
  header["config"] = ck.config;
  header["metrics"] = ck.metrics;
  header["extra"] = ck.extra;
  header["params"] = json::array();
  for (const auto& p : ck.params)
    header["params"].push_back({{"name", p.name}, {"group", p.group}, {"shape", p.shape}, {"trainable", p.trainable}});
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, 8);
  unsigned char len[8];
  for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>((text.size() >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : ck.params)
    for (float v : p.value) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      unsigned char b[4];
      for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint not found: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw Error("not a checkpoint file: " + path.string());
  unsigned char len[8];
  in.read(reinterpret_cast<char*>(len), 8);
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(len[i]) << (8 * i);
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::uint64_t>(in.gcount()) != n) throw Error("truncated checkpoint header: " + path.string());
  const json header = json::parse(text);

  Checkpoint ck;
  ck.stage = header.at("stage").get<std::string>();
  ck.variant_id = header.at("variant_id").get<std::string>();
  ck.config_hash = parse_hex64(header.at("config_hash").get<std::string>());
  ck.config = header.at("config");
  ck.metrics = header.at("metrics");
  ck.extra = header.value("extra", json::object());
  for (const auto& p : header.at("params")) {
    const std::size_t i = ck.params.add(p.at("name"), p.at("group"), p.at("shape").get<std::vector<int>>());
    ck.params[i].trainable = p.at("trainable").get<bool>();
    for (auto& v : ck.params[i].value) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      if (in.gcount() != 4) throw Error("truncated checkpoint data: " + path.string());
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(b[k]) << (8 * k);
      v = std::bit_cast<float>(bits);
    }
  }
  return ck;
}

// Copies values from `src` into `dst` by name; shapes must agree. Trainability
// flags of `dst` are left untouched.
template <class T>
void load_values(ParamStore<T>& dst, const ParamStore<float>& src) {
  for (auto& p : dst) {
    const auto& s = src.by_name(p.name);
    require(s.shape == p.shape, "shape mismatch for parameter " + p.name);
    for (std::size_t i = 0; i < p.size(); ++i) p.value[i] = static_cast<T>(s.value[i]);
  }
}

}  // namespace srcaware::nn
