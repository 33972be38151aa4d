#pragma once

// Synthetic four-source volumetric dataset. Each source has its own slice-count
// range, intensity offset, noise level, anatomy scale and background style; COVID
// scans carry bright blobs inside the two lung ellipsoids.

#include <algorithm>
#include <cstdio>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/ledger.hpp"
#include "srcaware/manifest.hpp"
#include "srcaware/rng.hpp"
#include "srcaware/volume.hpp"
#include "srcaware/volume_io.hpp"

namespace srcaware {

enum class BackgroundStyle { dark_border, bright_ring, plain, textured };

inline std::string to_string(BackgroundStyle b) {
  switch (b) {
    case BackgroundStyle::dark_border: return "dark-border";
    case BackgroundStyle::bright_ring: return "bright-ring";
    case BackgroundStyle::plain: return "plain";
    case BackgroundStyle::textured: return "textured";
  }
  return "?";
}

struct SourceProfile {
  int source_id = 0;
  double intensity_bias = 0.0;
  double noise_sigma = 0.03;
  std::pair<int, int> slice_count_range{60, 120};
  double field_of_view_scale = 1.0;
  BackgroundStyle background_style = BackgroundStyle::plain;
  int in_plane = 64;  // rows = cols
};

struct LesionSpec {
  std::pair<int, int> count_range{2, 4};
  std::pair<double, double> radius_range{4.0, 6.5};  // voxels
  double intensity_delta = 0.3;
};

inline void validate_profile(const SourceProfile& p) {
  require(p.source_id >= 0 && p.source_id <= 3, "profile source_id must be 0..3");
  require(p.slice_count_range.first >= 8 && p.slice_count_range.first <= p.slice_count_range.second,
          "slice_count_range must satisfy 8 <= min <= max");
  require(p.noise_sigma >= 0.0, "noise_sigma must be >= 0");
  require(p.in_plane >= 16, "in_plane must be >= 16");
  require(p.field_of_view_scale > 0.0, "field_of_view_scale must be positive");
}

inline void validate_lesions(const LesionSpec& l) {
  require(l.count_range.first >= 1 && l.count_range.first <= l.count_range.second,
          "lesion count_range must satisfy 1 <= min <= max");
  require(l.radius_range.first > 0.0 && l.radius_range.first <= l.radius_range.second, "lesion radii must be positive");
}

// Slice-count ranges straddle the 150-slice trimming threshold; every source
// has a distinct background so lung extraction changes the input.
inline std::array<SourceProfile, 4> default_profiles() {
  return {{
      {0, 0.00, 0.02, {40, 100}, 1.00, BackgroundStyle::dark_border, 64},
      {1, 0.15, 0.04, {160, 240}, 1.10, BackgroundStyle::bright_ring, 64},
      {2, -0.10, 0.05, {110, 190}, 0.90, BackgroundStyle::plain, 64},
      {3, 0.30, 0.03, {60, 140}, 1.00, BackgroundStyle::textured, 64},
  }};
}

// Source 0 gets the strongest lesion contrast.
inline std::array<LesionSpec, 4> default_lesion_specs() {
  return {{
      {{2, 4}, {4.5, 7.0}, 0.45},
      {{2, 4}, {4.0, 6.5}, 0.30},
      {{2, 4}, {4.0, 6.5}, 0.30},
      {{2, 4}, {4.0, 6.5}, 0.30},
  }};
}

struct Ellipsoid {
  double cs = 0, cr = 0, cc = 0;  // centre (slice, row, col)
  double as = 1, ar = 1, ac = 1;  // semi-axes

  double norm2(double s, double r, double c) const {
    const double ds = (s - cs) / as, dr = (r - cr) / ar, dc = (c - cc) / ac;
    return ds * ds + dr * dr + dc * dc;
  }
  bool contains(double s, double r, double c) const { return norm2(s, r, c) <= 1.0; }
};

struct Blob {
  double cs = 0, cr = 0, cc = 0;
  double radius = 1;        // in-plane, voxels
  double radius_depth = 1;  // along the slice axis
  int lung = 0;  // index of the containing lung
};

struct GeneratedScan {
  ScanVolume scan;
  std::array<Ellipsoid, 2> lungs;
  std::vector<Blob> lesions;  // placement log
};

namespace synth_levels {
inline constexpr double kLung = 0.65;
inline constexpr double kBodyTissue = 0.2;
inline constexpr double kRing = 0.9;
inline constexpr double kPlain = 0.15;
}  // namespace synth_levels

// Lesion profile: full delta inside 0.7 r, linear falloff to zero at r.
inline double lesion_weight(double dist, double radius) {
  if (dist >= radius) return 0.0;
  const double core = 0.7 * radius;
  return dist <= core ? 1.0 : (radius - dist) / (radius - core);
}

inline GeneratedScan generate_scan(const SourceProfile& profile, int label, const LesionSpec& lesions, Rng& rng,
                                   std::string scan_id = {}) {
  validate_profile(profile);
  require(label == 0 || label == 1, "label must be 0 or 1");
  if (label == 1) validate_lesions(lesions);
  const int S = rng.uniform_int(profile.slice_count_range.first, profile.slice_count_range.second);
  const int N = profile.in_plane;
  const double fov = profile.field_of_view_scale;

  GeneratedScan g;
  const double mid = (N - 1) / 2.0;
  for (int k = 0; k < 2; ++k) {
    const double side = k == 0 ? -1.0 : 1.0;
    g.lungs[static_cast<std::size_t>(k)] =
        Ellipsoid{(S - 1) / 2.0 + rng.uniform(-0.02, 0.02) * S, mid + rng.uniform(-1.0, 1.0),
                  mid + side * 0.2 * N * fov, 0.42 * S, 0.26 * N * fov * rng.uniform(0.95, 1.05),
                  0.16 * N * fov * rng.uniform(0.95, 1.05)};
  }

  if (label == 1) {
    const int count = rng.uniform_int(lesions.count_range.first, lesions.count_range.second);
    for (int i = 0; i < count; ++i) {
      const int lung = rng.uniform_int(0, 1);
      const Ellipsoid& e = g.lungs[static_cast<std::size_t>(lung)];
      Blob b;
      b.lung = lung;
      b.radius = rng.uniform(lesions.radius_range.first, lesions.radius_range.second);
      // Thinner slices for longer scans: the depth extent scales with the slice count.
      b.radius_depth = b.radius * std::max(1.0, S / 32.0);
      // Centre in the middle depth band (survives trimming) and well inside the lung.
      for (int attempt = 0;; ++attempt) {
        b.cs = rng.uniform(0.3 * (S - 1), 0.7 * (S - 1));
        b.cr = rng.uniform(e.cr - e.ar, e.cr + e.ar);
        b.cc = rng.uniform(e.cc - e.ac, e.cc + e.ac);
        if (e.norm2(b.cs, b.cr, b.cc) <= 0.5 || attempt > 1000) break;
      }
      g.lesions.push_back(b);
    }
  }

  const double tex_phase = rng.uniform(0.0, 6.283185307179586);
  VolumeF v(Shape3{S, N, N});
  const double body_ar = 0.46 * N, body_ac = 0.44 * N, ring_r = 0.47 * N;
  for (int s = 0; s < S; ++s)
    for (int r = 0; r < N; ++r)
      for (int c = 0; c < N; ++c) {
        double val = 0.0;
        const double dr = r - mid, dc = c - mid;
        switch (profile.background_style) {
          case BackgroundStyle::dark_border:
            val = (dr * dr) / (body_ar * body_ar) + (dc * dc) / (body_ac * body_ac) <= 1.0 ? synth_levels::kBodyTissue
                                                                                          : 0.0;
            break;
          case BackgroundStyle::bright_ring: {
            const double rad = std::sqrt(dr * dr + dc * dc);
            val = std::abs(rad - ring_r) < 0.5 ? synth_levels::kRing : (rad < ring_r ? 0.05 : 0.0);
            break;
          }
          case BackgroundStyle::plain: val = synth_levels::kPlain; break;
          case BackgroundStyle::textured:
            val = 0.2 + 0.12 * std::sin(0.55 * r + tex_phase) * std::cos(0.45 * c + 0.1 * s);
            break;
        }
        for (int k = 0; k < 2; ++k)
          if (g.lungs[static_cast<std::size_t>(k)].contains(s, r, c)) {
            val = synth_levels::kLung;
            for (const auto& b : g.lesions) {
              if (b.lung != k) continue;
              const double ds = (s - b.cs) * b.radius / b.radius_depth;
              const double d = std::sqrt(ds * ds + (r - b.cr) * (r - b.cr) + (c - b.cc) * (c - b.cc));
              val += lesions.intensity_delta * lesion_weight(d, b.radius);
            }
          }
        v(s, r, c) = static_cast<float>(val + profile.intensity_bias + rng.normal(0.0, profile.noise_sigma));
      }

  g.scan.voxels = std::move(v);
  g.scan.scan_id = std::move(scan_id);
  g.scan.source = profile.source_id;
  g.scan.label = label;
  return g;
}

// ---------------------------------------------------------------------------
// Dataset planning and generation

struct SynthOptions {
  std::array<SourceProfile, 4> profiles = default_profiles();
  std::array<LesionSpec, 4> lesions = default_lesion_specs();
  // Proportions for distributing the unlabeled test split over true sources.
  std::array<double, 4> test_source_weights{548, 314, 245, 380};
  double test_positive_fraction = 0.5;
};

struct PlannedScan {
  ScanEntry entry;
  int true_source = 0;
  int true_label = 0;
  bool borrowed = false;  // validation row reusing a training volume
};

struct DatasetPlan {
  std::vector<PlannedScan> scans;

  Manifest manifest() const {
    Manifest m;
    for (const auto& p : scans) m.entries.push_back(p.entry);
    return m;
  }
};

// Largest-remainder allocation of `n` over `weights`.
inline std::array<long, 4> allocate(long n, const std::array<double, 4>& weights) {
  double total = 0;
  for (double w : weights) total += w;
  require(total > 0, "allocation weights must not all be zero");
  std::array<long, 4> out{};
  std::array<std::pair<double, int>, 4> rem{};
  long used = 0;
  for (int i = 0; i < 4; ++i) {
    const double q = n * weights[static_cast<std::size_t>(i)] / total;
    out[static_cast<std::size_t>(i)] = static_cast<long>(std::floor(q));
    used += out[static_cast<std::size_t>(i)];
    rem[static_cast<std::size_t>(i)] = {q - std::floor(q), i};
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (long k = 0; k < n - used; ++k) out[static_cast<std::size_t>(rem[static_cast<std::size_t>(k % 4)].second)]++;
  return out;
}

inline std::string scan_name(Split split, int source, int label, long idx) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_s%d_%s_%04ld", to_string(split).c_str(), source, label ? "covid" : "noncovid", idx);
  return buf;
}

// Lays out one manifest row per ledger scan. val_augmentation corrections are
// realised by validation rows that reuse training volumes of the same
// source/class; source_prediction corrections with negative delta add that many
// excluded test scans.
inline DatasetPlan plan_dataset(const SplitLedger& ledger, std::uint64_t master_seed, const SynthOptions& opt = {}) {
  DatasetPlan plan;
  std::map<std::pair<int, int>, long> borrow;  // (source, label) -> validation rows reused from train
  long excluded_test = 0;
  for (const auto& c : ledger.corrections()) {
    if (c.kind == CorrectionKind::val_augmentation) {
      const LedgerCell cell = c.cell();
      require(cell.source && cell.label, "val_augmentation target needs a source and class");
      borrow[{*cell.source, *cell.label}] += std::max(0L, c.delta);
    }
    if (c.kind == CorrectionKind::source_prediction && c.delta < 0) excluded_test += -c.delta;
  }

  std::map<std::pair<int, int>, std::vector<std::string>> train_ids;
  for (Split split : {Split::train, Split::val})
    for (int source = 0; source < 4; ++source)
      for (int label : {1, 0}) {
        const long n = ledger.count(split, source, label);
        long reuse = 0;
        if (split == Split::val) {
          auto it = borrow.find({source, label});
          if (it != borrow.end()) reuse = std::min({it->second, n, static_cast<long>(train_ids[{source, label}].size())});
        }
        for (long i = 0; i < n - reuse; ++i) {
          PlannedScan p;
          p.entry.scan_id = scan_name(split, source, label, i);
          p.entry.split = split;
          p.entry.source = source;
          p.entry.label = label;
          p.entry.path = "volumes/" + p.entry.scan_id + ".ctv";
          p.true_source = source;
          p.true_label = label;
          if (split == Split::train) train_ids[{source, label}].push_back(p.entry.scan_id);
          plan.scans.push_back(std::move(p));
        }
        for (long i = 0; i < reuse; ++i) {
          const std::string& src_id = train_ids[{source, label}][static_cast<std::size_t>(i)];
          PlannedScan p;
          p.entry.scan_id = "valaug_" + src_id;
          p.entry.split = Split::val;
          p.entry.source = source;
          p.entry.label = label;
          p.entry.path = "volumes/" + src_id + ".ctv";
          p.true_source = source;
          p.true_label = label;
          p.borrowed = true;
          plan.scans.push_back(std::move(p));
        }
      }

  const long n_test = ledger.total(Split::test);
  const auto per_source = allocate(n_test, opt.test_source_weights);
  Rng label_rng(master_seed, "synth/test_labels");
  long idx = 0;
  for (int source = 0; source < 4; ++source)
    for (long i = 0; i < per_source[static_cast<std::size_t>(source)]; ++i) {
      PlannedScan p;
      char buf[32];
      std::snprintf(buf, sizeof buf, "test_%04ld", idx++);
      p.entry.scan_id = buf;
      p.entry.split = Split::test;
      p.entry.path = std::string("volumes/") + buf + ".ctv";
      p.true_source = source;
      p.true_label = label_rng.uniform() < opt.test_positive_fraction ? 1 : 0;
      plan.scans.push_back(std::move(p));
    }
  for (long i = 0; i < excluded_test; ++i) {
    PlannedScan p;
    char buf[40];
    std::snprintf(buf, sizeof buf, "test_ambiguous_%04ld", i);
    p.entry.scan_id = buf;
    p.entry.split = Split::test;
    p.entry.path = std::string("volumes/") + buf + ".ctv";
    p.entry.excluded = true;
    p.true_source = 0;
    p.true_label = label_rng.uniform() < opt.test_positive_fraction ? 1 : 0;
    plan.scans.push_back(std::move(p));
  }
  // Test rows are written in a scan-id order that does not reveal the source.
  std::stable_sort(plan.scans.begin(), plan.scans.end(), [](const PlannedScan& a, const PlannedScan& b) {
    if (a.entry.split != b.entry.split) return a.entry.split < b.entry.split;
    if (a.entry.split != Split::test) return false;
    return derive_seed(0, a.entry.scan_id) < derive_seed(0, b.entry.scan_id);
  });
  return plan;
}

// Writes volumes, the manifest and the hidden test truth (test_labels.csv) under `root`.
inline Manifest generate_dataset(const SplitLedger& ledger, std::uint64_t master_seed, const std::filesystem::path& root,
                                 const SynthOptions& opt = {}) {
  for (const auto& p : opt.profiles) validate_profile(p);
  DatasetPlan plan = plan_dataset(ledger, master_seed, opt);
  std::filesystem::create_directories(root / "volumes");
  csv::Table truth;
  truth.header = {"scan_id", "source", "label"};
  for (const auto& p : plan.scans) {
    if (p.entry.split == Split::test)
      truth.rows.push_back({p.entry.scan_id, std::to_string(p.true_source), std::to_string(p.true_label)});
    if (p.borrowed) continue;
    Rng rng(master_seed, "synth/scan/" + p.entry.scan_id);
    const auto src = static_cast<std::size_t>(p.true_source);
    GeneratedScan g = generate_scan(opt.profiles[src], p.true_label, opt.lesions[src], rng, p.entry.scan_id);
    write_volume(root / p.entry.path, g.scan.voxels);
  }
  Manifest m = plan.manifest();
  write_manifest(root / "manifest.csv", m);
  csv::write(root / "test_labels.csv", truth);
  return m;
}

}  // namespace srcaware
