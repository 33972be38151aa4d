#pragma once

// Deterministic scan preprocessing: slice trimming, thresholded lung/body
// extraction, canonical resampling for the 3D and 2D branches, and
// scan-consistent augmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/rng.hpp"
#include "srcaware/volume.hpp"

namespace srcaware {

// ---------------------------------------------------------------------------
// Slice trimming

// Number of slices removed from each end for a scan with `slices` slices.
inline int trim_count(int slices, int slice_threshold = 150, double trim_fraction = 0.15) {
  require(trim_fraction >= 0.0 && trim_fraction < 0.5, "trim_fraction must be in [0, 0.5)");
  if (slices <= slice_threshold) return 0;
  return static_cast<int>(std::floor(trim_fraction * slices));
}

// Drops floor(trim_fraction * S) slices from both ends when S exceeds
// slice_threshold; otherwise returns the scan unchanged.
inline ScanVolume trim_slices(const ScanVolume& scan, int slice_threshold = 150, double trim_fraction = 0.15) {
  validate_scan(scan);
  const int s = scan.voxels.slices();
  const int cut = trim_count(s, slice_threshold, trim_fraction);
  const int keep = s - 2 * cut;
  require(keep >= 1, "trimming scan " + scan.scan_id + " would leave no slices");
  if (cut == 0) return scan;

  ScanVolume out = scan;
  Shape3 shape = scan.voxels.shape();
  shape.slices = keep;
  const auto begin = scan.voxels.data().begin() + static_cast<std::ptrdiff_t>(cut * scan.voxels.slice_size());
  out.voxels = VolumeF(shape, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(shape.size())));
  return out;
}

// ---------------------------------------------------------------------------
// Lung / body region extraction

// Otsu threshold over a `bins`-bin histogram spanning [min, max]. Foreground
// is defined as voxels strictly greater than the returned value. A constant
// volume returns its value, so it has no foreground.
inline float otsu_threshold(const VolumeF& v, int bins = 256) {
  require(v.size() > 0, "otsu_threshold on empty volume");
  const auto [mn_it, mx_it] = std::minmax_element(v.data().begin(), v.data().end());
  const double lo = *mn_it, hi = *mx_it;
  if (!(hi > lo)) return static_cast<float>(lo);

  std::vector<std::uint64_t> hist(static_cast<std::size_t>(bins), 0);
  const double scale = bins / (hi - lo);
  for (float x : v.data()) {
    int b = static_cast<int>((x - lo) * scale);
    hist[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))]++;
  }
  const double total = static_cast<double>(v.size());
  double sum_all = 0.0;
  for (int b = 0; b < bins; ++b) sum_all += b * static_cast<double>(hist[b]);

  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0;
  for (int b = 0; b < bins - 1; ++b) {
    w0 += static_cast<double>(hist[b]);
    sum0 += b * static_cast<double>(hist[b]);
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  // Upper edge of the last background bin.
  return static_cast<float>(lo + (best_bin + 1) / scale);
}

struct Box3 {
  int slice0 = 0, row0 = 0, col0 = 0;
  int slices = 0, rows = 0, cols = 0;
  bool operator==(const Box3&) const = default;
};

struct LungExtractConfig {
  std::optional<float> threshold;  // Otsu when unset
  int keep_components = 2;
};

struct LungExtraction {
  ScanVolume scan;
  float threshold = 0.0f;
  std::optional<Box3> bbox;  // in input coordinates; empty when no foreground was found
  std::size_t kept_voxels = 0;
};

inline constexpr std::string_view kNoForegroundWarning = "extract_lung: no foreground region found";

// Labels 6-connected components of `mask`. Returns the label volume (0 =
// background, components numbered from 1 in scan order) and the voxel count of
// each component (index 0 unused).
inline std::pair<std::vector<std::int32_t>, std::vector<std::size_t>> label_components(
    const std::vector<std::uint8_t>& mask, Shape3 shape) {
  std::vector<std::int32_t> labels(mask.size(), 0);
  std::vector<std::size_t> sizes{0};
  std::vector<std::size_t> stack;
  const std::size_t plane = static_cast<std::size_t>(shape.rows) * shape.cols;
  for (std::size_t seed = 0; seed < mask.size(); ++seed) {
    if (!mask[seed] || labels[seed] != 0) continue;
    const auto id = static_cast<std::int32_t>(sizes.size());
    sizes.push_back(0);
    labels[seed] = id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      sizes.back()++;
      const int s = static_cast<int>(i / plane);
      const int r = static_cast<int>((i % plane) / shape.cols);
      const int c = static_cast<int>(i % shape.cols);
      auto visit = [&](std::size_t j) {
        if (mask[j] && labels[j] == 0) {
          labels[j] = id;
          stack.push_back(j);
        }
      };
      if (s > 0) visit(i - plane);
      if (s + 1 < shape.slices) visit(i + plane);
      if (r > 0) visit(i - shape.cols);
      if (r + 1 < shape.rows) visit(i + shape.cols);
      if (c > 0) visit(i - 1);
      if (c + 1 < shape.cols) visit(i + 1);
    }
  }
  return {std::move(labels), std::move(sizes)};
}

// Thresholds the scan, keeps the largest connected components above the
// threshold, zeroes everything else and crops to their union bounding box.
inline LungExtraction extract_lung_detailed(const ScanVolume& scan, const LungExtractConfig& cfg = {}) {
  validate_scan(scan);
  require(cfg.keep_components >= 1, "keep_components must be >= 1");
  const VolumeF& v = scan.voxels;
  LungExtraction out;
  out.threshold = cfg.threshold ? *cfg.threshold : otsu_threshold(v);

  std::vector<std::uint8_t> mask(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) mask[i] = v.data()[i] > out.threshold ? 1 : 0;
  auto [labels, sizes] = label_components(mask, v.shape());

  if (sizes.size() <= 1) {
    out.scan = scan;
    out.scan.warnings.emplace_back(kNoForegroundWarning);
    return out;
  }

  // Largest first; equal sizes keep scan order.
  std::vector<std::int32_t> order(sizes.size() - 1);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int32_t>(i + 1);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sizes[a] > sizes[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg.keep_components)));
  std::vector<std::uint8_t> keep(sizes.size(), 0);
  for (auto id : order) keep[static_cast<std::size_t>(id)] = 1;

  int s0 = v.slices(), r0 = v.rows(), c0 = v.cols(), s1 = -1, r1 = -1, c1 = -1;
  for (int s = 0; s < v.slices(); ++s)
    for (int r = 0; r < v.rows(); ++r)
      for (int c = 0; c < v.cols(); ++c) {
        if (!keep[static_cast<std::size_t>(labels[v.index(s, r, c)])]) continue;
        s0 = std::min(s0, s), s1 = std::max(s1, s);
        r0 = std::min(r0, r), r1 = std::max(r1, r);
        c0 = std::min(c0, c), c1 = std::max(c1, c);
      }
  const Box3 box{s0, r0, c0, s1 - s0 + 1, r1 - r0 + 1, c1 - c0 + 1};
  out.bbox = box;

  VolumeF cropped(Shape3{box.slices, box.rows, box.cols}, 0.0f);
  for (int s = 0; s < box.slices; ++s)
    for (int r = 0; r < box.rows; ++r)
      for (int c = 0; c < box.cols; ++c) {
        const std::size_t i = v.index(s + s0, r + r0, c + c0);
        if (keep[static_cast<std::size_t>(labels[i])]) {
          cropped(s, r, c) = v.data()[i];
          out.kept_voxels++;
        }
      }
  out.scan = scan;
  out.scan.voxels = std::move(cropped);
  return out;
}

inline ScanVolume extract_lung(const ScanVolume& scan, const LungExtractConfig& cfg = {}) {
  return extract_lung_detailed(scan, cfg).scan;
}

// ---------------------------------------------------------------------------
// Resampling and normalization

namespace detail {

struct LinearTap {
  int i0 = 0, i1 = 0;
  float w = 0.0f;  // weight of i1
};

// Half-pixel-centred linear taps from `in` samples to `out` samples with edge clamping.
inline std::vector<LinearTap> linear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
    int i0 = static_cast<int>(std::floor(src));
    int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(src - i0)};
  }
  return taps;
}

}  // namespace detail

// Separable trilinear resampling with edge clamping.
inline VolumeF resample_trilinear(const VolumeF& in, Shape3 target) {
  require(in.size() > 0, "cannot resample an empty volume");
  require(target.slices > 0 && target.rows > 0 && target.cols > 0, "resample target must be positive");
  const Shape3 src = in.shape();

  // slices
  VolumeF a(Shape3{target.slices, src.rows, src.cols});
  {
    const auto taps = detail::linear_taps(src.slices, target.slices);
    const std::size_t plane = in.slice_size();
    for (int s = 0; s < target.slices; ++s) {
      const auto& t = taps[static_cast<std::size_t>(s)];
      const float* p0 = in.data().data() + t.i0 * plane;
      const float* p1 = in.data().data() + t.i1 * plane;
      float* dst = a.data().data() + s * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = p0[i] + t.w * (p1[i] - p0[i]);
    }
  }
  // rows
  VolumeF b(Shape3{target.slices, target.rows, src.cols});
  {
    const auto taps = detail::linear_taps(src.rows, target.rows);
    for (int s = 0; s < target.slices; ++s)
      for (int r = 0; r < target.rows; ++r) {
        const auto& t = taps[static_cast<std::size_t>(r)];
        const float* p0 = &a(s, t.i0, 0);
        const float* p1 = &a(s, t.i1, 0);
        float* dst = &b(s, r, 0);
        for (int c = 0; c < src.cols; ++c) dst[c] = p0[c] + t.w * (p1[c] - p0[c]);
      }
  }
  // cols
  VolumeF out(target);
  {
    const auto taps = detail::linear_taps(src.cols, target.cols);
    for (int s = 0; s < target.slices; ++s)
      for (int r = 0; r < target.rows; ++r) {
        const float* row = &b(s, r, 0);
        float* dst = &out(s, r, 0);
        for (int c = 0; c < target.cols; ++c) {
          const auto& t = taps[static_cast<std::size_t>(c)];
          dst[c] = row[t.i0] + t.w * (row[t.i1] - row[t.i0]);
        }
      }
  }
  return out;
}

// Min-max to [0,1] in place; a constant volume becomes all zeros.
inline void minmax_normalize(VolumeF& v) {
  if (v.size() == 0) return;
  const auto [mn_it, mx_it] = std::minmax_element(v.data().begin(), v.data().end());
  const double lo = *mn_it, hi = *mx_it;
  if (!(hi > lo)) {
    std::fill(v.data().begin(), v.data().end(), 0.0f);
    return;
  }
  const double inv = 1.0 / (hi - lo);
  for (float& x : v.data()) x = std::clamp(static_cast<float>((x - lo) * inv), 0.0f, 1.0f);
}

inline VolumeF canonicalize(const ScanVolume& scan, Shape3 target) {
  require(scan.voxels.all_finite(), "scan " + scan.scan_id + " contains NaN/Inf intensities");
  validate_scan(scan);
  VolumeF v = scan.voxels.shape() == target ? scan.voxels : resample_trilinear(scan.voxels, target);
  minmax_normalize(v);
  return v;
}

inline CanonicalVolume3D canonicalize_3d(const ScanVolume& scan) {
  return CanonicalVolume3D(canonicalize(scan, kCanonical3DShape));
}

inline SliceStack2D canonicalize_2d(const ScanVolume& scan) {
  return SliceStack2D(canonicalize(scan, kSliceStackShape));
}

// ---------------------------------------------------------------------------
// Scan-consistent augmentation

struct AugmentBounds {
  // Crop extent per axis as a fraction of the axis length.
  double crop_fraction_min = 0.85;
  double crop_fraction_max = 1.0;
  bool crop_slices = true;
  // In-plane rotation, degrees.
  double rotation_min = -10.0;
  double rotation_max = 10.0;
};

struct AugmentParams {
  Box3 crop;
  double rotation_degrees = 0.0;
  Shape3 resize_target;
  bool operator==(const AugmentParams&) const = default;
};

inline void validate_bounds(const AugmentBounds& b) {
  require(b.crop_fraction_min > 0.0 && b.crop_fraction_min <= b.crop_fraction_max && b.crop_fraction_max <= 1.0,
          "crop fraction bounds must satisfy 0 < min <= max <= 1");
  require(b.rotation_min <= b.rotation_max, "rotation bounds must satisfy min <= max");
}

// Draws one parameter set for a whole scan of shape `shape`.
inline AugmentParams sample_augment_params(Rng& rng, const AugmentBounds& bounds, Shape3 shape) {
  validate_bounds(bounds);
  auto axis = [&](int dim, bool enabled, int& offset, int& extent) {
    if (!enabled) {
      offset = 0, extent = dim;
      return;
    }
    const int lo = std::clamp(static_cast<int>(std::ceil(bounds.crop_fraction_min * dim - 1e-9)), 1, dim);
    const int hi = std::clamp(static_cast<int>(std::floor(bounds.crop_fraction_max * dim + 1e-9)), lo, dim);
    extent = rng.uniform_int(lo, hi);
    offset = rng.uniform_int(0, dim - extent);
  };
  AugmentParams p;
  axis(shape.slices, bounds.crop_slices, p.crop.slice0, p.crop.slices);
  axis(shape.rows, true, p.crop.row0, p.crop.rows);
  axis(shape.cols, true, p.crop.col0, p.crop.cols);
  p.rotation_degrees = rng.uniform(bounds.rotation_min, bounds.rotation_max);
  p.resize_target = shape;
  return p;
}

inline void validate_params(const AugmentParams& p, Shape3 source) {
  const Box3& b = p.crop;
  require(b.slices >= 1 && b.rows >= 1 && b.cols >= 1, "crop box extents must be positive");
  require(b.slice0 >= 0 && b.row0 >= 0 && b.col0 >= 0 && b.slice0 + b.slices <= source.slices &&
              b.row0 + b.rows <= source.rows && b.col0 + b.cols <= source.cols,
          "crop box exceeds volume bounds " + to_string(source));
  require(std::isfinite(p.rotation_degrees), "rotation must be finite");
  require(p.resize_target.slices > 0 && p.resize_target.rows > 0 && p.resize_target.cols > 0,
          "resize target must be positive");
}

// In-plane sampling table of one augmentation: for every output pixel, the
// four bilinear source taps inside the crop rectangle.
struct PlaneSampler {
  std::vector<std::array<std::int32_t, 4>> idx;
  std::vector<std::array<float, 4>> w;

  PlaneSampler(const AugmentParams& p, int src_cols) {
    const int out_rows = p.resize_target.rows, out_cols = p.resize_target.cols;
    const Box3& b = p.crop;
    const double th = p.rotation_degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cy = b.row0 + (b.rows - 1) / 2.0, cx = b.col0 + (b.cols - 1) / 2.0;
    const double sy = static_cast<double>(b.rows) / out_rows, sx = static_cast<double>(b.cols) / out_cols;
    idx.resize(static_cast<std::size_t>(out_rows) * out_cols);
    w.resize(idx.size());
    for (int r = 0; r < out_rows; ++r)
      for (int c = 0; c < out_cols; ++c) {
        const double y = b.row0 + (r + 0.5) * sy - 0.5 - cy;
        const double x = b.col0 + (c + 0.5) * sx - 0.5 - cx;
        double ys = cy + cs * y - sn * x;
        double xs = cx + sn * y + cs * x;
        ys = std::clamp(ys, static_cast<double>(b.row0), static_cast<double>(b.row0 + b.rows - 1));
        xs = std::clamp(xs, static_cast<double>(b.col0), static_cast<double>(b.col0 + b.cols - 1));
        const int y0 = static_cast<int>(std::floor(ys)), x0 = static_cast<int>(std::floor(xs));
        const int y1 = std::min(y0 + 1, b.row0 + b.rows - 1), x1 = std::min(x0 + 1, b.col0 + b.cols - 1);
        const float fy = static_cast<float>(ys - y0), fx = static_cast<float>(xs - x0);
        const std::size_t o = static_cast<std::size_t>(r) * out_cols + c;
        idx[o] = {y0 * src_cols + x0, y0 * src_cols + x1, y1 * src_cols + x0, y1 * src_cols + x1};
        w[o] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
      }
  }

  void apply(const float* src_plane, float* dst_plane) const {
    for (std::size_t o = 0; o < idx.size(); ++o) {
      const auto& i = idx[o];
      const auto& k = w[o];
      dst_plane[o] = k[0] * src_plane[i[0]] + k[1] * src_plane[i[1]] + k[2] * src_plane[i[2]] +
                     k[3] * src_plane[i[3]];
    }
  }
};

// Applies the in-plane part (crop, resize, rotation) of `p` to one slice.
inline std::vector<float> augment_plane(std::span<const float> plane, int rows, int cols, const AugmentParams& p) {
  require(plane.size() == static_cast<std::size_t>(rows) * cols, "plane size mismatch");
  validate_params(p, Shape3{p.crop.slice0 + p.crop.slices, rows, cols});
  std::vector<float> out(static_cast<std::size_t>(p.resize_target.rows) * p.resize_target.cols);
  PlaneSampler(p, cols).apply(plane.data(), out.data());
  return out;
}

// Depth taps of an augmentation: output slice -> (i0, i1, weight of i1) within the crop.
inline std::vector<detail::LinearTap> augment_depth_taps(const AugmentParams& p) {
  auto taps = detail::linear_taps(p.crop.slices, p.resize_target.slices);
  for (auto& t : taps) t.i0 += p.crop.slice0, t.i1 += p.crop.slice0;
  return taps;
}

inline VolumeF augment_volume(const VolumeF& in, const AugmentParams& p) {
  validate_params(p, in.shape());
  const PlaneSampler sampler(p, in.cols());
  const auto taps = augment_depth_taps(p);
  VolumeF out(p.resize_target);
  const std::size_t out_plane = out.slice_size();
  std::vector<float> lo(out_plane), hi(out_plane);
  for (int s = 0; s < out.slices(); ++s) {
    const auto& t = taps[static_cast<std::size_t>(s)];
    float* dst = out.data().data() + s * out_plane;
    sampler.apply(in.slice(t.i0).data(), lo.data());
    if (t.w == 0.0f) {
      std::copy(lo.begin(), lo.end(), dst);
      continue;
    }
    sampler.apply(in.slice(t.i1).data(), hi.data());
    for (std::size_t i = 0; i < out_plane; ++i) dst[i] = lo[i] + t.w * (hi[i] - lo[i]);
  }
  return out;
}

// Records every augmentation applied, one entry per (scan, call).
struct AugmentLog {
  struct Entry {
    std::string scan_id;
    AugmentParams params;
  };
  std::vector<Entry> entries;
};

inline CanonicalVolume3D augment_scan(const CanonicalVolume3D& volume, const AugmentParams& params,
                                      AugmentLog* log = nullptr, std::string_view scan_id = {}) {
  require(params.resize_target == CanonicalVolume3D::kShape,
          "augment_scan resize target must be the canonical 3D shape");
  if (log) log->entries.push_back({std::string(scan_id), params});
  VolumeF out = augment_volume(volume.volume(), params);
  // Bilinear weights are convex, so values stay in [0,1] up to rounding.
  for (float& x : out.data()) x = std::clamp(x, 0.0f, 1.0f);
  return CanonicalVolume3D(std::move(out));
}

}  // namespace srcaware
