#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "srcaware/error.hpp"

namespace srcaware {

// Shape of a volume indexed (slice, row, col).
struct Shape3 {
  int slices = 0;
  int rows = 0;
  int cols = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(slices) * static_cast<std::size_t>(rows) *
           static_cast<std::size_t>(cols);
  }
  bool operator==(const Shape3&) const = default;
};

inline std::string to_string(const Shape3& s) {
  return std::to_string(s.slices) + "x" + std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

// Dense row-major 3D array.
template <class T>
class Volume {
 public:
  Volume() = default;
  explicit Volume(Shape3 shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {
    require(shape.slices >= 0 && shape.rows >= 0 && shape.cols >= 0, "negative volume dims");
  }
  Volume(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    require(data_.size() == shape_.size(), "volume data size does not match shape " + to_string(shape_));
  }

  const Shape3& shape() const { return shape_; }
  int slices() const { return shape_.slices; }
  int rows() const { return shape_.rows; }
  int cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  std::size_t slice_size() const {
    return static_cast<std::size_t>(shape_.rows) * static_cast<std::size_t>(shape_.cols);
  }

  std::size_t index(int s, int r, int c) const {
    return (static_cast<std::size_t>(s) * shape_.rows + static_cast<std::size_t>(r)) * shape_.cols +
           static_cast<std::size_t>(c);
  }
  T& operator()(int s, int r, int c) { return data_[index(s, r, c)]; }
  const T& operator()(int s, int r, int c) const { return data_[index(s, r, c)]; }

  std::span<T> slice(int s) { return {data_.data() + s * slice_size(), slice_size()}; }
  std::span<const T> slice(int s) const { return {data_.data() + s * slice_size(), slice_size()}; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
  }

 private:
  Shape3 shape_{};
  std::vector<T> data_;
};

using VolumeF = Volume<float>;

// A raw scan with metadata. Source and label are absent for unlabeled scans.
struct ScanVolume {
  VolumeF voxels;
  std::string scan_id;
  std::optional<int> source;
  std::optional<int> label;
  std::vector<std::string> warnings;
};

inline void validate_scan(const ScanVolume& scan) {
  const auto& v = scan.voxels;
  require(v.slices() >= 1 && v.rows() >= 1 && v.cols() >= 1,
          "scan " + scan.scan_id + " has an empty dimension (" + to_string(v.shape()) + ")");
  require(v.all_finite(), "scan " + scan.scan_id + " contains NaN/Inf intensities");
  if (scan.source) require(*scan.source >= 0 && *scan.source <= 3, "scan source out of range");
  if (scan.label) require(*scan.label == 0 || *scan.label == 1, "scan label out of range");
}

inline constexpr Shape3 kCanonical3DShape{128, 256, 256};
inline constexpr Shape3 kSliceStackShape{24, 448, 448};

// Fixed-shape, [0,1]-normalized volume for one branch. `Target` pins the
// shape so the 3D and 2D inputs cannot be confused.
template <const Shape3& Target>
class CanonicalVolume {
 public:
  static constexpr const Shape3& kShape = Target;

  explicit CanonicalVolume(VolumeF v) : v_(std::move(v)) {
    require(v_.shape() == Target,
            "canonical volume must be " + to_string(Target) + ", got " + to_string(v_.shape()));
    require(std::all_of(v_.data().begin(), v_.data().end(), [](float x) { return x >= 0.0f && x <= 1.0f; }),
            "canonical volume values must lie in [0,1]");
  }

  const VolumeF& volume() const { return v_; }
  VolumeF release() && { return std::move(v_); }

 private:
  VolumeF v_;
};

using CanonicalVolume3D = CanonicalVolume<kCanonical3DShape>;
using SliceStack2D = CanonicalVolume<kSliceStackShape>;

}  // namespace srcaware
