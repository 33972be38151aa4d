#include <cmath>

#include <gtest/gtest.h>

#include "srcaware/rng.hpp"
#include "srcaware/volume_io.hpp"
#include "srcaware/volume_prep.hpp"

using namespace srcaware;

namespace {

ScanVolume make_scan(Shape3 shape, float fill = 0.0f) {
  ScanVolume s;
  s.voxels = VolumeF(shape, fill);
  s.scan_id = "t";
  return s;
}

ScanVolume slice_indexed(int slices) {
  ScanVolume s = make_scan(Shape3{slices, 3, 4});
  for (int z = 0; z < slices; ++z)
    for (float& v : s.voxels.slice(z)) v = static_cast<float>(z);
  return s;
}

// Direct (non-separable) trilinear evaluation with half-pixel centres and edge clamping.
double dense_trilinear(const VolumeF& in, Shape3 out, int s, int r, int c) {
  auto coord = [](int o, int n_in, int n_out, int& i0, int& i1) {
    double x = std::clamp((o + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1.0);
    i0 = static_cast<int>(std::floor(x));
    i1 = std::min(i0 + 1, n_in - 1);
    return x - i0;
  };
  int s0, s1, r0, r1, c0, c1;
  const double ws = coord(s, in.slices(), out.slices, s0, s1);
  const double wr = coord(r, in.rows(), out.rows, r0, r1);
  const double wc = coord(c, in.cols(), out.cols, c0, c1);
  double acc = 0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int d = 0; d < 2; ++d) {
        const double w = (a ? ws : 1 - ws) * (b ? wr : 1 - wr) * (d ? wc : 1 - wc);
        acc += w * in(a ? s1 : s0, b ? r1 : r0, d ? c1 : c0);
      }
  return acc;
}

VolumeF gaussian_blob(Shape3 shape, double sigma) {
  VolumeF v(shape);
  const double cs = (shape.slices - 1) / 2.0, cr = (shape.rows - 1) / 2.0, cc = (shape.cols - 1) / 2.0;
  for (int s = 0; s < shape.slices; ++s)
    for (int r = 0; r < shape.rows; ++r)
      for (int c = 0; c < shape.cols; ++c)
        v(s, r, c) = static_cast<float>(
            std::exp(-((s - cs) * (s - cs) + (r - cr) * (r - cr) + (c - cc) * (c - cc)) / (2 * sigma * sigma)));
  return v;
}

}  // namespace

TEST(TrimSlices, BoundaryAndFloorRounding) {
  EXPECT_EQ(trim_slices(slice_indexed(150)).voxels.slices(), 150);
  const auto t151 = trim_slices(slice_indexed(151));
  EXPECT_EQ(t151.voxels.slices(), 107);
  EXPECT_EQ(t151.voxels(0, 0, 0), 22.0f);
  const auto t200 = trim_slices(slice_indexed(200));
  EXPECT_EQ(t200.voxels.slices(), 140);
  EXPECT_EQ(t200.voxels(0, 0, 0), 30.0f);
  EXPECT_EQ(t200.voxels(139, 2, 3), 169.0f);
}

TEST(TrimSlices, IdempotentBelowThresholdAndNeverGrows) {
  for (int s : {10, 150, 151, 176, 200, 400}) {
    const auto once = trim_slices(slice_indexed(s));
    EXPECT_LE(once.voxels.slices(), s);
    if (once.voxels.slices() <= 150) EXPECT_EQ(trim_slices(once).voxels.data(), once.voxels.data());
  }
}

TEST(TrimSlices, FractionBoundsAndSmallScans) {
  EXPECT_THROW(trim_slices(slice_indexed(200), 150, 0.5), Error);
  EXPECT_THROW(trim_slices(slice_indexed(200), 150, -0.1), Error);
  EXPECT_EQ(trim_slices(slice_indexed(3), 1, 0.49).voxels.slices(), 1);
  EXPECT_EQ(trim_slices(slice_indexed(2), 1, 0.49).voxels.slices(), 2);
  EXPECT_EQ(trim_slices(slice_indexed(5), 1, 0.49).voxels.slices(), 1);
}

TEST(ExtractLung, UnionBoundingBoxOfTwoEllipsoids) {
  ScanVolume scan = make_scan(Shape3{40, 48, 56});
  struct E { double cs, cr, cc, as, ar, ac; };
  const E e[2] = {{18, 20, 15, 9, 12, 7}, {21, 25, 38, 11, 10, 8}};
  int s0 = 1 << 20, s1 = -1, r0 = 1 << 20, r1 = -1, c0 = 1 << 20, c1 = -1;
  for (int s = 0; s < 40; ++s)
    for (int r = 0; r < 48; ++r)
      for (int c = 0; c < 56; ++c)
        for (const auto& x : e) {
          const double q = std::pow((s - x.cs) / x.as, 2) + std::pow((r - x.cr) / x.ar, 2) + std::pow((c - x.cc) / x.ac, 2);
          if (q <= 1.0) {
            scan.voxels(s, r, c) = 0.8f;
            s0 = std::min(s0, s), s1 = std::max(s1, s), r0 = std::min(r0, r), r1 = std::max(r1, r);
            c0 = std::min(c0, c), c1 = std::max(c1, c);
          }
        }
  const auto res = extract_lung_detailed(scan);
  ASSERT_TRUE(res.bbox.has_value());
  EXPECT_NEAR(res.bbox->slice0, s0, 1);
  EXPECT_NEAR(res.bbox->row0, r0, 1);
  EXPECT_NEAR(res.bbox->col0, c0, 1);
  EXPECT_NEAR(res.bbox->slice0 + res.bbox->slices - 1, s1, 1);
  EXPECT_NEAR(res.bbox->row0 + res.bbox->rows - 1, r1, 1);
  EXPECT_NEAR(res.bbox->col0 + res.bbox->cols - 1, c1, 1);
  EXPECT_TRUE(res.scan.warnings.empty());
}

TEST(ExtractLung, AllZeroVolumeIsUnchangedWithWarning) {
  const ScanVolume scan = make_scan(Shape3{5, 6, 7});
  const auto out = extract_lung(scan);
  EXPECT_EQ(out.voxels.data(), scan.voxels.data());
  ASSERT_EQ(out.warnings.size(), 1u);
  EXPECT_EQ(out.warnings[0], kNoForegroundWarning);
}

TEST(ExtractLung, KeepsOnlyForegroundOfTwoLargestComponentsAndIsIdempotent) {
  Rng rng(7);
  ScanVolume scan = make_scan(Shape3{20, 30, 30});
  for (float& v : scan.voxels.data()) v = static_cast<float>(rng.uniform(0.0, 0.2));
  auto box = [&](int s0, int s1, int r0, int r1, int c0, int c1, float val) {
    for (int s = s0; s < s1; ++s)
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) scan.voxels(s, r, c) = val + static_cast<float>(rng.uniform(0.0, 0.1));
  };
  box(2, 18, 3, 25, 2, 12, 0.7f);
  box(3, 17, 4, 26, 16, 27, 0.7f);
  box(0, 2, 0, 2, 0, 2, 0.9f);  // small bright speck, dropped

  LungExtractConfig cfg;
  cfg.threshold = 0.5f;
  const auto res = extract_lung_detailed(scan, cfg);
  ASSERT_TRUE(res.bbox);
  const Box3& b = *res.bbox;
  EXPECT_EQ(b, (Box3{2, 3, 2, 16, 23, 25}));
  for (int s = 0; s < b.slices; ++s)
    for (int r = 0; r < b.rows; ++r)
      for (int c = 0; c < b.cols; ++c) {
        const float out = res.scan.voxels(s, r, c);
        if (out != 0.0f) {
          EXPECT_EQ(out, scan.voxels(s + b.slice0, r + b.row0, c + b.col0));
          EXPECT_GT(out, 0.5f);
        }
      }
  const auto twice = extract_lung(res.scan, cfg);
  EXPECT_EQ(twice.voxels.shape(), res.scan.voxels.shape());
  EXPECT_EQ(twice.voxels.data(), res.scan.voxels.data());
}

TEST(Canonicalize, IdentityOnCanonicalInput) {
  ScanVolume scan = make_scan(kCanonical3DShape);
  Rng rng(3);
  for (float& v : scan.voxels.data()) v = static_cast<float>(rng.uniform());
  scan.voxels.data()[0] = 0.0f;
  scan.voxels.data()[1] = 1.0f;
  const auto out = canonicalize_3d(scan);
  ASSERT_EQ(out.volume().shape(), kCanonical3DShape);
  double max_err = 0;
  for (std::size_t i = 0; i < out.volume().size(); ++i)
    max_err = std::max(max_err, std::abs(double(out.volume().data()[i]) - scan.voxels.data()[i]));
  EXPECT_LE(max_err, 1e-6);
}

TEST(Canonicalize, ConstantInputMapsToZeros) {
  const auto out3 = canonicalize_3d(make_scan(Shape3{10, 20, 30}, 4.5f));
  EXPECT_TRUE(std::all_of(out3.volume().data().begin(), out3.volume().data().end(), [](float v) { return v == 0.0f; }));
  const auto out2 = canonicalize_2d(make_scan(Shape3{30, 40, 40}, -2.0f));
  EXPECT_EQ(out2.volume().shape(), kSliceStackShape);
  EXPECT_TRUE(std::all_of(out2.volume().data().begin(), out2.volume().data().end(), [](float v) { return v == 0.0f; }));
}

TEST(Canonicalize, RejectsNonFinite) {
  ScanVolume scan = make_scan(Shape3{4, 4, 4}, 1.0f);
  scan.voxels(1, 1, 1) = std::nanf("");
  EXPECT_THROW(canonicalize_3d(scan), Error);
}

TEST(Canonicalize, SliceRampStaysMonotoneAndMatchesDenseOracle) {
  ScanVolume scan = make_scan(Shape3{37, 9, 11});
  for (int s = 0; s < 37; ++s)
    for (float& v : scan.voxels.slice(s)) v = static_cast<float>(s * 0.5);
  const auto out = canonicalize_3d(scan).volume();
  for (int s = 1; s < out.slices(); ++s) EXPECT_GE(out(s, 100, 100), out(s - 1, 100, 100));
  const double lo = 0.0, hi = 18.0;
  for (int s : {0, 1, 50, 127})
    for (int r : {0, 77, 255})
      for (int c : {0, 128, 255}) {
        const double expect = (dense_trilinear(scan.voxels, kCanonical3DShape, s, r, c) - lo) / (hi - lo);
        EXPECT_NEAR(out(s, r, c), expect, 1e-6);
      }
}

TEST(Canonicalize, FortyEightSlicesMapAroundEvenSlices) {
  ScanVolume scan = make_scan(Shape3{48, 16, 16});
  Rng rng(11);
  for (float& v : scan.voxels.data()) v = static_cast<float>(rng.uniform(-1.0, 3.0));
  const auto out = canonicalize_2d(scan).volume();
  ASSERT_EQ(out.shape(), kSliceStackShape);
  // Min-max runs on the resampled stack, so take the extremes of the dense oracle.
  double lo = 1e9, hi = -1e9;
  for (int k = 0; k < 24; ++k)
    for (int r = 0; r < 448; r += 1)
      for (int c = 0; c < 448; c += 1) {
        const double d = dense_trilinear(scan.voxels, kSliceStackShape, k, r, c);
        lo = std::min(lo, d), hi = std::max(hi, d);
      }
  // Output slice k samples input depth 2k + 0.5.
  for (int k : {0, 5, 11, 23})
    for (int r : {0, 200, 447})
      for (int c : {3, 224, 440}) {
        const double dense = dense_trilinear(scan.voxels, kSliceStackShape, k, r, c);
        EXPECT_NEAR(out(k, r, c), (dense - lo) / (hi - lo), 1e-5);
        // Inside the support of input slices 2k and 2k+1.
        double in_lo = 1e9, in_hi = -1e9;
        for (int z : {2 * k, 2 * k + 1})
          for (int rr = 0; rr < 16; ++rr)
            for (int cc = 0; cc < 16; ++cc) in_lo = std::min<double>(in_lo, scan.voxels(z, rr, cc)),
                                             in_hi = std::max<double>(in_hi, scan.voxels(z, rr, cc));
        EXPECT_GE(dense, in_lo - 1e-9);
        EXPECT_LE(dense, in_hi + 1e-9);
      }
}

TEST(Augment, SampledParamsDeterministicAndInBounds) {
  AugmentBounds b;
  Rng r1(42), r2(42);
  EXPECT_EQ(sample_augment_params(r1, b, kCanonical3DShape), sample_augment_params(r2, b, kCanonical3DShape));

  AugmentBounds fixed{1.0, 1.0, true, 3.0, 3.0};
  Rng r3(5);
  const auto p = sample_augment_params(r3, fixed, kCanonical3DShape);
  EXPECT_EQ(p.crop, (Box3{0, 0, 0, 128, 256, 256}));
  EXPECT_EQ(p.rotation_degrees, 3.0);

  Rng r4(9);
  double rmin = 1e9, rmax = -1e9;
  int emin = 1 << 20;
  for (int i = 0; i < 10000; ++i) {
    const auto q = sample_augment_params(r4, b, kCanonical3DShape);
    rmin = std::min(rmin, q.rotation_degrees);
    rmax = std::max(rmax, q.rotation_degrees);
    emin = std::min(emin, q.crop.rows);
    EXPECT_LE(q.crop.row0 + q.crop.rows, 256);
    EXPECT_LE(q.crop.slice0 + q.crop.slices, 128);
  }
  EXPECT_GE(rmin, -10.0);
  EXPECT_LE(rmax, 10.0);
  EXPECT_LT(rmin, -9.9);
  EXPECT_GT(rmax, 9.9);
  EXPECT_GE(emin, static_cast<int>(std::ceil(0.85 * 256)));
}

TEST(Augment, IdentityParamsReproduceInput) {
  Rng rng(1);
  VolumeF v(kCanonical3DShape);
  for (float& x : v.data()) x = static_cast<float>(rng.uniform());
  const CanonicalVolume3D in(std::move(v));
  AugmentParams p{Box3{0, 0, 0, 128, 256, 256}, 0.0, kCanonical3DShape};
  AugmentLog log;
  const auto out = augment_scan(in, p, &log, "scan");
  double err = 0;
  for (std::size_t i = 0; i < in.volume().size(); ++i)
    err = std::max(err, std::abs(double(out.volume().data()[i]) - in.volume().data()[i]));
  EXPECT_LE(err, 1e-6);
  ASSERT_EQ(log.entries.size(), 1u);
  EXPECT_EQ(log.entries[0].scan_id, "scan");
}

TEST(Augment, VolumeWiseEqualsPerSliceApplication) {
  Rng rng(21);
  const Shape3 shape{12, 40, 36};
  VolumeF v(shape);
  for (float& x : v.data()) x = static_cast<float>(rng.uniform());
  AugmentBounds b{0.7, 0.95, true, -10, 10};
  for (int trial = 0; trial < 5; ++trial) {
    const AugmentParams p = sample_augment_params(rng, b, shape);
    const VolumeF out = augment_volume(v, p);
    const auto taps = augment_depth_taps(p);
    for (int s = 0; s < shape.slices; ++s) {
      // Per-slice oracle: blend the two source slices in depth, then transform that plane alone.
      const auto& t = taps[static_cast<std::size_t>(s)];
      std::vector<float> plane(v.slice_size());
      for (std::size_t i = 0; i < plane.size(); ++i)
        plane[i] = (1 - t.w) * v.slice(t.i0)[i] + t.w * v.slice(t.i1)[i];
      const auto ref = augment_plane(plane, shape.rows, shape.cols, p);
      for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(out.slice(s)[i], ref[i], 1e-5);
    }
  }
}

TEST(Augment, RotationRoundTripOnSmoothVolume) {
  const Shape3 shape{4, 64, 64};
  const VolumeF blob = gaussian_blob(shape, 9.0);
  for (double th : {4.0, 10.0}) {
    const AugmentParams fwd{Box3{0, 0, 0, 4, 64, 64}, th, shape};
    AugmentParams back = fwd;
    back.rotation_degrees = -th;
    const VolumeF rt = augment_volume(augment_volume(blob, fwd), back);
    double err = 0;
    for (int s = 0; s < 4; ++s)
      for (int r = 12; r < 52; ++r)
        for (int c = 12; c < 52; ++c) err = std::max(err, std::abs(double(rt(s, r, c)) - blob(s, r, c)));
    EXPECT_LT(err, 0.01) << "theta=" << th;
  }
}

TEST(Augment, RejectsOutOfBoundsCrop) {
  const CanonicalVolume3D in{VolumeF(kCanonical3DShape)};
  AugmentParams p{Box3{10, 0, 0, 128, 256, 256}, 0.0, kCanonical3DShape};
  EXPECT_THROW(augment_scan(in, p), Error);
}

TEST(VolumeIo, RoundTripAndHeaderLayout) {
  const auto path = std::filesystem::temp_directory_path() / "srcaware_io_test.ctv";
  VolumeF v(Shape3{2, 3, 5});
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(i) * 0.25f - 1.0f;
  write_volume(path, v);
  EXPECT_EQ(std::filesystem::file_size(path), 16u + 4u * 30u);
  std::ifstream in(path, std::ios::binary);
  unsigned char h[16];
  in.read(reinterpret_cast<char*>(h), 16);
  EXPECT_EQ(std::string(reinterpret_cast<char*>(h), 4), "CTV1");
  EXPECT_EQ(h[4], 2);
  EXPECT_EQ(h[8], 3);
  EXPECT_EQ(h[12], 5);
  const VolumeF back = read_volume(path);
  EXPECT_EQ(back.shape(), v.shape());
  EXPECT_EQ(back.data(), v.data());
  std::filesystem::remove(path);
}
