#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "eqreg/error.hpp"
#include "eqreg/geometry.hpp"

namespace eqreg {
namespace {

DenseMap random_map(int h, int w, int c, RandomState& rng) {
  DenseMap m(h, w, c, Semantics::Feature);
  for (double& v : m.values()) v = rng.uniform(-1.0, 1.0);
  return m;
}

DenseMap smooth_image(int h, int w) {
  DenseMap m(h, w, 1, Semantics::Feature);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      m.at(y, x) = std::sin(0.06 * x) * std::cos(0.05 * y) + 0.01 * x;
    }
  }
  return m;
}

double dot(const DenseMap& a, const DenseMap& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

double norm(const DenseMap& a) { return std::sqrt(dot(a, a)); }

TEST(SampleTransform, DegenerateRangesGiveFullImage) {
  CropSampler s;
  s.scale_lo = s.scale_hi = 1.0;
  s.aspect_lo = s.aspect_hi = 1.0;
  s.pad_frac = 0.0;
  RandomState rng(3);
  const CropTransform t = sample_transform(s, 64, 64, rng);
  EXPECT_DOUBLE_EQ(t.y0, 0.0);
  EXPECT_DOUBLE_EQ(t.x0, 0.0);
  EXPECT_DOUBLE_EQ(t.win_h, 64.0);
  EXPECT_DOUBLE_EQ(t.win_w, 64.0);
}

TEST(SampleTransform, SameStateSameOutput) {
  CropSampler s;
  RandomState a(7);
  RandomState b(7);
  const CropTransform ta = sample_transform(s, 64, 64, a);
  const CropTransform tb = sample_transform(s, 64, 64, b);
  EXPECT_EQ(ta.y0, tb.y0);
  EXPECT_EQ(ta.x0, tb.x0);
  EXPECT_EQ(ta.win_h, tb.win_h);
  EXPECT_EQ(ta.win_w, tb.win_w);
  ASSERT_TRUE(ta.jitter && tb.jitter);
  EXPECT_EQ(ta.jitter->hue, tb.jitter->hue);
  EXPECT_TRUE(a == b);
}

TEST(SampleTransform, TenThousandDrawsRespectBounds) {
  for (PadMode mode : {PadMode::PerSide, PadMode::Total}) {
    CropSampler s;
    s.pad_mode = mode;
    RandomState rng(11);
    for (int i = 0; i < 10000; ++i) {
      const CropTransform t = sample_transform(s, 64, 64, rng);
      const double area = t.win_h * t.win_w / (64.0 * 64.0);
      const double aspect = t.win_w / t.win_h;
      ASSERT_GE(area, 0.4 - 1e-12);
      ASSERT_LE(area, 1.0 + 1e-12);
      ASSERT_GE(aspect, 0.75 - 1e-12);
      ASSERT_LE(aspect, 4.0 / 3.0 + 1e-12);
      ASSERT_LE(window_overhang(t, 64, 64, mode), 0.2 * std::min(t.win_h, t.win_w) + 1e-9);
    }
  }
}

TEST(SampleTransform, InfeasibleRangesNameTheBound) {
  CropSampler s;
  s.scale_lo = s.scale_hi = 1.0;
  s.aspect_lo = s.aspect_hi = 4.0;
  s.pad_frac = 0.0;
  RandomState rng(1);
  try {
    sample_transform(s, 64, 64, rng);
    FAIL() << "expected a constraint error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Constraint);
    EXPECT_NE(std::string(e.what()).find("pad_frac"), std::string::npos);
  }
}

TEST(SampleTransform, RejectsInvalidSampler) {
  CropSampler s;
  s.scale_lo = 0.9;
  s.scale_hi = 0.5;
  RandomState rng(1);
  EXPECT_THROW(sample_transform(s, 64, 64, rng), Error);
}

TEST(Apply, IdentityIsBitwise) {
  RandomState rng(5);
  const DenseMap m = random_map(12, 9, 3, rng);
  const DenseMap out = apply(CropTransform::identity(12, 9), m);
  EXPECT_TRUE(out == m);
}

TEST(Apply, ConstantStaysConstant) {
  const DenseMap m(32, 32, 2, Semantics::Feature, 0.75);
  CropTransform t;
  t.y0 = 3.3;
  t.x0 = 5.7;
  t.win_h = 17.2;
  t.win_w = 20.9;
  t.out_h = 11;
  t.out_w = 13;
  const DenseMap out = apply(t, m);
  EXPECT_FALSE(out.has_mask());
  for (double v : out.values()) EXPECT_NEAR(v, 0.75, 1e-12);
}

// Continuous bilinear surface of a 1-row map, averaged over 16 sub-samples of
// each output pixel footprint.
TEST(Apply, MatchesSupersampledReference) {
  DenseMap m(1, 4, 1, Semantics::Feature);
  for (int x = 0; x < 4; ++x) m.at(0, x) = x;
  CropTransform t;
  t.x0 = 0.5;
  t.win_w = 2.0;
  t.win_h = 1.0;
  t.out_h = 1;
  t.out_w = 2;
  const DenseMap out = apply(t, m);
  auto surface = [&](double s) {
    const int i0 = static_cast<int>(std::floor(s));
    const double f = s - i0;
    return (1 - f) * m.at(0, i0) + f * m.at(0, std::min(i0 + 1, 3));
  };
  for (int j = 0; j < 2; ++j) {
    double ref = 0.0;
    for (int k = 0; k < 16; ++k) {
      const double edge = t.x0 + (j + (k + 0.5) / 16.0) * t.win_w / t.out_w;
      ref += surface(edge - 0.5) / 16.0;
    }
    EXPECT_NEAR(out.at(0, j), ref, 1e-6);
  }
  EXPECT_NEAR(out.at(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(out.at(0, 1), 1.5, 1e-12);
}

TEST(Apply, IsLinear) {
  RandomState rng(9);
  const DenseMap a = random_map(16, 16, 2, rng);
  const DenseMap b = random_map(16, 16, 2, rng);
  CropTransform t;
  t.y0 = -1.7;
  t.x0 = 2.2;
  t.win_h = 11.5;
  t.win_w = 14.1;
  t.out_h = 8;
  t.out_w = 7;
  const double alpha = -1.3;
  DenseMap combo = scaled(a, alpha);
  for (std::size_t i = 0; i < combo.size(); ++i) combo.values()[i] += b.values()[i];
  const DenseMap lhs = apply(t, combo);
  const DenseMap ta = apply(t, a);
  const DenseMap tb = apply(t, b);
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    EXPECT_NEAR(lhs.values()[i], alpha * ta.values()[i] + tb.values()[i], 1e-12);
  }
}

TEST(Apply, OutOfBoundsReadsZeroAndMasks) {
  const DenseMap m(8, 8, 1, Semantics::Feature, 1.0);
  const DenseMap out = apply(CropTransform::translation(8, 8, -2, 0), m);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      EXPECT_EQ(out.valid(y, x), y >= 2);
      EXPECT_EQ(out.at(y, x), y >= 2 ? 1.0 : 0.0);
    }
  }
}

TEST(Apply, SourceMaskPropagates) {
  DenseMap m(8, 8, 1, Semantics::Feature, 1.0);
  m.set_valid(4, 4, false);
  const DenseMap out = apply(CropTransform::identity(8, 8), m);
  EXPECT_FALSE(out.valid(4, 4));
  EXPECT_EQ(out.valid_count(), 63);
}

TEST(Apply, WrapBoundaryIsCyclic) {
  RandomState rng(2);
  const DenseMap m = random_map(6, 5, 1, rng);
  const DenseMap out = apply(CropTransform::translation(6, 5, 4, -2, Boundary::Wrap), m);
  EXPECT_FALSE(out.has_mask());
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 5; ++x) EXPECT_EQ(out.at(y, x), m.at((y + 4) % 6, (x + 3) % 5));
  }
}

TEST(InverseSplat, IdentityUnitWindow) {
  RandomState rng(4);
  const DenseMap crop = random_map(10, 10, 2, rng);
  const WeightMap unit(10, 10, 1, Semantics::Weight, 1.0);
  const SplatResult r = inverse_splat(CropTransform::identity(10, 10), crop, unit, 10, 10);
  EXPECT_TRUE(r.accum == crop);
  for (double v : r.weights.values()) EXPECT_EQ(v, 1.0);
}

TEST(InverseSplat, DisjointIntegerCrops) {
  CropTransform left = CropTransform::translation(4, 4, 0, 0);
  CropTransform right = CropTransform::translation(4, 4, 0, 6);
  const DenseMap a(4, 4, 1, Semantics::Feature, 2.0);
  const DenseMap b(4, 4, 1, Semantics::Feature, 5.0);
  const WeightMap unit(4, 4, 1, Semantics::Weight, 1.0);
  const SplatResult ra = inverse_splat(left, a, unit, 4, 12);
  const SplatResult rb = inverse_splat(right, b, unit, 4, 12);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 12; ++x) {
      const bool in_a = x < 4;
      const bool in_b = x >= 6 && x < 10;
      EXPECT_EQ(ra.accum.at(y, x), in_a ? 2.0 : 0.0);
      EXPECT_EQ(ra.weights.at(y, x), in_a ? 1.0 : 0.0);
      EXPECT_EQ(rb.accum.at(y, x), in_b ? 5.0 : 0.0);
      EXPECT_EQ(rb.weights.at(y, x), in_b ? 1.0 : 0.0);
    }
  }
}

TEST(InverseSplat, AdjointOfApply) {
  RandomState rng(21);
  CropSampler s;
  s.out_h = 8;
  s.out_w = 8;
  s.jitter = JitterRanges{0, 0, 0, 0};
  const WeightMap unit(8, 8, 1, Semantics::Weight, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const DenseMap a = random_map(16, 16, 1, rng);
    const DenseMap b = random_map(8, 8, 1, rng);
    const CropTransform t = sample_transform(s, 16, 16, rng);
    const double lhs = dot(apply(t, a), b);
    const double rhs = dot(a, inverse_splat(t, b, unit, 16, 16).accum);
    ASSERT_LE(std::abs(lhs - rhs), 1e-6 * norm(a) * norm(b));
  }
}

TEST(InverseSplat, ApplyAfterSplatIsIdentityOnIntegerCrops) {
  RandomState rng(8);
  const DenseMap crop = random_map(5, 6, 1, rng);
  const CropTransform t = [] {
    CropTransform c = CropTransform::translation(5, 6, 3, 2);
    return c;
  }();
  const WeightMap unit(5, 6, 1, Semantics::Weight, 1.0);
  const SplatResult r = inverse_splat(t, crop, unit, 12, 12);
  const DenseMap back = apply(t, r.accum);
  for (std::size_t i = 0; i < crop.size(); ++i) EXPECT_EQ(back.values()[i], crop.values()[i]);
}

TEST(Compose, IdentityIsNeutral) {
  CropTransform t;
  t.y0 = 1.5;
  t.x0 = -2.25;
  t.win_h = 20;
  t.win_w = 24;
  t.out_h = 10;
  t.out_w = 12;
  t.src_h = 32;
  t.src_w = 32;
  const CropTransform c = compose(CropTransform::identity(10, 12), t);
  EXPECT_DOUBLE_EQ(c.y0, t.y0);
  EXPECT_DOUBLE_EQ(c.x0, t.x0);
  EXPECT_DOUBLE_EQ(c.win_h, t.win_h);
  EXPECT_DOUBLE_EQ(c.win_w, t.win_w);
  EXPECT_EQ(c.out_h, 10);
  EXPECT_EQ(c.out_w, 12);
}

TEST(Compose, IntegerTranslationsAdd) {
  const CropTransform c = compose(CropTransform::translation(16, 16, 1, -1),
                                  CropTransform::translation(16, 16, 2, 3));
  EXPECT_DOUBLE_EQ(c.y0, 3.0);
  EXPECT_DOUBLE_EQ(c.x0, 2.0);
  RandomState rng(6);
  const DenseMap x = random_map(16, 16, 1, rng);
  const DenseMap seq = apply(CropTransform::translation(16, 16, 1, -1),
                             apply(CropTransform::translation(16, 16, 2, 3), x));
  const DenseMap once = apply(c, x);
  for (int p = 0; p < 256; ++p) {
    if (seq.valid(p) && once.valid(p)) EXPECT_NEAR(seq.values()[p], once.values()[p], 1e-6);
  }
}

TEST(Compose, ContinuousPairMatchesSequentialApply) {
  const DenseMap img = smooth_image(64, 64);
  RandomState rng(13);
  CropSampler inner_s;
  inner_s.pad_frac = 0.0;
  inner_s.out_h = inner_s.out_w = 48;
  inner_s.jitter = JitterRanges{0, 0, 0, 0};
  CropSampler outer_s = inner_s;
  outer_s.out_h = outer_s.out_w = 32;
  for (int trial = 0; trial < 20; ++trial) {
    const CropTransform inner = sample_transform(inner_s, 64, 64, rng);
    const CropTransform outer = sample_transform(outer_s, 48, 48, rng);
    const DenseMap seq = apply(outer, apply(inner, img));
    const DenseMap once = apply(compose(outer, inner), img);
    double max_diff = 0.0;
    for (int p = 0; p < seq.pixels(); ++p) {
      if (seq.valid(p) && once.valid(p)) {
        max_diff = std::max(max_diff, std::abs(seq.values()[p] - once.values()[p]));
      }
    }
    EXPECT_LE(max_diff, 2e-3);
  }
}

// Bilinear interpolation reproduces affine images exactly, so any gap here
// would be an error in the composed window rather than resampling blur.
TEST(Compose, AffineImageComposesExactly) {
  DenseMap ramp(40, 40, 1, Semantics::Feature);
  for (int y = 0; y < 40; ++y) {
    for (int x = 0; x < 40; ++x) ramp.at(y, x) = 0.3 * y - 0.7 * x + 2.0;
  }
  CropTransform inner;
  inner.y0 = 3.25;
  inner.x0 = 5.5;
  inner.win_h = 30.0;
  inner.win_w = 27.0;
  inner.out_h = inner.out_w = 24;
  inner.src_h = inner.src_w = 40;
  CropTransform outer;
  outer.y0 = 2.5;
  outer.x0 = 1.75;
  outer.win_h = 17.0;
  outer.win_w = 19.0;
  outer.out_h = outer.out_w = 12;
  outer.src_h = outer.src_w = 24;
  const DenseMap seq = apply(outer, apply(inner, ramp));
  const DenseMap once = apply(compose(outer, inner), ramp);
  for (int p = 0; p < seq.pixels(); ++p) {
    ASSERT_TRUE(seq.valid(p) && once.valid(p));
    EXPECT_NEAR(seq.values()[p], once.values()[p], 1e-9);
  }
}

TEST(Compose, FrameMismatchThrows) {
  CropTransform outer = CropTransform::identity(8, 8);
  const CropTransform inner = CropTransform::identity(16, 16);
  try {
    compose(outer, inner);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Dimension);
  }
}

TEST(CosineWindow, ZeroMarginIsAllOnes) {
  const WeightMap w = cosine_window(7, 9, 0.0);
  for (double v : w.values()) EXPECT_EQ(v, 1.0);
}

TEST(CosineWindow, CentreIsOne) {
  const WeightMap w = cosine_window(9, 9, 0.3);
  EXPECT_DOUBLE_EQ(w.at(4, 4), 1.0);
}

TEST(CosineWindow, MatchesClosedFormProfile) {
  const WeightMap w = cosine_window(8, 8, 0.25);
  // Margin 2 px; per-axis distances to the nearest edge are 0.5, 1.5, 2.5, ...
  const double p0 = 0.5 * (1.0 - std::cos(std::numbers::pi * 0.5 / 2.0));
  const double p1 = 0.5 * (1.0 - std::cos(std::numbers::pi * 1.5 / 2.0));
  const double profile[8] = {p0, p1, 1.0, 1.0, 1.0, 1.0, p1, p0};
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) EXPECT_NEAR(w.at(y, x), profile[y] * profile[x], 1e-15);
  }
  EXPECT_NEAR(w.at(1, 4), 0.8535533905932737, 1e-12);
}

TEST(CosineWindow, ValuesInUnitInterval) {
  const WeightMap w = cosine_window(13, 21, 0.5);
  for (double v : w.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_NO_THROW(w.validate());
}

TEST(ColorJitter, ZeroRangesAreIdentity) {
  RandomState rng(1);
  DenseMap img(4, 4, 3, Semantics::Rgb);
  for (double& v : img.values()) v = rng.uniform();
  const DenseMap out = color_jitter(img, JitterRanges{0, 0, 0, 0}, rng);
  EXPECT_TRUE(out == img);
}

TEST(ColorJitter, BrightnessIsScalarMultiply) {
  const DenseMap gray(3, 3, 3, Semantics::Rgb, 0.5);
  const DenseMap out = apply_jitter(gray, ColorJitterParams{1.4, 1.0, 1.0, 0.0});
  for (double v : out.values()) EXPECT_NEAR(v, 0.7, 1e-12);
}

TEST(ColorJitter, SeededCallsAgreeAndStayInRange) {
  DenseMap img(8, 8, 3, Semantics::Rgb);
  RandomState fill(2);
  for (double& v : img.values()) v = fill.uniform();
  RandomState a(99);
  RandomState b(99);
  const DenseMap ja = color_jitter(img, JitterRanges{}, a);
  const DenseMap jb = color_jitter(img, JitterRanges{}, b);
  EXPECT_TRUE(ja == jb);
  for (double v : ja.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(ColorJitter, RejectsNonRgb) {
  const DenseMap depth(4, 4, 1, Semantics::Depth, 2.0);
  RandomState rng(0);
  try {
    color_jitter(depth, JitterRanges{}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Semantics);
  }
}

}  // namespace
}  // namespace eqreg
