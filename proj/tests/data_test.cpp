#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "eqreg/binary_io.hpp"
#include "eqreg/data.hpp"
#include "eqreg/error.hpp"

namespace eqreg {
namespace {

namespace fs = std::filesystem;

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("eqreg_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST(Scene, SameSeedIsBitwiseIdentical) {
  const SceneSample a = gen_scene(17, 32, 48, 5);
  const SceneSample b = gen_scene(17, 32, 48, 5);
  EXPECT_TRUE(a.rgb == b.rgb);
  EXPECT_TRUE(a.depth == b.depth);
  EXPECT_TRUE(a.normal == b.normal);
  EXPECT_TRUE(a.edge == b.edge);
  EXPECT_EQ(a.surface, b.surface);
  const SceneSample c = gen_scene(18, 32, 48, 5);
  EXPECT_FALSE(a.depth == c.depth);
}

TEST(Scene, GroundPlaneOnly) {
  const SceneSample s = gen_scene(3, 32, 32, 0);
  const double* n0 = s.normal.pixel(0, 0);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      for (int c = 0; c < 3; ++c) EXPECT_EQ(s.normal.at(y, x, c), n0[c]);
      // Depth runs from 9 at the top edge to 4 at the bottom edge.
      EXPECT_NEAR(s.depth.at(y, x), 9.0 - 5.0 * (y + 0.5) / 32.0, 1e-6);
    }
  }
  // Second differences of an affine ramp vanish.
  for (int y = 1; y + 1 < 32; ++y) {
    EXPECT_NEAR(s.depth.at(y + 1, 5) - 2 * s.depth.at(y, 5) + s.depth.at(y - 1, 5), 0.0, 2e-6);
  }
}

TEST(Scene, Invariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SceneSample s = gen_scene(seed, 64, 64, 8);
    s.normal.validate();
    s.depth.validate();
    for (int p = 0; p < s.depth.pixels(); ++p) {
      const double d = s.depth.values()[p];
      EXPECT_GE(d, kMinDepth);
      EXPECT_LE(d, kMaxDepth);
      EXPECT_NEAR(d * s.disparity.values()[p], 1.0, 1e-6);
      EXPECT_TRUE(s.edge.values()[p] == 0.0 || s.edge.values()[p] == 1.0);
      EXPECT_LT(s.normal.values()[3 * p + 2], 0.0);
    }
    for (double v : s.rgb.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

// Taps of the bilinear read at output pixel (i, j), as in apply().
bool single_surface_support(const CropTransform& t, const SceneSample& full, int i, int j,
                            int expected) {
  const double sy = t.y0 + (i + 0.5) * t.win_h / t.out_h - 0.5;
  const double sx = t.x0 + (j + 0.5) * t.win_w / t.out_w - 0.5;
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const double fy = sy - y0;
  const double fx = sx - x0;
  const int w = full.depth.width();
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const double wt = (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
      if (wt == 0.0) continue;
      if (full.surface[static_cast<std::size_t>(y0 + dy) * w + x0 + dx] != expected) return false;
    }
  }
  return true;
}

TEST(Scene, GroundTruthIsEquivariantUnderCrops) {
  const int n = 64;
  CropSampler sampler;
  sampler.jitter = JitterRanges{0, 0, 0, 0};
  RandomState rng(99);
  double depth_err = 0.0;
  double angle_err = 0.0;
  long count = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const SceneSample full = gen_scene(seed, n, n, 6);
    for (int k = 0; k < 4; ++k) {
      const CropTransform t = sample_transform(sampler, n, n, rng);
      const SceneSample win = gen_scene_window(seed, n, n, 6, t);
      const DenseMap d = apply(t, full.depth);
      const DenseMap nm = apply(t, full.normal);
      for (int i = 0; i < t.out_h; ++i) {
        for (int j = 0; j < t.out_w; ++j) {
          if (!d.valid(i, j)) continue;
          // Bilinear reads that straddle an occlusion boundary have no single true value.
          if (!single_surface_support(t, full, i, j, win.surface[i * t.out_w + j])) continue;
          depth_err += std::abs(d.at(i, j) - win.depth.at(i, j));
          const double* a = nm.pixel(i, j);
          const double* b = win.normal.pixel(i, j);
          const double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
          const double c = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / na;
          angle_err += std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / std::numbers::pi;
          ++count;
        }
      }
    }
  }
  ASSERT_GT(count, 10000);
  EXPECT_LE(depth_err / count, 1e-3);
  EXPECT_LE(angle_err / count, 1.0);
}

TEST(Scene, IdentityWindowMatchesFullRender) {
  const SceneSample full = gen_scene(4, 32, 32, 6);
  const SceneSample win = gen_scene_window(4, 32, 32, 6, CropTransform::identity(32, 32));
  EXPECT_TRUE(full.depth == win.depth);
  EXPECT_TRUE(full.rgb == win.rgb);
}

TEST(Scene, RejectsTinyFrames) { EXPECT_THROW(gen_scene(0, 8, 32, 1), Error); }

TEST_F(TempDir, MapRoundTripIsBitExact) {
  const SceneSample s = gen_scene(5, 16, 24, 4);
  for (const DenseMap* m : {&s.rgb, &s.depth, &s.disparity, &s.normal, &s.edge}) {
    write_map(*m, dir_ / "m.dmap");
    EXPECT_TRUE(read_map(dir_ / "m.dmap") == *m);
  }
  DenseMap masked = s.depth;
  masked.set_valid(2, 3, false);
  masked.at(2, 3) = 0.0;
  write_map(masked, dir_ / "masked.dmap");
  const DenseMap back = read_map(dir_ / "masked.dmap");
  EXPECT_TRUE(back == masked);
  EXPECT_FALSE(back.valid(2, 3));
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

TEST_F(TempDir, LargeMapHashIsStable) {
  RandomState rng(12);
  DenseMap m(512, 512, 3, Semantics::Rgb);
  for (double& v : m.values()) v = static_cast<float>(rng.uniform());
  write_map(m, dir_ / "big.dmap");
  const std::vector<std::uint8_t> first = read_file(dir_ / "big.dmap");
  EXPECT_EQ(first.size(), 4u + 4 * 4 + 2 + 512u * 512 * 3 * 4 + 4);
  const DenseMap back = read_map(dir_ / "big.dmap");
  EXPECT_TRUE(back == m);
  write_map(back, dir_ / "big2.dmap");
  EXPECT_EQ(fnv1a(first), fnv1a(read_file(dir_ / "big2.dmap")));
}

ErrorKind decode_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_map(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::Invariant;
}

TEST(DenseMapFile, DistinctErrors) {
  const std::vector<std::uint8_t> good = encode_map(gen_scene(1, 16, 16, 2).depth);
  std::vector<std::uint8_t> magic = good;
  magic[0] = 'X';
  EXPECT_EQ(decode_kind(magic), ErrorKind::Format);
  std::vector<std::uint8_t> cut(good.begin(), good.begin() + good.size() / 2);
  EXPECT_EQ(decode_kind(cut), ErrorKind::Truncated);
  std::vector<std::uint8_t> dtype = good;
  dtype[4 + 16 + 1] = 1;
  EXPECT_EQ(decode_kind(dtype), ErrorKind::Dtype);
  std::vector<std::uint8_t> flipped = good;
  flipped[40] ^= 0x10;
  EXPECT_EQ(decode_kind(flipped), ErrorKind::Checksum);
  std::vector<std::uint8_t> version = good;
  version[4] = 7;
  EXPECT_EQ(decode_kind(version), ErrorKind::Version);
  EXPECT_THROW(read_map("/nonexistent/eqreg.dmap"), Error);
}

TEST_F(TempDir, BuildDatasetListsDisjointSplits) {
  SceneParams p;
  p.size = 16;
  p.complexity = 3;
  p.seed = 40;
  const DatasetManifest m = build_dataset(p, 8, 2, dir_ / "ds");
  EXPECT_EQ(m.ids.size(), 10u);
  const auto train = m.split("train");
  const auto val = m.split("val");
  ASSERT_EQ(train.size(), 8u);
  ASSERT_EQ(val.size(), 2u);
  for (const SampleId& a : train) {
    for (const SampleId& b : val) EXPECT_NE(a.scene_seed, b.scene_seed);
  }
  const DatasetManifest back = read_manifest(dir_ / "ds");
  EXPECT_EQ(back.ids, m.ids);
  EXPECT_EQ(back.params.size, 16);
  EXPECT_EQ(back.params.seed, 40u);
  for (const SampleId& id : m.ids) {
    for (const char* kind : {"rgb", "depth", "disp", "normal", "edge"}) {
      EXPECT_TRUE(fs::exists(m.file(id, kind))) << m.file(id, kind);
    }
  }
  const SceneSample s = load_sample(m, train[3]);
  const SceneSample g = gen_scene(train[3].scene_seed, 16, 16, 3);
  EXPECT_TRUE(s.depth == g.depth);
  EXPECT_TRUE(s.rgb == g.rgb);
  const RgbOnlyLoader rgb(m, "val");
  EXPECT_EQ(rgb.size(), 2u);
  EXPECT_TRUE(rgb.image(1) == load_sample(m, val[1]).rgb);
}

TEST_F(TempDir, CollisionAndForcedRegeneration) {
  SceneParams p;
  p.size = 16;
  p.complexity = 2;
  build_dataset(p, 2, 1, dir_ / "ds");
  const auto before = read_file(dir_ / "ds" / "train" / "0_rgb.dmap");
  try {
    build_dataset(p, 2, 1, dir_ / "ds");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Collision);
  }
  build_dataset(p, 2, 1, dir_ / "ds", true);
  EXPECT_EQ(read_file(dir_ / "ds" / "train" / "0_rgb.dmap"), before);
  EXPECT_EQ(read_file(dir_ / "ds" / "manifest.txt").size(),
            read_file(dir_ / "ds" / "manifest.txt").size());
}

TEST_F(TempDir, RgbOnlyLoaderNeverOpensGroundTruth) {
  SceneParams p;
  p.size = 16;
  const DatasetManifest m = build_dataset(p, 2, 1, dir_ / "ds");
  for (const SampleId& id : m.ids) {
    for (const char* kind : {"depth", "disp", "normal", "edge"}) fs::remove(m.file(id, kind));
  }
  const RgbOnlyLoader loader(m, "train");
  EXPECT_EQ(loader.size(), 2u);
  EXPECT_THROW(load_sample(m, m.ids[0]), Error);
}

TEST_F(TempDir, ManifestRejectsMalformedInput) {
  std::ofstream(dir_ / "manifest.txt") << "format_version=1\nsize=16\n";
  EXPECT_THROW(read_manifest(dir_), Error);
  std::ofstream(dir_ / "manifest.txt") << "format_version=1\nsize=16\ncomplexity=1\nseed=0\ntrain/1\ntrain/1\n";
  EXPECT_THROW(read_manifest(dir_), Error);
}

}  // namespace
}  // namespace eqreg
