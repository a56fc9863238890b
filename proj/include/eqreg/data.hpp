#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "eqreg/dense_map.hpp"
#include "eqreg/geometry.hpp"

namespace eqreg {

inline constexpr double kMinDepth = 1.0;
inline constexpr double kMaxDepth = 10.0;

/// One rendered view. All maps share H x W and hold float32-representable
/// values so that they survive the file format unchanged.
struct SceneSample {
  DenseMap rgb;        // [0,1]
  DenseMap depth;      // [1,10]
  DenseMap disparity;  // 1 / depth
  DenseMap normal;     // unit, facing the camera (z < 0)
  DenseMap edge;       // {0,1}
  std::vector<int> surface;  // 0 = ground, k = k-th primitive
  std::uint64_t scene_seed = 0;
};

/// Scene geometry drawn from a seed. The view is orthographic: the frame
/// covers world [0,10] x [0,10] and depth is measured along the view axis.
struct Scene {
  struct Primitive {
    bool ellipsoid = false;
    double cu = 0, cv = 0;          // centre in normalised frame coordinates
    double ru = 0, rv = 0;          // half extents / radii, normalised
    double angle = 0;               // quad rotation
    double z0 = 0;                  // depth at the centre (quad) or of the rim (ellipsoid)
    double gx = 0, gy = 0;          // quad depth slope per world unit
    double rz = 0;                  // ellipsoid depth radius
    double albedo[3] = {0, 0, 0};
    double fx = 0, fy = 0, px = 0, py = 0;  // texture frequency and phase
  };
  Primitive ground;
  std::vector<Primitive> primitives;
  std::uint64_t seed = 0;

  static Scene generate(std::uint64_t seed, int complexity);
};

/// Renders the full h x w frame.
SceneSample gen_scene(std::uint64_t seed, int h, int w, int complexity);

/// Renders the window of an h x w frame described by `t`: output pixel (i, j)
/// is evaluated exactly where apply(t, .) would sample the full frame.
SceneSample gen_scene_window(std::uint64_t seed, int h, int w, int complexity,
                             const CropTransform& t);

inline constexpr std::uint32_t kDenseMapVersion = 1;

/// "DMAP", u32 version, u32 h, u32 w, u32 c, u8 semantics, u8 dtype (0 = f32 LE),
/// row-major channel-interleaved payload, CRC32 trailer. Invalid pixels are
/// stored as NaN and come back invalid with value 0.
std::vector<std::uint8_t> encode_map(const DenseMap& map);
DenseMap decode_map(const std::vector<std::uint8_t>& bytes);
void write_map(const DenseMap& map, const std::filesystem::path& path);
DenseMap read_map(const std::filesystem::path& path);

struct SceneParams {
  int size = 64;
  int complexity = 6;
  std::uint64_t seed = 0;
};

struct SampleId {
  std::string split;
  std::uint64_t scene_seed = 0;

  std::string name() const { return split + "/" + std::to_string(scene_seed); }
  bool operator==(const SampleId&) const = default;
};

inline constexpr int kManifestVersion = 1;
/// Validation scene seeds start this far above the training ones.
inline constexpr std::uint64_t kValSeedOffset = 1'000'000;

struct DatasetManifest {
  std::filesystem::path root;
  int format_version = kManifestVersion;
  SceneParams params;
  std::vector<SampleId> ids;

  std::vector<SampleId> split(const std::string& name) const;
  /// <root>/<split>/<seed>_<kind>.dmap, kind in rgb|depth|disp|normal|edge.
  std::filesystem::path file(const SampleId& id, const std::string& kind) const;
};

/// Throws Collision when `root` exists and is non-empty unless `force`.
DatasetManifest build_dataset(const SceneParams& params, int n_train, int n_val,
                              const std::filesystem::path& root, bool force = false);
/// Writes <root>/manifest.txt under an exclusive lock.
void write_manifest(const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& root);

SceneSample load_sample(const DatasetManifest& manifest, const SampleId& id);
std::vector<SceneSample> load_split(const DatasetManifest& manifest, const std::string& split);

/// Read access to input images only; ground-truth files are never opened.
class RgbOnlyLoader {
 public:
  RgbOnlyLoader(const DatasetManifest& manifest, const std::string& split);

  std::size_t size() const { return images_.size(); }
  const DenseMap& image(std::size_t i) const { return images_.at(i); }

 private:
  std::vector<DenseMap> images_;
};

}  // namespace eqreg
