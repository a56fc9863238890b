#include "eqreg/data.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "eqreg/binary_io.hpp"
#include "eqreg/error.hpp"

namespace eqreg {
namespace {

constexpr double kWorld = 10.0;  // world units across the frame
constexpr double kEdgeThreshold = 0.04;

double fl(double v) { return static_cast<double>(static_cast<float>(v)); }

// A separate pass: g++ 11 at -O3 vectorises the three normal components and
// drops an inline double -> float -> double round trip.
void round_to_float(DenseMap& m) {
  for (double& v : m.values()) {
    volatile float f = static_cast<float>(v);
    v = f;
  }
}

struct SurfacePoint {
  int id = -1;
  double z = std::numeric_limits<double>::infinity();
  double zx = 0.0;  // dz/dX
  double zy = 0.0;  // dz/dY
};

// Depth and slope of primitive `p` at normalised (u, v), if it covers the point.
bool hit(const Scene::Primitive& p, double u, double v, SurfacePoint& out) {
  const double du = u - p.cu;
  const double dv = v - p.cv;
  if (!p.ellipsoid) {
    const double c = std::cos(p.angle);
    const double s = std::sin(p.angle);
    if (std::abs(c * du + s * dv) > p.ru || std::abs(-s * du + c * dv) > p.rv) return false;
    out.z = p.z0 + p.gx * kWorld * du + p.gy * kWorld * dv;
    out.zx = p.gx;
    out.zy = p.gy;
    return true;
  }
  const double q = (du / p.ru) * (du / p.ru) + (dv / p.rv) * (dv / p.rv);
  if (q >= 1.0) return false;
  const double root = std::max(std::sqrt(1.0 - q), 1e-3);
  out.z = p.z0 - p.rz * std::sqrt(1.0 - q);
  out.zx = p.rz * du / (p.ru * p.ru * root) / kWorld;
  out.zy = p.rz * dv / (p.rv * p.rv * root) / kWorld;
  return true;
}

SurfacePoint trace(const Scene& scene, double u, double v) {
  SurfacePoint best;
  best.id = 0;
  best.z = 9.0 - 5.0 * v;
  best.zx = 0.0;
  best.zy = -5.0 / kWorld;
  for (std::size_t k = 0; k < scene.primitives.size(); ++k) {
    SurfacePoint sp;
    if (hit(scene.primitives[k], u, v, sp) && sp.z < best.z) {
      sp.id = static_cast<int>(k) + 1;
      best = sp;
    }
  }
  return best;
}

Scene::Primitive random_surface(RandomState& rng) {
  Scene::Primitive p;
  for (double& a : p.albedo) a = rng.uniform(0.35, 0.95);
  p.fx = rng.uniform(1.0, 3.0);
  p.fy = rng.uniform(1.0, 3.0);
  p.px = rng.uniform(0.0, 2.0 * std::numbers::pi);
  p.py = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return p;
}

SceneSample render(const Scene& scene, int src_h, int src_w, const CropTransform& t) {
  const int h = t.out_h;
  const int w = t.out_w;
  SceneSample s;
  s.scene_seed = scene.seed;
  s.rgb = DenseMap(h, w, 3, Semantics::Rgb);
  s.depth = DenseMap(h, w, 1, Semantics::Depth);
  s.disparity = DenseMap(h, w, 1, Semantics::Disparity);
  s.normal = DenseMap(h, w, 3, Semantics::Normal);
  s.edge = DenseMap(h, w, 1, Semantics::Edge);
  s.surface.assign(static_cast<std::size_t>(h) * w, 0);
  const double ln = std::sqrt(0.4 * 0.4 + 0.5 * 0.5 + 1.0);
  const double light[3] = {0.4 / ln, -0.5 / ln, -1.0 / ln};
  std::vector<double> luma(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i) {
    const double sy = t.y0 + (i + 0.5) * t.win_h / h - 0.5;
    const double v = (sy + 0.5) / src_h;
    for (int j = 0; j < w; ++j) {
      const double sx = t.x0 + (j + 0.5) * t.win_w / w - 0.5;
      const double u = (sx + 0.5) / src_w;
      const SurfacePoint sp = trace(scene, u, v);
      const std::size_t p = static_cast<std::size_t>(i) * w + j;
      s.surface[p] = sp.id;
      const double depth = fl(std::clamp(sp.z, kMinDepth, kMaxDepth));
      s.depth.at(i, j) = depth;
      s.disparity.at(i, j) = 1.0 / depth;
      const double nl = std::sqrt(sp.zx * sp.zx + sp.zy * sp.zy + 1.0);
      const double n[3] = {sp.zx / nl, sp.zy / nl, -1.0 / nl};
      for (int c = 0; c < 3; ++c) s.normal.at(i, j, c) = n[c];
      const Scene::Primitive& mat = sp.id == 0 ? scene.ground : scene.primitives[sp.id - 1];
      const double X = kWorld * u;
      const double Y = kWorld * v;
      const double tex = 0.5 + 0.5 * std::sin(mat.fx * X + mat.px) * std::sin(mat.fy * Y + mat.py);
      const double shade =
          0.25 + 0.75 * std::max(0.0, n[0] * light[0] + n[1] * light[1] + n[2] * light[2]);
      double y = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double val = std::clamp(mat.albedo[c] * (0.55 + 0.45 * tex) * shade, 0.0, 1.0);
        s.rgb.at(i, j, c) = val;
        y += (c == 0 ? 0.299 : c == 1 ? 0.587 : 0.114) * val;
      }
      luma[p] = y;
    }
  }
  round_to_float(s.rgb);
  round_to_float(s.disparity);
  round_to_float(s.normal);
  auto L = [&](int i, int j) {
    return luma[static_cast<std::size_t>(std::clamp(i, 0, h - 1)) * w + std::clamp(j, 0, w - 1)];
  };
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double gx = 0.5 * (L(i, j + 1) - L(i, j - 1));
      const double gy = 0.5 * (L(i + 1, j) - L(i - 1, j));
      s.edge.at(i, j) = std::sqrt(gx * gx + gy * gy) > kEdgeThreshold ? 1.0 : 0.0;
    }
  }
  return s;
}

void check_frame(int h, int w) {
  if (h < 16 || w < 16) throw Error(ErrorKind::Config, "scene frames must be at least 16x16");
}

const char* const kKinds[] = {"rgb", "depth", "disp", "normal", "edge"};

}  // namespace

Scene Scene::generate(std::uint64_t seed, int complexity) {
  if (complexity < 0) throw Error(ErrorKind::Config, "complexity must be non-negative");
  RandomState rng(seed);
  Scene s;
  s.seed = seed;
  s.ground = random_surface(rng);
  for (int k = 0; k < complexity; ++k) {
    Primitive p = random_surface(rng);
    p.ellipsoid = rng.uniform() < 0.5;
    p.cu = rng.uniform(0.1, 0.9);
    p.cv = rng.uniform(0.1, 0.9);
    p.ru = rng.uniform(0.08, 0.25);
    p.rv = rng.uniform(0.08, 0.25);
    if (p.ellipsoid) {
      p.z0 = rng.uniform(3.0, 7.5);
      p.rz = rng.uniform(0.3, 1.2);
    } else {
      p.angle = rng.uniform(0.0, std::numbers::pi);
      p.z0 = rng.uniform(2.5, 7.0);
      p.gx = rng.uniform(-0.15, 0.15);
      p.gy = rng.uniform(-0.15, 0.15);
    }
    s.primitives.push_back(p);
  }
  return s;
}

SceneSample gen_scene(std::uint64_t seed, int h, int w, int complexity) {
  check_frame(h, w);
  return render(Scene::generate(seed, complexity), h, w, CropTransform::identity(h, w));
}

SceneSample gen_scene_window(std::uint64_t seed, int h, int w, int complexity,
                             const CropTransform& t) {
  check_frame(h, w);
  t.check();
  return render(Scene::generate(seed, complexity), h, w, t);
}

std::vector<std::uint8_t> encode_map(const DenseMap& map) {
  ByteWriter out;
  out.magic("DMAP");
  out.u32(kDenseMapVersion);
  out.u32(static_cast<std::uint32_t>(map.height()));
  out.u32(static_cast<std::uint32_t>(map.width()));
  out.u32(static_cast<std::uint32_t>(map.channels()));
  out.u8(static_cast<std::uint8_t>(map.semantics()));
  out.u8(0);
  const int c = map.channels();
  for (int p = 0; p < map.pixels(); ++p) {
    const bool ok = map.valid(p);
    for (int k = 0; k < c; ++k) {
      out.f32(ok ? static_cast<float>(map.values()[static_cast<std::size_t>(p) * c + k])
                 : std::numeric_limits<float>::quiet_NaN());
    }
  }
  out.crc_trailer();
  return out.buffer();
}

DenseMap decode_map(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes);
  if (!in.expect_magic("DMAP")) throw Error(ErrorKind::Format, "not a dense-map file (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kDenseMapVersion) {
    throw Error(ErrorKind::Version, "unsupported dense-map version " + std::to_string(version));
  }
  const std::uint32_t h = in.u32();
  const std::uint32_t w = in.u32();
  const std::uint32_t c = in.u32();
  const Semantics sem = semantics_from_code(in.u8());
  const std::uint8_t dtype = in.u8();
  if (dtype != 0) throw Error(ErrorKind::Dtype, "unsupported dtype code " + std::to_string(dtype));
  const std::uint64_t count = static_cast<std::uint64_t>(h) * w * c;
  if (count * 4 > in.remaining()) {
    throw Error(ErrorKind::Truncated, "payload shorter than " + std::to_string(h) + "x" +
                                          std::to_string(w) + "x" + std::to_string(c));
  }
  DenseMap m(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c), sem);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 1);
  for (std::size_t p = 0; p < mask.size(); ++p) {
    for (std::uint32_t k = 0; k < c; ++k) {
      const float v = in.f32();
      if (std::isnan(v)) {
        mask[p] = 0;
      } else {
        m.values()[p * c + k] = v;
      }
    }
  }
  in.finish_with_crc();
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) {
      for (std::uint32_t k = 0; k < c; ++k) m.values()[p * c + k] = 0.0;
    }
  }
  m.set_mask(std::move(mask));
  return m;
}

void write_map(const DenseMap& map, const std::filesystem::path& path) {
  write_file(path, encode_map(map));
}

DenseMap read_map(const std::filesystem::path& path) { return decode_map(read_file(path)); }

std::vector<SampleId> DatasetManifest::split(const std::string& name) const {
  std::vector<SampleId> out;
  for (const SampleId& id : ids) {
    if (id.split == name) out.push_back(id);
  }
  return out;
}

std::filesystem::path DatasetManifest::file(const SampleId& id, const std::string& kind) const {
  return root / id.split / (std::to_string(id.scene_seed) + "_" + kind + ".dmap");
}

DatasetManifest build_dataset(const SceneParams& params, int n_train, int n_val,
                              const std::filesystem::path& root, bool force) {
  check_frame(params.size, params.size);
  if (params.complexity < 0) throw Error(ErrorKind::Config, "complexity must be non-negative");
  if (n_train < 0 || n_val < 0) throw Error(ErrorKind::Config, "split sizes must be non-negative");
  if (static_cast<std::uint64_t>(n_train) > kValSeedOffset) {
    throw Error(ErrorKind::Config, "too many training scenes for disjoint seed ranges");
  }
  std::error_code ec;
  if (std::filesystem::exists(root) && !std::filesystem::is_empty(root, ec) && !force) {
    throw Error(ErrorKind::Collision,
                root.string() + " exists and is not empty (use --force to overwrite)");
  }
  DatasetManifest m;
  m.root = root;
  m.params = params;
  for (int i = 0; i < n_train; ++i) m.ids.push_back({"train", params.seed + i});
  for (int i = 0; i < n_val; ++i) m.ids.push_back({"val", params.seed + kValSeedOffset + i});
  try {
    std::filesystem::create_directories(root / "train");
    std::filesystem::create_directories(root / "val");
  } catch (const std::filesystem::filesystem_error& e) {
    throw Error(ErrorKind::Io, e.what());
  }
  for (const SampleId& id : m.ids) {
    const SceneSample s = gen_scene(id.scene_seed, params.size, params.size, params.complexity);
    write_map(s.rgb, m.file(id, "rgb"));
    write_map(s.depth, m.file(id, "depth"));
    write_map(s.disparity, m.file(id, "disp"));
    write_map(s.normal, m.file(id, "normal"));
    write_map(s.edge, m.file(id, "edge"));
  }
  write_manifest(m);
  return m;
}

void write_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "format_version=" << m.format_version << '\n'
     << "generator=orthographic-scenes\n"
     << "size=" << m.params.size << '\n'
     << "complexity=" << m.params.complexity << '\n'
     << "seed=" << m.params.seed << '\n'
     << "n_train=" << m.split("train").size() << '\n'
     << "n_val=" << m.split("val").size() << '\n';
  for (const SampleId& id : m.ids) os << id.name() << '\n';
  const std::string text = os.str();
  const std::filesystem::path lock_path = m.root / "manifest.lock";
  const int fd = ::open(lock_path.c_str(), O_RDWR | O_CREAT, 0644);
  if (fd < 0) throw Error(ErrorKind::Io, "cannot open " + lock_path.string());
  if (::flock(fd, LOCK_EX) != 0) {
    ::close(fd);
    throw Error(ErrorKind::Io, "cannot lock " + lock_path.string());
  }
  try {
    write_file(m.root / "manifest.txt",
               std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  } catch (...) {
    ::flock(fd, LOCK_UN);
    ::close(fd);
    throw;
  }
  ::flock(fd, LOCK_UN);
  ::close(fd);
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
  const std::filesystem::path path = root / "manifest.txt";
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  DatasetManifest m;
  m.root = root;
  std::map<std::string, std::string> header;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq != std::string::npos) {
      header[line.substr(0, eq)] = line.substr(eq + 1);
      continue;
    }
    const auto slash = line.find('/');
    if (slash == std::string::npos) throw Error(ErrorKind::Format, "bad manifest id: " + line);
    SampleId id;
    id.split = line.substr(0, slash);
    try {
      id.scene_seed = std::stoull(line.substr(slash + 1));
    } catch (const std::exception&) {
      throw Error(ErrorKind::Format, "bad manifest id: " + line);
    }
    if (std::find(m.ids.begin(), m.ids.end(), id) != m.ids.end()) {
      throw Error(ErrorKind::Format, "duplicate manifest id " + line);
    }
    m.ids.push_back(id);
  }
  auto need = [&](const char* key) {
    const auto it = header.find(key);
    if (it == header.end()) throw Error(ErrorKind::Format, std::string("manifest lacks ") + key);
    return it->second;
  };
  try {
    m.format_version = std::stoi(need("format_version"));
    m.params.size = std::stoi(need("size"));
    m.params.complexity = std::stoi(need("complexity"));
    m.params.seed = std::stoull(need("seed"));
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw Error(ErrorKind::Format, "malformed manifest header in " + path.string());
  }
  if (m.format_version != kManifestVersion) {
    throw Error(ErrorKind::Version, "unsupported manifest version " + std::to_string(m.format_version));
  }
  return m;
}

SceneSample load_sample(const DatasetManifest& manifest, const SampleId& id) {
  SceneSample s;
  s.scene_seed = id.scene_seed;
  s.rgb = read_map(manifest.file(id, kKinds[0]));
  s.depth = read_map(manifest.file(id, kKinds[1]));
  s.disparity = read_map(manifest.file(id, kKinds[2]));
  s.normal = read_map(manifest.file(id, kKinds[3]));
  s.edge = read_map(manifest.file(id, kKinds[4]));
  return s;
}

std::vector<SceneSample> load_split(const DatasetManifest& manifest, const std::string& split) {
  std::vector<SceneSample> out;
  for (const SampleId& id : manifest.split(split)) out.push_back(load_sample(manifest, id));
  return out;
}

RgbOnlyLoader::RgbOnlyLoader(const DatasetManifest& manifest, const std::string& split) {
  for (const SampleId& id : manifest.split(split)) {
    images_.push_back(read_map(manifest.file(id, "rgb")));
  }
}

}  // namespace eqreg
