#include "eqreg/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "eqreg/error.hpp"

namespace eqreg {
namespace {

// Up to two bilinear taps along one axis. A tap with zero weight is not part
// of the support, so exact integer sampling never touches the neighbour.
struct AxisTaps {
  std::array<int, 2> index{0, 0};
  std::array<double, 2> weight{0.0, 0.0};
  int count = 0;
  bool in_bounds = true;
};

int wrap_index(int i, int n) {
  const int r = i % n;
  return r < 0 ? r + n : r;
}

std::vector<AxisTaps> axis_taps(double origin, double window, int out, int src,
                                Boundary boundary) {
  std::vector<AxisTaps> taps(static_cast<std::size_t>(out));
  const double step = window / out;
  for (int i = 0; i < out; ++i) {
    const double s = origin + (i + 0.5) * step - 0.5;
    const double fl = std::floor(s);
    const double frac = s - fl;
    const int base = static_cast<int>(fl);
    AxisTaps& t = taps[i];
    const std::array<double, 2> w{1.0 - frac, frac};
    for (int k = 0; k < 2; ++k) {
      if (w[k] == 0.0) continue;
      int idx = base + k;
      if (boundary == Boundary::Wrap) {
        idx = wrap_index(idx, src);
      } else if (idx < 0 || idx >= src) {
        t.in_bounds = false;
        continue;
      }
      t.index[t.count] = idx;
      t.weight[t.count] = w[k];
      ++t.count;
    }
  }
  return taps;
}

void check_window_map(const WeightMap& window, int h, int w) {
  if (window.height() != h || window.width() != w || window.channels() != 1) {
    throw Error(ErrorKind::Dimension, "window " + std::to_string(window.height()) + "x" +
                                          std::to_string(window.width()) +
                                          " does not match crop " + std::to_string(h) + "x" +
                                          std::to_string(w));
  }
}

double luma(const double* p) { return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]; }

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

CropTransform CropTransform::identity(int h, int w) {
  CropTransform t;
  t.win_h = h;
  t.win_w = w;
  t.out_h = h;
  t.out_w = w;
  t.src_h = h;
  t.src_w = w;
  return t;
}

CropTransform CropTransform::translation(int h, int w, int dy, int dx, Boundary boundary) {
  CropTransform t = identity(h, w);
  t.y0 = dy;
  t.x0 = dx;
  t.boundary = boundary;
  return t;
}

bool CropTransform::is_integer_translation() const {
  return win_h == out_h && win_w == out_w && y0 == std::floor(y0) && x0 == std::floor(x0);
}

CropTransform CropTransform::downscaled(int level) const {
  if (level == 0) return *this;
  const int f = 1 << level;
  if (out_h % f != 0 || out_w % f != 0 || src_h % f != 0 || src_w % f != 0) {
    throw Error(ErrorKind::Dimension,
                "transform frames not divisible by " + std::to_string(f));
  }
  CropTransform t = *this;
  t.y0 /= f;
  t.x0 /= f;
  t.win_h /= f;
  t.win_w /= f;
  t.out_h /= f;
  t.out_w /= f;
  t.src_h /= f;
  t.src_w /= f;
  return t;
}

void CropTransform::check() const {
  if (!(win_h > 0.0) || !(win_w > 0.0) || out_h < 1 || out_w < 1 ||
      !std::isfinite(y0) || !std::isfinite(x0)) {
    throw Error(ErrorKind::Invariant, "crop transform needs positive window and output");
  }
}

void CropSampler::check() const {
  if (!(pad_frac >= 0.0 && pad_frac < 1.0)) {
    throw Error(ErrorKind::Constraint, "pad_frac must lie in [0, 1)");
  }
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0 + pad_frac)) {
    throw Error(ErrorKind::Constraint, "scale bounds must satisfy 0 < lo <= hi <= 1 + pad");
  }
  if (!(aspect_lo > 0.0 && aspect_lo <= aspect_hi)) {
    throw Error(ErrorKind::Constraint, "aspect bounds must satisfy 0 < lo <= hi");
  }
  if (out_h < 1 || out_w < 1) throw Error(ErrorKind::Constraint, "sampler output size");
}

double window_overhang(const CropTransform& t, int src_h, int src_w, PadMode mode) {
  const double top = std::max(0.0, -t.y0);
  const double bottom = std::max(0.0, t.y0 + t.win_h - src_h);
  const double left = std::max(0.0, -t.x0);
  const double right = std::max(0.0, t.x0 + t.win_w - src_w);
  if (mode == PadMode::Total) return std::max(top + bottom, left + right);
  return std::max({top, bottom, left, right});
}

CropTransform sample_transform(const CropSampler& sampler, int src_h, int src_w,
                               RandomState& rng) {
  sampler.check();
  if (src_h < 8 || src_w < 8) {
    throw Error(ErrorKind::Dimension, "source must be at least 8x8");
  }
  const double area = static_cast<double>(src_h) * src_w;
  const double log_lo = std::log(sampler.aspect_lo);
  const double log_hi = std::log(sampler.aspect_hi);
  std::string failing = "pad_frac";
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double s = rng.uniform(sampler.scale_lo, sampler.scale_hi);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const double win_w = std::sqrt(s * area * aspect);
    const double win_h = std::sqrt(s * area / aspect);
    const double pad = sampler.pad_frac * std::min(win_h, win_w);
    // Per-side: each edge may overhang by `pad`. Total: both edges of an
    // axis share `pad`, which only widens the slack by `pad`, not 2*pad.
    const double slack = sampler.pad_mode == PadMode::PerSide ? 2.0 * pad : pad;
    const double free_h = src_h + slack - win_h;
    const double free_w = src_w + slack - win_w;
    const double u = rng.uniform();
    const double v = rng.uniform();
    if (free_h < 0.0) {
      failing = "pad_frac (window height exceeds padded source height)";
      continue;
    }
    if (free_w < 0.0) {
      failing = "pad_frac (window width exceeds padded source width)";
      continue;
    }
    CropTransform t;
    t.win_h = win_h;
    t.win_w = win_w;
    t.out_h = sampler.out_h;
    t.out_w = sampler.out_w;
    t.src_h = src_h;
    t.src_w = src_w;
    if (sampler.pad_mode == PadMode::PerSide) {
      t.y0 = -pad + u * free_h;
      t.x0 = -pad + v * free_w;
    } else {
      // Summed overhang per axis stays within pad: a window larger than the
      // source spends (win - src) of the budget whatever its position.
      const double spare_h = pad - std::max(0.0, win_h - src_h);
      const double spare_w = pad - std::max(0.0, win_w - src_w);
      const double lo_y = std::min(0.0, src_h - win_h) - spare_h;
      const double hi_y = std::max(0.0, src_h - win_h) + spare_h;
      const double lo_x = std::min(0.0, src_w - win_w) - spare_w;
      const double hi_x = std::max(0.0, src_w - win_w) + spare_w;
      t.y0 = lo_y + u * (hi_y - lo_y);
      t.x0 = lo_x + v * (hi_x - lo_x);
    }
    if (sampler.jitter.enabled()) t.jitter = sample_jitter(sampler.jitter, rng);
    return t;
  }
  throw Error(ErrorKind::Constraint,
              "no window satisfies the sampler after 100 attempts; failing bound: " + failing);
}

DenseMap apply(const CropTransform& t, const DenseMap& src) {
  t.check();
  const int c = src.channels();
  const auto ty = axis_taps(t.y0, t.win_h, t.out_h, src.height(), t.boundary);
  const auto tx = axis_taps(t.x0, t.win_w, t.out_w, src.width(), t.boundary);
  DenseMap out(t.out_h, t.out_w, c, src.semantics());
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(t.out_h) * t.out_w, 1);
  bool any_invalid = false;
  for (int i = 0; i < t.out_h; ++i) {
    const AxisTaps& ay = ty[i];
    for (int j = 0; j < t.out_w; ++j) {
      const AxisTaps& ax = tx[j];
      bool ok = ay.in_bounds && ax.in_bounds;
      double* dst = out.pixel(i, j);
      for (int a = 0; a < ay.count; ++a) {
        for (int b = 0; b < ax.count; ++b) {
          const double w = ay.weight[a] * ax.weight[b];
          const int sy = ay.index[a];
          const int sx = ax.index[b];
          if (!src.valid(sy, sx)) ok = false;
          const double* s = src.pixel(sy, sx);
          for (int k = 0; k < c; ++k) dst[k] += w * s[k];
        }
      }
      if (!ok) {
        mask[static_cast<std::size_t>(i) * t.out_w + j] = 0;
        any_invalid = true;
      }
    }
  }
  if (any_invalid) out.set_mask(std::move(mask));
  return out;
}

SplatResult inverse_splat(const CropTransform& t, const DenseMap& crop,
                          const WeightMap& window, int src_h, int src_w) {
  t.check();
  if (crop.height() != t.out_h || crop.width() != t.out_w) {
    throw Error(ErrorKind::Dimension, "crop does not match transform output size");
  }
  check_window_map(window, crop.height(), crop.width());
  const int c = crop.channels();
  const auto ty = axis_taps(t.y0, t.win_h, t.out_h, src_h, t.boundary);
  const auto tx = axis_taps(t.x0, t.win_w, t.out_w, src_w, t.boundary);
  SplatResult r{DenseMap(src_h, src_w, c, crop.semantics()),
                DenseMap(src_h, src_w, 1, Semantics::Weight)};
  for (int i = 0; i < t.out_h; ++i) {
    const AxisTaps& ay = ty[i];
    for (int j = 0; j < t.out_w; ++j) {
      const AxisTaps& ax = tx[j];
      const double wq = window.at(i, j);
      if (wq == 0.0) continue;
      const double* s = crop.pixel(i, j);
      for (int a = 0; a < ay.count; ++a) {
        for (int b = 0; b < ax.count; ++b) {
          const double w = wq * ay.weight[a] * ax.weight[b];
          double* dst = r.accum.pixel(ay.index[a], ax.index[b]);
          for (int k = 0; k < c; ++k) dst[k] += w * s[k];
          r.weights.at(ay.index[a], ax.index[b]) += w;
        }
      }
    }
  }
  return r;
}

CropTransform compose(const CropTransform& outer, const CropTransform& inner) {
  outer.check();
  inner.check();
  if (outer.src_h != 0 && outer.src_w != 0 &&
      (outer.src_h != inner.out_h || outer.src_w != inner.out_w)) {
    throw Error(ErrorKind::Dimension,
                "outer source frame " + std::to_string(outer.src_h) + "x" +
                    std::to_string(outer.src_w) + " != inner output " +
                    std::to_string(inner.out_h) + "x" + std::to_string(inner.out_w));
  }
  if (outer.boundary != inner.boundary) {
    throw Error(ErrorKind::Dimension, "cannot compose transforms with different boundaries");
  }
  CropTransform t;
  const double sy = inner.scale_y();
  const double sx = inner.scale_x();
  t.y0 = inner.y0 + outer.y0 * sy;
  t.x0 = inner.x0 + outer.x0 * sx;
  t.win_h = outer.win_h * sy;
  t.win_w = outer.win_w * sx;
  t.out_h = outer.out_h;
  t.out_w = outer.out_w;
  t.src_h = inner.src_h;
  t.src_w = inner.src_w;
  t.boundary = inner.boundary;
  if (t.boundary == Boundary::Wrap && inner.src_h > 0 && inner.src_w > 0) {
    t.y0 = std::fmod(t.y0, inner.src_h);
    t.x0 = std::fmod(t.x0, inner.src_w);
    if (t.y0 < 0) t.y0 += inner.src_h;
    if (t.x0 < 0) t.x0 += inner.src_w;
  }
  t.jitter = outer.jitter ? outer.jitter : inner.jitter;
  return t;
}

WeightMap cosine_window(int out_h, int out_w, double margin_frac) {
  if (!(margin_frac >= 0.0 && margin_frac <= 0.5)) {
    throw Error(ErrorKind::Constraint, "margin_frac must lie in [0, 0.5]");
  }
  auto profile = [margin_frac](int n) {
    std::vector<double> p(static_cast<std::size_t>(n), 1.0);
    const double margin = margin_frac * n;
    if (margin <= 0.0) return p;
    for (int i = 0; i < n; ++i) {
      const double d = std::min(i + 0.5, n - (i + 0.5));
      if (d < margin) p[i] = 0.5 * (1.0 - std::cos(std::numbers::pi * d / margin));
    }
    return p;
  };
  const auto py = profile(out_h);
  const auto px = profile(out_w);
  WeightMap w(out_h, out_w, 1, Semantics::Weight);
  for (int i = 0; i < out_h; ++i) {
    for (int j = 0; j < out_w; ++j) w.at(i, j) = py[i] * px[j];
  }
  return w;
}

ColorJitterParams sample_jitter(const JitterRanges& r, RandomState& rng) {
  ColorJitterParams p;
  p.brightness = rng.uniform(std::max(0.0, 1.0 - r.brightness), 1.0 + r.brightness);
  p.contrast = rng.uniform(std::max(0.0, 1.0 - r.contrast), 1.0 + r.contrast);
  p.saturation = rng.uniform(std::max(0.0, 1.0 - r.saturation), 1.0 + r.saturation);
  p.hue = rng.uniform(-r.hue, r.hue);
  return p;
}

DenseMap apply_jitter(const DenseMap& rgb, const ColorJitterParams& params) {
  if (rgb.semantics() != Semantics::Rgb || rgb.channels() != 3) {
    throw Error(ErrorKind::Semantics, "color jitter needs a 3-channel rgb map, got " +
                                          std::string(to_string(rgb.semantics())));
  }
  DenseMap out = rgb;
  const int n = out.pixels();
  double* v = out.data();
  if (params.brightness != 1.0) {
    for (std::size_t k = 0; k < out.size(); ++k) v[k] = clamp01(v[k] * params.brightness);
  }
  if (params.contrast != 1.0) {
    double mean = 0.0;
    for (int p = 0; p < n; ++p) mean += luma(v + 3 * p);
    mean /= std::max(n, 1);
    for (std::size_t k = 0; k < out.size(); ++k) {
      v[k] = clamp01((v[k] - mean) * params.contrast + mean);
    }
  }
  if (params.saturation != 1.0) {
    for (int p = 0; p < n; ++p) {
      double* px = v + 3 * p;
      const double l = luma(px);
      for (int k = 0; k < 3; ++k) px[k] = clamp01(l + (px[k] - l) * params.saturation);
    }
  }
  if (params.hue != 0.0) {
    const double a = 2.0 * std::numbers::pi * params.hue;
    const double ca = std::cos(a);
    const double sa = std::sin(a);
    for (int p = 0; p < n; ++p) {
      double* px = v + 3 * p;
      const double y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
      const double i0 = 0.596 * px[0] - 0.274 * px[1] - 0.322 * px[2];
      const double q0 = 0.211 * px[0] - 0.523 * px[1] + 0.312 * px[2];
      const double i1 = ca * i0 - sa * q0;
      const double q1 = sa * i0 + ca * q0;
      px[0] = clamp01(y + 0.956 * i1 + 0.621 * q1);
      px[1] = clamp01(y - 0.272 * i1 - 0.647 * q1);
      px[2] = clamp01(y - 1.106 * i1 + 1.703 * q1);
    }
  }
  return out;
}

DenseMap color_jitter(const DenseMap& rgb, const JitterRanges& ranges, RandomState& rng) {
  return apply_jitter(rgb, sample_jitter(ranges, rng));
}

}  // namespace eqreg
