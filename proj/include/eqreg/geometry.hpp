#pragma once

#include <optional>
#include <utility>

#include "eqreg/dense_map.hpp"
#include "eqreg/random.hpp"

namespace eqreg {

/// Photometric factors applied to an RGB crop (input side only).
struct ColorJitterParams {
  double brightness = 1.0;  // multiplicative
  double contrast = 1.0;    // about the per-image mean luma
  double saturation = 1.0;  // blend toward per-pixel luma
  double hue = 0.0;         // fraction of a full turn in the YIQ chroma plane
};

/// Ranges from which ColorJitterParams are drawn; 0 disables a component.
struct JitterRanges {
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;

  bool enabled() const {
    return brightness > 0 || contrast > 0 || saturation > 0 || hue > 0;
  }
};

enum class Boundary { Zero, Wrap };

/// One crop-and-resize group element: a continuous source window resampled
/// onto an out_h x out_w grid.
///
/// Output pixel (i, j) reads source index coordinate
///   (y0 + (i + 0.5) * win_h / out_h - 0.5,  x0 + (j + 0.5) * win_w / out_w - 0.5)
/// with bilinear interpolation. Source dimensions are optional (0 = unknown)
/// and only used for frame checks in compose().
struct CropTransform {
  double y0 = 0.0;
  double x0 = 0.0;
  double win_h = 1.0;
  double win_w = 1.0;
  int out_h = 1;
  int out_w = 1;
  int src_h = 0;
  int src_w = 0;
  Boundary boundary = Boundary::Zero;
  std::optional<ColorJitterParams> jitter;

  static CropTransform identity(int h, int w);
  /// Unit-scale integer translation: output(i, j) = source(i + dy, j + dx).
  static CropTransform translation(int h, int w, int dy, int dx,
                                   Boundary boundary = Boundary::Zero);

  double scale_y() const { return win_h / out_h; }
  double scale_x() const { return win_w / out_w; }
  bool is_integer_translation() const;
  /// Same window expressed on a grid downsampled by 2^level in both frames.
  CropTransform downscaled(int level) const;
  void check() const;
};

enum class PadMode { PerSide, Total };

/// Distribution over crop transforms.
struct CropSampler {
  double scale_lo = 0.4;
  double scale_hi = 1.0;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;
  double pad_frac = 0.2;
  PadMode pad_mode = PadMode::PerSide;
  int out_h = 64;
  int out_w = 64;
  JitterRanges jitter;

  void check() const;
};

/// Draws a window satisfying every sampler bound (rejection, 100 attempts).
CropTransform sample_transform(const CropSampler& sampler, int src_h, int src_w,
                               RandomState& rng);

/// Largest distance the window reaches past the source image on any side,
/// per side or summed per axis depending on `mode`, in source pixels.
double window_overhang(const CropTransform& t, int src_h, int src_w, PadMode mode);

/// Bilinear gather; out-of-bounds reads are 0 and mark the pixel invalid.
DenseMap apply(const CropTransform& t, const DenseMap& src);

struct SplatResult {
  DenseMap accum;
  DenseMap weights;
};

/// Exact transpose of apply(): each crop pixel's window-weighted value is
/// scattered back onto the source grid with the bilinear gather weights.
SplatResult inverse_splat(const CropTransform& t, const DenseMap& crop,
                          const WeightMap& window, int src_h, int src_w);

/// compose(outer, inner) reads the source through inner, then outer.
CropTransform compose(const CropTransform& outer, const CropTransform& inner);

/// Separable raised-cosine taper: 1 inside, 0.5 * (1 - cos(pi * d / m)) within
/// distance m = margin_frac * extent of an edge (d measured at pixel centres).
WeightMap cosine_window(int out_h, int out_w, double margin_frac);

ColorJitterParams sample_jitter(const JitterRanges& ranges, RandomState& rng);
/// brightness -> contrast -> saturation -> hue, clamping to [0,1] after each.
DenseMap apply_jitter(const DenseMap& rgb, const ColorJitterParams& params);
DenseMap color_jitter(const DenseMap& rgb, const JitterRanges& ranges, RandomState& rng);

}  // namespace eqreg
