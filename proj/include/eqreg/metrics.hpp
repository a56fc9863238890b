#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eqreg/dense_map.hpp"
#include "eqreg/equivariance.hpp"
#include "eqreg/geometry.hpp"

namespace eqreg {

/// Disparity floor used before inverting to depth.
inline constexpr double kDisparityFloor = 1e-6;

/// Extra per-pixel selection on top of the maps' own validity; empty selects all.
using PixelMask = std::span<const std::uint8_t>;

struct AlignmentCoeffs {
  double scale = 1.0;
  double offset = 0.0;
  bool degenerate = false;  // constant prediction: scale 1, offset mean(gt - pred)
  int pixels = 0;
};

/// Least-squares (scale, offset) minimising sum (s * pred + o - ref)^2 over
/// pixels valid in both maps and in `mask`. Throws EmptyMetric below 2 pixels.
AlignmentCoeffs lsq_align(const DenseMap& pred, const DenseMap& ref, PixelMask mask = {});
DenseMap apply_alignment(const DenseMap& pred, const AlignmentCoeffs& a);

/// 1 / max(disparity, kDisparityFloor), semantics Depth.
DenseMap disparity_to_depth(const DenseMap& disparity);

double absrel(const DenseMap& pred_depth, const DenseMap& gt_depth, PixelMask mask = {});
/// Percentage of pixels with max(pred/gt, gt/pred) strictly above `threshold`.
double delta_gt(const DenseMap& pred_depth, const DenseMap& gt_depth, double threshold = 1.25,
                PixelMask mask = {});

struct AngularStats {
  double mean_deg = 0.0;
  double median_deg = 0.0;
  double pct_below = 0.0;  // percentage of pixels with error below 11.25 degrees
  int pixels = 0;
  int excluded_zero = 0;  // zero-length normals dropped from the mask
};
AngularStats angular_error(const DenseMap& pred_normal, const DenseMap& gt_normal,
                           PixelMask mask = {});

double l1_error(const DenseMap& pred, const DenseMap& gt, PixelMask mask = {});

/// Registers f(t(x)) back into the source frame (unit window, K = 1).
DenseMap register_prediction(const PredictorFn& f, const DenseMap& x, const CropTransform& t);

/// AbsRel between the registered predictions of two crops. The first is
/// aligned to the second in disparity space on their common support, then
/// both are inverted to depth. Throws Overlap when nothing is shared.
double eqerr_depth(const PredictorFn& f, const DenseMap& x, const CropTransform& t1,
                   const CropTransform& t2);

struct EqErrPair {
  double absrel = 0.0;
  DenseMap depth_a;  // first crop, aligned to the second, on the shared support
  DenseMap depth_b;
};
EqErrPair eqerr_pair(const PredictorFn& f, const DenseMap& x, const CropTransform& t1,
                     const CropTransform& t2);

/// The crop pair drawn for pair `index` of eqerr_distribution (jitter off).
std::pair<CropTransform, CropTransform> eqerr_transforms(const CropSampler& sampler, int h, int w,
                                                         std::uint64_t seed, int index);

struct EqErrStats {
  int n_pairs = 0;
  int skipped = 0;  // pairs without overlap
  double mean = 0.0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::optional<double> reference_absrel;  // full-frame prediction vs ground truth
  std::vector<double> samples;
};

/// Linear-interpolated quantile of sorted data, q in [0, 1].
double quantile_sorted(std::span<const double> sorted, double q);

/// Pair i draws both crops from RandomState::substream(seed, i), jitter off.
EqErrStats eqerr_distribution(const PredictorFn& f, const DenseMap& x, const CropSampler& sampler,
                              int n_pairs, std::uint64_t seed,
                              const DenseMap* gt_depth = nullptr);

struct MetricRow {
  std::string run_id;
  std::int64_t step = 0;
  std::string metric;
  double value = 0.0;
};

inline constexpr const char* kMetricsHeader = "run_id,step,metric_name,value";

/// Values are printed with 17 significant digits so files round-trip.
std::string format_metric_row(const MetricRow& row);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRow> rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace eqreg
