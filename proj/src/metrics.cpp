#include "eqreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "eqreg/error.hpp"

namespace eqreg {
namespace {

bool selected(const DenseMap& a, const DenseMap& b, PixelMask mask, int p) {
  return a.valid(p) && b.valid(p) && (mask.empty() || mask[static_cast<std::size_t>(p)] != 0);
}

void check_pair(const DenseMap& a, const DenseMap& b, PixelMask mask, const char* what) {
  if (a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels()) {
    throw Error(ErrorKind::Dimension, std::string(what) + ": maps differ in shape");
  }
  if (!mask.empty() && mask.size() != static_cast<std::size_t>(a.pixels())) {
    throw Error(ErrorKind::Dimension, std::string(what) + ": mask size mismatch");
  }
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

AlignmentCoeffs lsq_align(const DenseMap& pred, const DenseMap& ref, PixelMask mask) {
  check_pair(pred, ref, mask, "lsq_align");
  if (pred.channels() != 1) throw Error(ErrorKind::Dimension, "lsq_align needs one channel");
  // Centred sums keep the normal equations well conditioned.
  double sp = 0.0;
  double sr = 0.0;
  int n = 0;
  for (int p = 0; p < pred.pixels(); ++p) {
    if (!selected(pred, ref, mask, p)) continue;
    sp += pred.values()[p];
    sr += ref.values()[p];
    ++n;
  }
  if (n < 2) throw Error(ErrorKind::EmptyMetric, "lsq_align needs at least 2 valid pixels");
  const double mp = sp / n;
  const double mr = sr / n;
  double cov = 0.0;
  double var = 0.0;
  for (int p = 0; p < pred.pixels(); ++p) {
    if (!selected(pred, ref, mask, p)) continue;
    const double dp = pred.values()[p] - mp;
    cov += dp * (ref.values()[p] - mr);
    var += dp * dp;
  }
  AlignmentCoeffs a;
  a.pixels = n;
  if (var <= 1e-12 * std::max(1.0, mp * mp) * n) {
    a.degenerate = true;
    a.scale = 1.0;
    a.offset = mr - mp;
    return a;
  }
  a.scale = cov / var;
  a.offset = mr - a.scale * mp;
  return a;
}

DenseMap apply_alignment(const DenseMap& pred, const AlignmentCoeffs& a) {
  DenseMap out = pred;
  for (double& v : out.values()) v = a.scale * v + a.offset;
  return out;
}

DenseMap disparity_to_depth(const DenseMap& disparity) {
  DenseMap d = disparity;
  d.set_semantics(Semantics::Depth);
  for (double& v : d.values()) v = 1.0 / std::max(v, kDisparityFloor);
  return d;
}

double absrel(const DenseMap& pred_depth, const DenseMap& gt_depth, PixelMask mask) {
  check_pair(pred_depth, gt_depth, mask, "absrel");
  double s = 0.0;
  int n = 0;
  for (int p = 0; p < gt_depth.pixels(); ++p) {
    if (!selected(pred_depth, gt_depth, mask, p)) continue;
    const double g = gt_depth.values()[p];
    if (!(g > 0.0)) throw Error(ErrorKind::Invariant, "absrel: ground-truth depth must be positive");
    s += std::abs(pred_depth.values()[p] - g) / g;
    ++n;
  }
  if (n == 0) throw Error(ErrorKind::EmptyMetric, "absrel: no valid pixels");
  return s / n;
}

double delta_gt(const DenseMap& pred_depth, const DenseMap& gt_depth, double threshold,
                PixelMask mask) {
  check_pair(pred_depth, gt_depth, mask, "delta_gt");
  int over = 0;
  int n = 0;
  for (int p = 0; p < gt_depth.pixels(); ++p) {
    if (!selected(pred_depth, gt_depth, mask, p)) continue;
    const double g = gt_depth.values()[p];
    const double q = pred_depth.values()[p];
    if (!(g > 0.0) || !(q > 0.0)) {
      throw Error(ErrorKind::Invariant, "delta_gt: depths must be positive");
    }
    if (std::max(q / g, g / q) > threshold) ++over;
    ++n;
  }
  if (n == 0) throw Error(ErrorKind::EmptyMetric, "delta_gt: no valid pixels");
  return 100.0 * over / n;
}

AngularStats angular_error(const DenseMap& pred, const DenseMap& gt, PixelMask mask) {
  check_pair(pred, gt, mask, "angular_error");
  if (pred.channels() != 3) throw Error(ErrorKind::Dimension, "angular_error needs 3 channels");
  AngularStats st;
  std::vector<double> angles;
  angles.reserve(static_cast<std::size_t>(pred.pixels()));
  for (int p = 0; p < pred.pixels(); ++p) {
    if (!selected(pred, gt, mask, p)) continue;
    const double* a = pred.data() + 3 * static_cast<std::size_t>(p);
    const double* b = gt.data() + 3 * static_cast<std::size_t>(p);
    const double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    const double nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
    if (na == 0.0 || nb == 0.0) {
      ++st.excluded_zero;
      continue;
    }
    const double c = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    angles.push_back(std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / std::numbers::pi);
  }
  if (angles.empty()) throw Error(ErrorKind::EmptyMetric, "angular_error: no valid pixels");
  double s = 0.0;
  int below = 0;
  for (double a : angles) {
    s += a;
    if (a < 11.25) ++below;
  }
  st.pixels = static_cast<int>(angles.size());
  st.mean_deg = s / st.pixels;
  st.pct_below = 100.0 * below / st.pixels;
  std::sort(angles.begin(), angles.end());
  st.median_deg = quantile_sorted(angles, 0.5);
  return st;
}

double l1_error(const DenseMap& pred, const DenseMap& gt, PixelMask mask) {
  check_pair(pred, gt, mask, "l1_error");
  const int c = pred.channels();
  double s = 0.0;
  long n = 0;
  for (int p = 0; p < pred.pixels(); ++p) {
    if (!selected(pred, gt, mask, p)) continue;
    for (int k = 0; k < c; ++k) {
      const std::size_t i = static_cast<std::size_t>(p) * c + k;
      s += std::abs(pred.values()[i] - gt.values()[i]);
      ++n;
    }
  }
  if (n == 0) throw Error(ErrorKind::EmptyMetric, "l1_error: no valid pixels");
  return s / static_cast<double>(n);
}

DenseMap register_prediction(const PredictorFn& f, const DenseMap& x, const CropTransform& t) {
  const WeightMap unit(t.out_h, t.out_w, 1, Semantics::Weight, 1.0);
  return predict_crops(f, x, std::span(&t, 1), unit).average.mean;
}

EqErrPair eqerr_pair(const PredictorFn& f, const DenseMap& x, const CropTransform& t1,
                     const CropTransform& t2) {
  DenseMap p1;
  DenseMap p2;
  try {
    p1 = register_prediction(f, x, t1);
    p2 = register_prediction(f, x, t2);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::DegenerateCoverage) {
      throw Error(ErrorKind::Overlap, "crop covers no source pixel");
    }
    throw;
  }
  const std::vector<std::uint8_t> overlap = joint_mask(p1, p2);
  int shared = 0;
  for (int p = 0; p < p1.pixels(); ++p) shared += (overlap.empty() || overlap[p]) ? 1 : 0;
  if (shared < 2) throw Error(ErrorKind::Overlap, "registered crops share fewer than 2 pixels");
  const AlignmentCoeffs a = lsq_align(p1, p2);
  EqErrPair r;
  r.depth_a = disparity_to_depth(apply_alignment(p1, a));
  r.depth_b = disparity_to_depth(p2);
  r.depth_a.set_mask(overlap);
  r.depth_b.set_mask(overlap);
  r.absrel = absrel(r.depth_a, r.depth_b);
  return r;
}

double eqerr_depth(const PredictorFn& f, const DenseMap& x, const CropTransform& t1,
                   const CropTransform& t2) {
  return eqerr_pair(f, x, t1, t2).absrel;
}

std::pair<CropTransform, CropTransform> eqerr_transforms(const CropSampler& sampler, int h, int w,
                                                         std::uint64_t seed, int index) {
  CropSampler s = sampler;
  s.jitter = JitterRanges{0.0, 0.0, 0.0, 0.0};
  RandomState rng = RandomState::substream(seed, static_cast<std::uint64_t>(index));
  CropTransform t1 = sample_transform(s, h, w, rng);
  CropTransform t2 = sample_transform(s, h, w, rng);
  return {std::move(t1), std::move(t2)};
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorKind::EmptyMetric, "quantile of empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

EqErrStats eqerr_distribution(const PredictorFn& f, const DenseMap& x, const CropSampler& sampler,
                              int n_pairs, std::uint64_t seed, const DenseMap* gt_depth) {
  if (n_pairs < 1) throw Error(ErrorKind::Config, "eqerr needs at least one pair");
  EqErrStats st;
  st.n_pairs = n_pairs;
  for (int i = 0; i < n_pairs; ++i) {
    const auto [t1, t2] = eqerr_transforms(sampler, x.height(), x.width(), seed, i);
    try {
      st.samples.push_back(eqerr_depth(f, x, t1, t2));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Overlap) throw;
      ++st.skipped;
    }
  }
  if (st.samples.empty()) throw Error(ErrorKind::Overlap, "no crop pair overlapped");
  std::vector<double> sorted = st.samples;
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double v : sorted) sum += v;
  st.mean = sum / static_cast<double>(sorted.size());
  st.median = quantile_sorted(sorted, 0.5);
  st.q1 = quantile_sorted(sorted, 0.25);
  st.q3 = quantile_sorted(sorted, 0.75);
  st.min = sorted.front();
  st.max = sorted.back();
  if (gt_depth != nullptr) {
    const DenseMap pred = f(x);
    const DenseMap gt_disp = [&] {
      DenseMap d = *gt_depth;
      for (double& v : d.values()) v = 1.0 / v;
      return d;
    }();
    const AlignmentCoeffs a = lsq_align(pred, gt_disp);
    st.reference_absrel = absrel(disparity_to_depth(apply_alignment(pred, a)), *gt_depth);
  }
  return st;
}

std::string format_metric_row(const MetricRow& row) {
  return row.run_id + "," + std::to_string(row.step) + "," + row.metric + "," +
         format_double(row.value);
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << kMetricsHeader << '\n';
  for (const MetricRow& r : rows) out << format_metric_row(r) << '\n';
  if (!out) throw Error(ErrorKind::Io, "short write to " + path.string());
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw Error(ErrorKind::Format, path.string() + " lacks the metrics header");
  }
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    MetricRow r;
    std::string step;
    std::string value;
    if (!std::getline(ss, r.run_id, ',') || !std::getline(ss, step, ',') ||
        !std::getline(ss, r.metric, ',') || !std::getline(ss, value)) {
      throw Error(ErrorKind::Format, "malformed metrics row: " + line);
    }
    r.step = std::stoll(step);
    r.value = std::stod(value);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace eqreg
