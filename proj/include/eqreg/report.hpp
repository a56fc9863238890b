#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eqreg/dense_map.hpp"

namespace eqreg {

/// Tukey box: whiskers reach the most extreme samples within 1.5 IQR of the box.
struct BoxSummary {
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double mean = 0.0;
  double whisker_lo = 0.0;
  double whisker_hi = 0.0;
  std::vector<double> outliers;
};

BoxSummary box_summary(std::span<const double> samples);

struct BoxSeries {
  std::string label;
  std::vector<double> samples;
  std::optional<double> reference;  // drawn as a red line across the box
};

/// Self-contained SVG with one box per series on a shared y axis.
std::string box_plot_svg(std::span<const BoxSeries> series, const std::string& title,
                         const std::string& y_label);

/// Per-pixel |a - b| of single-channel maps, valid where both are.
DenseMap abs_difference(const DenseMap& a, const DenseMap& b);

/// 8-bit RGB heatmap of channel 0 scaled to [0, vmax]; invalid pixels are grey.
/// vmax <= 0 uses the largest valid value.
void write_heatmap_png(const DenseMap& map, const std::filesystem::path& path, double vmax = 0.0);

}  // namespace eqreg
