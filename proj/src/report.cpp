#include "eqreg/report.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "eqreg/error.hpp"
#include "eqreg/metrics.hpp"

namespace eqreg {
namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string label_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Piecewise-linear black -> red -> yellow -> white ramp.
void ramp(double t, std::uint8_t* rgb) {
  t = std::clamp(t, 0.0, 1.0);
  const double r = std::min(1.0, 3.0 * t);
  const double g = std::clamp(3.0 * t - 1.0, 0.0, 1.0);
  const double b = std::clamp(3.0 * t - 2.0, 0.0, 1.0);
  rgb[0] = static_cast<std::uint8_t>(std::lround(255.0 * r));
  rgb[1] = static_cast<std::uint8_t>(std::lround(255.0 * g));
  rgb[2] = static_cast<std::uint8_t>(std::lround(255.0 * b));
}

struct PngFile {
  std::FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngFile() {
    if (png != nullptr) png_destroy_write_struct(&png, info != nullptr ? &info : nullptr);
    if (fp != nullptr) std::fclose(fp);
  }
};

}  // namespace

BoxSummary box_summary(std::span<const double> samples) {
  if (samples.empty()) throw Error(ErrorKind::EmptyMetric, "box plot of empty sample");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  BoxSummary b;
  b.q1 = quantile_sorted(s, 0.25);
  b.median = quantile_sorted(s, 0.5);
  b.q3 = quantile_sorted(s, 0.75);
  double sum = 0.0;
  for (double v : s) sum += v;
  b.mean = sum / static_cast<double>(s.size());
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr;
  const double hi = b.q3 + 1.5 * iqr;
  b.whisker_lo = b.q1;
  b.whisker_hi = b.q3;
  for (double v : s) {
    if (v < lo || v > hi) {
      b.outliers.push_back(v);
    } else {
      b.whisker_lo = std::min(b.whisker_lo, v);
      b.whisker_hi = std::max(b.whisker_hi, v);
    }
  }
  return b;
}

std::string box_plot_svg(std::span<const BoxSeries> series, const std::string& title,
                         const std::string& y_label) {
  if (series.empty()) throw Error(ErrorKind::EmptyMetric, "box plot without series");
  std::vector<BoxSummary> boxes;
  double y_min = INFINITY;
  double y_max = -INFINITY;
  for (const BoxSeries& s : series) {
    boxes.push_back(box_summary(s.samples));
    const BoxSummary& b = boxes.back();
    y_min = std::min(y_min, b.whisker_lo);
    y_max = std::max(y_max, b.whisker_hi);
    for (double v : b.outliers) {
      y_min = std::min(y_min, v);
      y_max = std::max(y_max, v);
    }
    if (s.reference) {
      y_min = std::min(y_min, *s.reference);
      y_max = std::max(y_max, *s.reference);
    }
  }
  y_min = std::min(y_min, 0.0);
  if (y_max <= y_min) y_max = y_min + 1.0;
  y_max += 0.05 * (y_max - y_min);

  const double left = 80, top = 40, plot_h = 300, slot = 120;
  const double width = left + slot * static_cast<double>(series.size()) + 30;
  const double height = top + plot_h + 60;
  auto y = [&](double v) { return top + plot_h * (1.0 - (v - y_min) / (y_max - y_min)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\""
     << num(height) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
     << xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << num(left) << "\" y1=\"" << num(top) << "\" x2=\"" << num(left)
     << "\" y2=\"" << num(top + plot_h) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = y_min + (y_max - y_min) * i / 5.0;
    os << "<line x1=\"" << num(left - 4) << "\" y1=\"" << num(y(v)) << "\" x2=\"" << num(left)
       << "\" y2=\"" << num(y(v)) << "\" stroke=\"black\"/>";
    os << "<text x=\"" << num(left - 6) << "\" y=\"" << num(y(v) + 4)
       << "\" text-anchor=\"end\">" << label_num(v) << "</text>\n";
  }
  os << "<text transform=\"translate(18," << num(top + plot_h / 2)
     << ") rotate(-90)\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const BoxSummary& b = boxes[i];
    const double cx = left + slot * (static_cast<double>(i) + 0.5);
    const double hw = 30;
    os << "<g class=\"box\">\n";
    os << "<line x1=\"" << num(cx) << "\" y1=\"" << num(y(b.whisker_hi)) << "\" x2=\"" << num(cx)
       << "\" y2=\"" << num(y(b.q3)) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << num(cx) << "\" y1=\"" << num(y(b.q1)) << "\" x2=\"" << num(cx)
       << "\" y2=\"" << num(y(b.whisker_lo)) << "\" stroke=\"black\"/>\n";
    for (double w : {b.whisker_lo, b.whisker_hi}) {
      os << "<line class=\"whisker\" x1=\"" << num(cx - hw / 2) << "\" y1=\"" << num(y(w))
         << "\" x2=\"" << num(cx + hw / 2) << "\" y2=\"" << num(y(w)) << "\" stroke=\"black\"/>\n";
    }
    os << "<rect x=\"" << num(cx - hw) << "\" y=\"" << num(y(b.q3)) << "\" width=\"" << num(2 * hw)
       << "\" height=\"" << num(std::max(0.5, y(b.q1) - y(b.q3)))
       << "\" fill=\"#9ecae1\" stroke=\"black\"/>\n";
    os << "<line class=\"median\" x1=\"" << num(cx - hw) << "\" y1=\"" << num(y(b.median))
       << "\" x2=\"" << num(cx + hw) << "\" y2=\"" << num(y(b.median))
       << "\" stroke=\"#08519c\" stroke-width=\"2\"/>\n";
    os << "<circle class=\"mean\" cx=\"" << num(cx) << "\" cy=\"" << num(y(b.mean))
       << "\" r=\"3\" fill=\"#08519c\"/>\n";
    for (double v : b.outliers) {
      os << "<circle class=\"outlier\" cx=\"" << num(cx) << "\" cy=\"" << num(y(v))
         << "\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>\n";
    }
    if (series[i].reference) {
      const double ry = y(*series[i].reference);
      os << "<line class=\"reference\" x1=\"" << num(cx - hw - 8) << "\" y1=\"" << num(ry)
         << "\" x2=\"" << num(cx + hw + 8) << "\" y2=\"" << num(ry)
         << "\" stroke=\"red\" stroke-width=\"2\"/>\n";
    }
    os << "<text x=\"" << num(cx) << "\" y=\"" << num(top + plot_h + 20)
       << "\" text-anchor=\"middle\">" << xml_escape(series[i].label) << "</text>\n";
    os << "<text x=\"" << num(cx) << "\" y=\"" << num(top + plot_h + 36)
       << "\" text-anchor=\"middle\" font-size=\"10\">n=" << series[i].samples.size()
       << "</text>\n";
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

DenseMap abs_difference(const DenseMap& a, const DenseMap& b) {
  if (a.height() != b.height() || a.width() != b.width() || a.channels() != 1 ||
      b.channels() != 1) {
    throw Error(ErrorKind::Dimension, "abs_difference needs two single-channel maps of one size");
  }
  DenseMap d(a.height(), a.width(), 1, Semantics::Feature);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(a.pixels()), 1);
  for (int p = 0; p < a.pixels(); ++p) {
    if (a.valid(p) && b.valid(p)) {
      d.values()[p] = std::abs(a.values()[p] - b.values()[p]);
    } else {
      mask[p] = 0;
    }
  }
  d.set_mask(std::move(mask));
  return d;
}

void write_heatmap_png(const DenseMap& map, const std::filesystem::path& path, double vmax) {
  const int h = map.height();
  const int w = map.width();
  const int c = map.channels();
  if (vmax <= 0.0) {
    for (int p = 0; p < map.pixels(); ++p) {
      if (map.valid(p)) vmax = std::max(vmax, map.values()[static_cast<std::size_t>(p) * c]);
    }
    if (vmax <= 0.0) vmax = 1.0;
  }
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(h) * w * 3);
  for (int p = 0; p < h * w; ++p) {
    std::uint8_t* px = rows.data() + static_cast<std::size_t>(p) * 3;
    if (map.valid(p)) {
      ramp(map.values()[static_cast<std::size_t>(p) * c] / vmax, px);
    } else {
      px[0] = px[1] = px[2] = 128;
    }
  }

  PngFile f;
  f.fp = std::fopen(path.c_str(), "wb");
  if (f.fp == nullptr) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  f.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (f.png == nullptr) throw Error(ErrorKind::Io, "libpng initialisation failed");
  f.info = png_create_info_struct(f.png);
  if (f.info == nullptr) throw Error(ErrorKind::Io, "libpng initialisation failed");
  if (setjmp(png_jmpbuf(f.png))) throw Error(ErrorKind::Io, "writing " + path.string() + " failed");
  png_init_io(f.png, f.fp);
  png_set_IHDR(f.png, f.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(f.png, f.info);
  for (int y = 0; y < h; ++y) {
    png_write_row(f.png, rows.data() + static_cast<std::size_t>(y) * w * 3);
  }
  png_write_end(f.png, nullptr);
}

}  // namespace eqreg
