#include "eqreg/dense_map.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "eqreg/error.hpp"

namespace eqreg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Constraint: return "constraint";
    case ErrorKind::Semantics: return "semantics";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::EmptySample: return "empty-sample";
    case ErrorKind::DegenerateCoverage: return "degenerate-coverage";
    case ErrorKind::Group: return "group";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Tape: return "tape";
    case ErrorKind::Format: return "format";
    case ErrorKind::Dtype: return "dtype";
    case ErrorKind::Version: return "version";
    case ErrorKind::Truncated: return "truncated";
    case ErrorKind::Checksum: return "checksum";
    case ErrorKind::Architecture: return "architecture";
    case ErrorKind::EmptyMetric: return "empty-metric";
    case ErrorKind::Overlap: return "overlap";
    case ErrorKind::Collision: return "collision";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Invariant: return "invariant";
  }
  return "unknown";
}

std::string_view to_string(Semantics s) {
  switch (s) {
    case Semantics::Rgb: return "rgb";
    case Semantics::Depth: return "depth";
    case Semantics::Disparity: return "disparity";
    case Semantics::Normal: return "normal";
    case Semantics::Edge: return "edge";
    case Semantics::Feature: return "feature";
    case Semantics::Weight: return "weight";
  }
  return "unknown";
}

Semantics semantics_from_code(std::uint8_t code) {
  if (code > static_cast<std::uint8_t>(Semantics::Weight)) {
    throw Error(ErrorKind::Format, "unknown semantics code " + std::to_string(code));
  }
  return static_cast<Semantics>(code);
}

DenseMap::DenseMap(int height, int width, int channels, Semantics semantics,
                   double fill)
    : height_(height), width_(width), channels_(channels), semantics_(semantics) {
  if (height < 0 || width < 0 || channels < 0) {
    throw Error(ErrorKind::Dimension, "negative map extent");
  }
  values_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

void DenseMap::set_valid(int y, int x, bool v) {
  if (mask_.empty()) {
    if (v) return;
    mask_.assign(static_cast<std::size_t>(pixels()), 1);
  }
  mask_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0;
}

void DenseMap::set_mask(std::vector<std::uint8_t> mask) {
  if (mask.empty()) {
    mask_.clear();
    return;
  }
  if (mask.size() != static_cast<std::size_t>(pixels())) {
    throw Error(ErrorKind::Dimension, "mask size does not match map");
  }
  if (std::all_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
    mask_.clear();
  } else {
    mask_ = std::move(mask);
  }
}

int DenseMap::valid_count() const {
  if (mask_.empty()) return pixels();
  return static_cast<int>(std::count_if(mask_.begin(), mask_.end(),
                                        [](std::uint8_t m) { return m != 0; }));
}

void DenseMap::validate() const {
  if (values_.size() != static_cast<std::size_t>(height_) * width_ * channels_) {
    throw Error(ErrorKind::Invariant, "value count does not match extent");
  }
  for (int p = 0; p < pixels(); ++p) {
    if (!valid(p)) continue;
    const double* v = values_.data() + static_cast<std::size_t>(p) * channels_;
    switch (semantics_) {
      case Semantics::Normal: {
        if (channels_ != 3) throw Error(ErrorKind::Invariant, "normal map needs 3 channels");
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (std::abs(n - 1.0) > 1e-4) {
          throw Error(ErrorKind::Invariant, "normal at pixel " + std::to_string(p) +
                                                " has norm " + std::to_string(n));
        }
        break;
      }
      case Semantics::Depth:
        if (!(v[0] > 0.0)) {
          throw Error(ErrorKind::Invariant, "non-positive depth at pixel " + std::to_string(p));
        }
        break;
      case Semantics::Weight:
        if (!(v[0] >= 0.0 && v[0] <= 1.0)) {
          throw Error(ErrorKind::Invariant, "weight outside [0,1] at pixel " + std::to_string(p));
        }
        break;
      default:
        break;
    }
  }
}

std::vector<std::uint8_t> joint_mask(const DenseMap& a, const DenseMap& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error(ErrorKind::Dimension, "joint mask of differently sized maps");
  }
  if (!a.has_mask() && !b.has_mask()) return {};
  std::vector<std::uint8_t> m(static_cast<std::size_t>(a.pixels()));
  for (int p = 0; p < a.pixels(); ++p) m[p] = (a.valid(p) && b.valid(p)) ? 1 : 0;
  return m;
}

DenseMap scaled(const DenseMap& m, double alpha) {
  DenseMap out = m;
  for (double& v : out.values()) v *= alpha;
  return out;
}

DenseMap channel(const DenseMap& m, int c, Semantics semantics) {
  if (c < 0 || c >= m.channels()) throw Error(ErrorKind::Dimension, "channel out of range");
  DenseMap out(m.height(), m.width(), 1, semantics);
  for (int p = 0; p < m.pixels(); ++p) {
    out.values()[p] = m.values()[static_cast<std::size_t>(p) * m.channels() + c];
  }
  out.set_mask(m.mask());
  return out;
}

DenseMap concat_channels(const DenseMap& a, const DenseMap& b, Semantics semantics) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error(ErrorKind::Dimension, "concat of differently sized maps");
  }
  const int ca = a.channels();
  const int cb = b.channels();
  DenseMap out(a.height(), a.width(), ca + cb, semantics);
  for (int p = 0; p < a.pixels(); ++p) {
    double* dst = out.data() + static_cast<std::size_t>(p) * (ca + cb);
    std::copy_n(a.data() + static_cast<std::size_t>(p) * ca, ca, dst);
    std::copy_n(b.data() + static_cast<std::size_t>(p) * cb, cb, dst + ca);
  }
  out.set_mask(joint_mask(a, b));
  return out;
}

}  // namespace eqreg
