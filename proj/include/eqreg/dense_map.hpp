#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace eqreg {

enum class Semantics : std::uint8_t {
  Rgb = 0,
  Depth = 1,
  Disparity = 2,
  Normal = 3,
  Edge = 4,
  Feature = 5,
  Weight = 6,
};

std::string_view to_string(Semantics s);
Semantics semantics_from_code(std::uint8_t code);

/// H x W x C grid of doubles, channels interleaved per pixel, with an
/// optional per-pixel validity mask. An empty mask means every pixel is valid.
class DenseMap {
 public:
  DenseMap() = default;
  DenseMap(int height, int width, int channels, Semantics semantics,
           double fill = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  int pixels() const { return height_ * width_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  Semantics semantics() const { return semantics_; }
  void set_semantics(Semantics s) { semantics_ = s; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& at(int y, int x, int c = 0) {
    return values_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  double at(int y, int x, int c = 0) const {
    return values_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  double* pixel(int y, int x) {
    return values_.data() + (static_cast<std::size_t>(y) * width_ + x) * channels_;
  }
  const double* pixel(int y, int x) const {
    return values_.data() + (static_cast<std::size_t>(y) * width_ + x) * channels_;
  }

  bool has_mask() const { return !mask_.empty(); }
  bool valid(int y, int x) const {
    return mask_.empty() || mask_[static_cast<std::size_t>(y) * width_ + x] != 0;
  }
  bool valid(int index) const { return mask_.empty() || mask_[index] != 0; }
  void set_valid(int y, int x, bool v);
  /// Replaces the mask; an all-true mask is stored as "no mask".
  void set_mask(std::vector<std::uint8_t> mask);
  void clear_mask() { mask_.clear(); }
  const std::vector<std::uint8_t>& mask() const { return mask_; }
  int valid_count() const;

  bool same_shape(const DenseMap& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }

  /// Throws ErrorKind::Invariant when a semantics-specific invariant fails.
  void validate() const;

  bool operator==(const DenseMap& other) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  Semantics semantics_ = Semantics::Feature;
  std::vector<double> values_;
  std::vector<std::uint8_t> mask_;
};

/// Single-channel map with semantics Weight.
using WeightMap = DenseMap;

/// Logical AND of two masks of the same spatial size (empty = all valid).
std::vector<std::uint8_t> joint_mask(const DenseMap& a, const DenseMap& b);

/// Returns a copy with every value multiplied by alpha.
DenseMap scaled(const DenseMap& m, double alpha);

/// Extracts one channel as a single-channel map, keeping the mask.
DenseMap channel(const DenseMap& m, int c, Semantics semantics);

/// Concatenates channels of same-size maps; result mask is the joint mask.
DenseMap concat_channels(const DenseMap& a, const DenseMap& b, Semantics semantics);

}  // namespace eqreg
