#pragma once

#include <functional>
#include <span>
#include <vector>

#include "eqreg/dense_map.hpp"
#include "eqreg/geometry.hpp"

namespace eqreg {

/// Dense predictor viewed as a plain function of its input map.
using PredictorFn = std::function<DenseMap(const DenseMap&)>;

/// Source pixels with less accumulated window mass are left undefined.
inline constexpr double kWeightEpsilon = 1e-6;
/// Lower bound applied to the normaliser of the equivariant loss.
inline constexpr double kNormalizerFloor = 1e-8;

/// Weighted average of crop predictions registered back to the source frame.
struct EquivariantAverage {
  DenseMap mean;          // valid exactly where weight_total > kWeightEpsilon
  DenseMap weight_total;  // accumulated window mass per source pixel
  std::vector<CropTransform> transforms;
  int crops = 0;
};

/// mean(p) = sum_k splat_k(w * out_k)(p) / sum_k splat_k(w)(p), where w is the
/// window restricted to each output's valid pixels.
EquivariantAverage equivariant_average(std::span<const DenseMap> crop_outputs,
                                       std::span<const CropTransform> transforms,
                                       const WeightMap& window, int src_h, int src_w);

/// Throws ErrorKind::Group unless every element is an integer translation with
/// a common boundary and the set is closed under composition.
void check_translation_group(std::span<const CropTransform> group, int src_h, int src_w);

/// Full-group average (1/|G|) sum_t t^-1 f t (x) over a finite translation
/// group, masking pixels that any summand cannot see.
DenseMap exact_average_discrete(const PredictorFn& f, const DenseMap& x,
                                std::span<const CropTransform> group);

/// Bias-free C x C linear map applied per pixel to crop outputs before they are
/// compared with their targets. Starts as the identity.
class LinearPredictorHead {
 public:
  LinearPredictorHead() = default;
  explicit LinearPredictorHead(int channels);

  int channels() const { return channels_; }
  std::span<double> weights() { return weights_; }
  std::span<const double> weights() const { return weights_; }
  double at(int row, int col) const { return weights_[row * channels_ + col]; }

  void apply(const double* in, double* out) const;
  DenseMap apply(const DenseMap& m) const;

 private:
  int channels_ = 0;
  std::vector<double> weights_;  // row-major, out = W * in
};

struct EqLossResult {
  double value = 0.0;
  std::vector<double> per_crop;           // residual_k / Z; value == mean(per_crop)
  std::vector<double> per_crop_residual;  // sum of squared residuals of crop k
  double normalizer = 0.0;                // Z, after flooring
  bool normalizer_clamped = false;
  std::vector<DenseMap> grad_wrt_crop_outputs;
  std::vector<double> grad_head;  // d value / d head weights, row-major
};

/// Normalised self-consistency loss. Targets apply(t_k, avg.mean) and the
/// normaliser Z = sum |avg.mean|^2 are constants: gradients flow only into
/// the crop outputs and the head.
EqLossResult equivariant_loss(std::span<const DenseMap> crop_outputs,
                              std::span<const CropTransform> transforms,
                              const EquivariantAverage& avg,
                              const LinearPredictorHead& head);

/// Task loss with per-crop output gradients.
struct TaskLoss {
  double value = 0.0;
  std::vector<DenseMap> grad_outputs;
};

struct TotalLoss {
  double value = 0.0;
  double task = 0.0;
  double equivariant = 0.0;
  std::vector<DenseMap> grad_outputs;   // from the task loss
  std::vector<DenseMap> grad_captured;  // lambda * equivariant gradient
  std::vector<double> grad_head;
};

TotalLoss total_loss(const TaskLoss& task, const EqLossResult& eq, double lambda);

/// Masked L1 between each output and its target, averaged over valid
/// entries of each crop and then over crops.
TaskLoss l1_task_loss(std::span<const DenseMap> outputs, std::span<const DenseMap> targets);

/// Inference-time averaging over the identity crop plus `crops` sampled ones.
DenseMap predict_tta(const PredictorFn& f, const DenseMap& x, const CropSampler& sampler,
                     int crops, RandomState& rng, double window_margin = 0.125);

/// Builds t_k^-1 f t_k(x) for every transform and the registered average;
/// the crop inputs' validity is carried onto the outputs.
struct CropPredictions {
  std::vector<DenseMap> outputs;
  EquivariantAverage average;
};
CropPredictions predict_crops(const PredictorFn& f, const DenseMap& x,
                              std::span<const CropTransform> transforms,
                              const WeightMap& window);

}  // namespace eqreg
