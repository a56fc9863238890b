#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "eqreg/checkpoint.hpp"
#include "eqreg/data.hpp"
#include "eqreg/equivariance.hpp"
#include "eqreg/geometry.hpp"
#include "eqreg/metrics.hpp"
#include "eqreg/model.hpp"

namespace eqreg {

enum class TrainMode { Sup, Aug, EqLoss, SemiSup, Finetune };
enum class Task { Depth, Normal, Edge };

std::string to_string(TrainMode m);
std::string to_string(Task t);
TrainMode parse_mode(const std::string& s);
Task parse_task(const std::string& s);

struct TrainConfig {
  TrainMode mode = TrainMode::Aug;
  Task task = Task::Depth;
  int crops = 3;
  double lambda = 1e-4;
  std::optional<double> lambda_unlabeled;  // semisup unlabeled stream; defaults to lambda
  LayerSelector loss_layer = LayerSelector::penultimate();
  double lr_start = 1e-3;
  double lr_end = 0.0;
  double weight_decay = 1e-4;
  int batch_images = 1;
  int steps = 2000;
  std::uint64_t seed = 0;
  CropSampler sampler;
  Architecture arch;  // out_channels and head follow the task
  double window_margin = 0.125;
  int max_train = 0;  // use only the first N training scenes (0 = all)
  int labeled_count = 0;  // semisup: first N training scenes keep their labels
  double target_bias = 0.0;  // amplitude of a crop-position pattern multiplied into targets
  int val_every = 0;  // 0 = validate only before the first and after the last step
  int val_images = 0;  // 0 = whole val split
  int val_crops = 3;
  std::uint64_t val_seed = 7919;
  int checkpoint_every = 0;
  std::string teacher;  // finetune: teacher checkpoint path
  std::string run_id = "run";
  bool deterministic = true;

  /// Architecture with the task's output channels and head activation.
  Architecture effective_arch() const;
  void check() const;
};

/// Sets one field from its `key = value` spelling; unknown keys are config errors.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
/// `key = value` lines, `#` starts a comment.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path);
/// Every field, one per line, in a form parse_config accepts.
std::string config_to_text(const TrainConfig& cfg);

struct EvalMetrics {
  std::map<std::string, double> values;  // absrel, delta_1.25, angular_*, l1, eqloss

  double at(const std::string& key) const;
  bool has(const std::string& key) const { return values.count(key) != 0; }
};

/// Predicts a task map with the right semantics.
DenseMap predict_task(const PredictorNet& net, Task task, const DenseMap& rgb);
/// Ground-truth target map of a sample for the task.
const DenseMap& task_target(const SceneSample& s, Task task);

struct ObjectiveEval {
  double value = 0.0;  // task + lambda * eq
  double task = 0.0;
  double eq = 0.0;
  std::vector<double> parameters;  // d value / d parameters
  std::vector<double> head;        // d value / d head weights
  EquivariantAverage average;      // registration target used for eq
};

/// One image's training objective and its gradient. The eq term is active in
/// eqloss, semisup and finetune modes. Passing `frozen` reuses a registration
/// target instead of recomputing it; the gradient treats it as constant either way.
ObjectiveEval training_objective(const PredictorNet& net, const LinearPredictorHead& head,
                                 const TrainConfig& cfg, const DenseMap& rgb,
                                 const DenseMap* target, std::span<const CropTransform> ts,
                                 const EquivariantAverage* frozen = nullptr);

/// Validation EqLoss: mean over images of the equivariant loss of the output
/// layer on a fixed transform set (image i uses substream(seed, i), no jitter),
/// identity head.
double validation_eqloss(const PredictorNet& net, Task task, std::span<const DenseMap> images,
                         const CropSampler& sampler, int crops, std::uint64_t seed,
                         double window_margin);

/// Task metrics on held-out samples plus validation EqLoss.
EvalMetrics evaluate(const PredictorNet& net, const TrainConfig& cfg,
                     std::span<const SceneSample> samples);
/// Same, for any predictor of the task's semantics (used for oracles and TTA).
EvalMetrics evaluate_predictor(const PredictorFn& f, Task task,
                               std::span<const SceneSample> samples);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricRow> rows;
  EvalMetrics initial;
  EvalMetrics final;
};

/// Runs the configured regime. Writes metrics.csv, config.txt and
/// checkpoints under out_dir when it is non-empty.
TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest,
                  const std::filesystem::path& out_dir);

/// Student starts from the teacher; targets are the frozen teacher's
/// full-frame predictions carried through each crop. Training images come
/// from RgbOnlyLoader; ground truth is read only for the reported val metrics.
TrainResult finetune_unsupervised(const TrainConfig& cfg, const DatasetManifest& manifest,
                                  const PredictorNet& teacher,
                                  const std::filesystem::path& out_dir);

/// Smooth multiplicative pattern 1 + a * (sin 2 pi u + sin 2 pi v) / 2 over
/// crop-relative coordinates u, v in [0, 1).
void apply_position_bias(DenseMap& target, double amplitude);

}  // namespace eqreg
