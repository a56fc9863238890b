#include "eqreg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>

#include "eqreg/binary_io.hpp"
#include "eqreg/error.hpp"
#include "eqreg/optimizer.hpp"

namespace eqreg {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, key + ": expected a number, got '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorKind::Config, key + ": expected an integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw Error(ErrorKind::Config, key + ": expected a boolean, got '" + v + "'");
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Semantics task_semantics(Task t) {
  switch (t) {
    case Task::Depth: return Semantics::Disparity;
    case Task::Normal: return Semantics::Normal;
    case Task::Edge: return Semantics::Edge;
  }
  return Semantics::Feature;
}

// Validity of a level-l activation of crop t: the crop window read at that resolution.
std::vector<std::uint8_t> level_mask(const CropTransform& t, int level, int src_h, int src_w) {
  const int f = 1 << level;
  const DenseMap ones(src_h / f, src_w / f, 1, Semantics::Feature, 1.0);
  return apply(t.downscaled(level), ones).mask();
}

CropTransform full_frame(int h, int w) {
  CropTransform t = CropTransform::identity(h, w);
  t.src_h = h;
  t.src_w = w;
  return t;
}

struct StepContext {
  Task task = Task::Depth;
  LayerSelector layer;
  double window_margin = 0.125;
  double target_bias = 0.0;
};

struct ImageLoss {
  double task = 0.0;
  double eq = 0.0;
  EquivariantAverage average;
};

// Forward/backward over the crops of one image; adds parameter and head
// gradients into the accumulators.
ImageLoss image_step(const PredictorNet& net, const LinearPredictorHead& head,
                     const StepContext& ctx, const DenseMap& rgb, const DenseMap* target,
                     std::span<const CropTransform> ts, double lambda, bool with_eq,
                     std::vector<double>& grad, std::vector<double>& head_grad,
                     const EquivariantAverage* frozen = nullptr) {
  const int k = static_cast<int>(ts.size());
  const int level = ctx.layer.resolution_level();
  const LayerSelector capture = with_eq ? ctx.layer : LayerSelector::none();
  std::vector<DenseMap> outputs;
  std::vector<DenseMap> captured;
  std::vector<ActivationTape> tapes;
  for (const CropTransform& t : ts) {
    DenseMap crop = apply(t, rgb);
    if (t.jitter) crop = apply_jitter(crop, *t.jitter);
    ForwardResult fr = net.forward(crop, capture);
    fr.output.set_semantics(task_semantics(ctx.task));
    fr.output.set_mask(crop.mask());
    if (with_eq) {
      DenseMap c = std::move(*fr.captured);
      c.set_mask(level == 0 ? crop.mask() : level_mask(t, level, rgb.height(), rgb.width()));
      captured.push_back(std::move(c));
    }
    outputs.push_back(std::move(fr.output));
    tapes.push_back(std::move(fr.tape));
  }
  ImageLoss loss;
  TaskLoss task;
  if (target != nullptr) {
    std::vector<DenseMap> targets;
    for (const CropTransform& t : ts) {
      DenseMap y = apply(t, *target);
      if (ctx.target_bias != 0.0) apply_position_bias(y, ctx.target_bias);
      targets.push_back(std::move(y));
    }
    task = l1_task_loss(outputs, targets);
    loss.task = task.value;
  }
  EqLossResult eq;
  if (with_eq) {
    std::vector<CropTransform> ds;
    for (const CropTransform& t : ts) ds.push_back(t.downscaled(level));
    const int f = 1 << level;
    if (frozen != nullptr) {
      loss.average = *frozen;
    } else {
      const WeightMap window = cosine_window(ds[0].out_h, ds[0].out_w, ctx.window_margin);
      loss.average = equivariant_average(captured, ds, window, rgb.height() / f, rgb.width() / f);
    }
    eq = equivariant_loss(captured, ds, loss.average, head);
    loss.eq = eq.value;
  }
  const bool inject = with_eq && lambda > 0.0;
  for (int i = 0; i < k; ++i) {
    const DenseMap g_out = target != nullptr
                               ? task.grad_outputs[i]
                               : DenseMap(outputs[i].height(), outputs[i].width(),
                                          outputs[i].channels(), Semantics::Feature);
    std::optional<DenseMap> g_cap;
    if (inject) g_cap = scaled(eq.grad_wrt_crop_outputs[i], lambda);
    const Gradients g = net.backward(tapes[i], g_out, g_cap ? &*g_cap : nullptr);
    for (std::size_t p = 0; p < grad.size(); ++p) grad[p] += g.parameters[p];
  }
  if (inject) {
    for (std::size_t p = 0; p < head_grad.size(); ++p) head_grad[p] += lambda * eq.grad_head[p];
  }
  return loss;
}

std::vector<CropTransform> draw_transforms(const TrainConfig& cfg, int h, int w,
                                           RandomState& rng) {
  std::vector<CropTransform> ts;
  for (int i = 0; i < cfg.crops; ++i) {
    if (cfg.mode == TrainMode::Sup) {
      ts.push_back(full_frame(h, w));
    } else {
      ts.push_back(sample_transform(cfg.sampler, h, w, rng));
    }
  }
  return ts;
}

void push_eval(std::vector<MetricRow>& rows, const std::string& run, std::int64_t step,
               const EvalMetrics& m) {
  for (const auto& [k, v] : m.values) rows.push_back({run, step, "val_" + k, v});
}

TrainResult run_loop(const TrainConfig& cfg, PredictorNet& net, std::span<const DenseMap> images,
                     const std::vector<const DenseMap*>& targets,
                     const std::function<DenseMap(const DenseMap&)>& pseudo_label,
                     std::span<const SceneSample> val, const std::filesystem::path& out_dir) {
  const bool semisup = cfg.mode == TrainMode::SemiSup;
  const bool with_eq = cfg.mode == TrainMode::EqLoss || semisup || cfg.mode == TrainMode::Finetune;
  const std::size_t n = images.size();
  const std::size_t n_labeled = semisup ? static_cast<std::size_t>(cfg.labeled_count) : n;
  const double lambda_u = cfg.lambda_unlabeled.value_or(cfg.lambda);
  if (n == 0) throw Error(ErrorKind::Config, "no training images");
  if (semisup && (cfg.labeled_count < 1 || n_labeled >= n)) {
    throw Error(ErrorKind::Config, "semisup needs 1 <= labeled_count < " + std::to_string(n) +
                                       " so that the unlabeled stream is not empty");
  }
  const int h = images[0].height();
  const int w = images[0].width();
  const StepContext ctx{cfg.task, cfg.loss_layer, cfg.window_margin, cfg.target_bias};
  const int cap_channels = with_eq ? cfg.loss_layer.channels(net.architecture()) : 1;
  LinearPredictorHead head(cap_channels);
  OptimizerState opt(static_cast<std::size_t>(net.parameter_count()));
  OptimizerState head_opt(head.weights().size());
  RandomState rng = RandomState::substream(cfg.seed, 1);

  TrainResult result;
  auto& rows = result.rows;
  result.initial = evaluate(net, cfg, val);
  push_eval(rows, cfg.run_id, 0, result.initial);

  std::vector<double> grad(opt.m.size());
  std::vector<double> head_grad(head.weights().size());
  for (int step = 0; step < cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    std::fill(head_grad.begin(), head_grad.end(), 0.0);
    ImageLoss sum;
    double eq_unlabeled = 0.0;
    for (int b = 0; b < cfg.batch_images; ++b) {
      const std::size_t idx = rng.below(n_labeled);
      const std::vector<CropTransform> ts = draw_transforms(cfg, h, w, rng);
      DenseMap pseudo;
      const DenseMap* target = targets[idx];
      if (pseudo_label) {
        pseudo = pseudo_label(images[idx]);
        target = &pseudo;
      }
      const ImageLoss l = image_step(net, head, ctx, images[idx], target, ts,
                                     with_eq ? cfg.lambda : 0.0, with_eq, grad, head_grad);
      sum.task += l.task;
      sum.eq += l.eq;
    }
    if (semisup && lambda_u > 0.0) {
      for (int b = 0; b < cfg.batch_images; ++b) {
        const std::size_t idx = n_labeled + rng.below(n - n_labeled);
        const std::vector<CropTransform> ts = draw_transforms(cfg, h, w, rng);
        eq_unlabeled +=
            image_step(net, head, ctx, images[idx], nullptr, ts, lambda_u, true, grad, head_grad).eq;
      }
    }
    const double inv = 1.0 / cfg.batch_images;
    for (double& g : grad) g *= inv;
    for (double& g : head_grad) g *= inv;
    sum.task *= inv;
    sum.eq *= inv;
    eq_unlabeled *= inv;
    const double total = sum.task + (with_eq ? cfg.lambda * sum.eq : 0.0) +
                         (semisup ? lambda_u * eq_unlabeled : 0.0);
    if (!std::isfinite(total)) {
      throw Error(ErrorKind::Divergence, "loss is not finite at step " + std::to_string(step) +
                                             " (task " + num(sum.task) + ", eq " + num(sum.eq) +
                                             ", lr " + num(cosine_lr(step, cfg.steps, cfg.lr_start, cfg.lr_end)) + ")");
    }
    const double lr = cosine_lr(step, cfg.steps, cfg.lr_start, cfg.lr_end);
    adamw_step(net.mutable_parameters(), grad, opt, lr, cfg.weight_decay);
    net.round_to_float32();
    if (with_eq && cfg.lambda > 0.0) {
      adamw_step(head.weights(), head_grad, head_opt, lr, cfg.weight_decay);
    }
    const std::int64_t s1 = step + 1;
    rows.push_back({cfg.run_id, s1, "train_loss", total});
    rows.push_back({cfg.run_id, s1, "train_task", sum.task});
    if (with_eq) rows.push_back({cfg.run_id, s1, "train_eq", sum.eq});
    if (semisup) rows.push_back({cfg.run_id, s1, "train_eq_unlabeled", eq_unlabeled});
    if (cfg.val_every > 0 && s1 % cfg.val_every == 0 && s1 != cfg.steps) {
      push_eval(rows, cfg.run_id, s1, evaluate(net, cfg, val));
    }
    if (cfg.checkpoint_every > 0 && s1 % cfg.checkpoint_every == 0 && !out_dir.empty()) {
      save_checkpoint(Checkpoint{net, opt, rng.serialize(), static_cast<std::uint64_t>(s1)},
                      out_dir / ("checkpoint_" + std::to_string(s1) + ".eqvn"));
    }
  }
  result.final = evaluate(net, cfg, val);
  push_eval(rows, cfg.run_id, cfg.steps, result.final);
  result.checkpoint = Checkpoint{net, opt, rng.serialize(), static_cast<std::uint64_t>(cfg.steps)};
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const std::string text = config_to_text(cfg);
    write_file(out_dir / "config.txt",
               std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    write_metrics_csv(out_dir / "metrics.csv", rows);
    save_checkpoint(result.checkpoint, out_dir / "final.eqvn");
  }
  return result;
}

std::vector<SceneSample> val_samples(const TrainConfig& cfg, const DatasetManifest& manifest) {
  std::vector<SceneSample> val = load_split(manifest, "val");
  if (cfg.val_images > 0 && val.size() > static_cast<std::size_t>(cfg.val_images)) {
    val.resize(static_cast<std::size_t>(cfg.val_images));
  }
  return val;
}

}  // namespace

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Sup: return "sup";
    case TrainMode::Aug: return "aug";
    case TrainMode::EqLoss: return "eqloss";
    case TrainMode::SemiSup: return "semisup";
    case TrainMode::Finetune: return "finetune";
  }
  return "unknown";
}

std::string to_string(Task t) {
  switch (t) {
    case Task::Depth: return "depth";
    case Task::Normal: return "normal";
    case Task::Edge: return "edge";
  }
  return "unknown";
}

TrainMode parse_mode(const std::string& s) {
  for (TrainMode m : {TrainMode::Sup, TrainMode::Aug, TrainMode::EqLoss, TrainMode::SemiSup,
                      TrainMode::Finetune}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorKind::Config, "unknown mode '" + s + "' (sup|aug|eqloss|semisup|finetune)");
}

Task parse_task(const std::string& s) {
  for (Task t : {Task::Depth, Task::Normal, Task::Edge}) {
    if (to_string(t) == s) return t;
  }
  throw Error(ErrorKind::Config, "unknown task '" + s + "' (depth|normal|edge)");
}

Architecture TrainConfig::effective_arch() const {
  Architecture a = arch;
  a.in_channels = 3;
  a.out_channels = task == Task::Normal ? 3 : 1;
  a.head = task == Task::Depth ? HeadActivation::Softplus : HeadActivation::Identity;
  return a;
}

void TrainConfig::check() const {
  if (crops < 1) throw Error(ErrorKind::Config, "crops must be >= 1");
  if (!(lambda >= 0.0)) throw Error(ErrorKind::Config, "lambda must be >= 0");
  if (lambda_unlabeled && !(*lambda_unlabeled >= 0.0)) {
    throw Error(ErrorKind::Config, "lambda_unlabeled must be >= 0");
  }
  if (steps < 1) throw Error(ErrorKind::Config, "steps must be >= 1");
  if (batch_images < 1) throw Error(ErrorKind::Config, "batch_images must be >= 1");
  if (!(lr_start >= 0.0 && lr_end >= 0.0)) throw Error(ErrorKind::Config, "learning rates must be >= 0");
  if (!(weight_decay >= 0.0)) throw Error(ErrorKind::Config, "weight_decay must be >= 0");
  if (val_crops < 1) throw Error(ErrorKind::Config, "val_crops must be >= 1");
  if (!(window_margin >= 0.0 && window_margin < 0.5)) {
    throw Error(ErrorKind::Config, "window_margin must lie in [0, 0.5)");
  }
  const Architecture a = effective_arch();
  try {
    a.check();
  } catch (const Error& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  sampler.check();
  const int f = 1 << a.depth_blocks;
  if (sampler.out_h % f != 0 || sampler.out_w % f != 0) {
    throw Error(ErrorKind::Config, "crop size must be a multiple of " + std::to_string(f));
  }
  if (loss_layer.kind == LayerSelector::Kind::None) {
    throw Error(ErrorKind::Config, "loss_layer must name a layer");
  }
  if (loss_layer.kind == LayerSelector::Kind::Up && loss_layer.level >= a.depth_blocks) {
    throw Error(ErrorKind::Config, "loss_layer " + loss_layer.to_string() + " does not exist");
  }
}

void set_config_value(TrainConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  auto i = [&] { return static_cast<int>(to_int(key, v)); };
  auto d = [&] { return to_double(key, v); };
  if (key == "mode") c.mode = parse_mode(v);
  else if (key == "task") c.task = parse_task(v);
  else if (key == "crops") c.crops = i();
  else if (key == "lambda") c.lambda = d();
  else if (key == "lambda_unlabeled") c.lambda_unlabeled = d();
  else if (key == "loss_layer") c.loss_layer = LayerSelector::parse(v);
  else if (key == "lr_start") c.lr_start = d();
  else if (key == "lr_end") c.lr_end = d();
  else if (key == "weight_decay") c.weight_decay = d();
  else if (key == "batch_images") c.batch_images = i();
  else if (key == "steps") c.steps = i();
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(key, v));
  else if (key == "scale_lo") c.sampler.scale_lo = d();
  else if (key == "scale_hi") c.sampler.scale_hi = d();
  else if (key == "aspect_lo") c.sampler.aspect_lo = d();
  else if (key == "aspect_hi") c.sampler.aspect_hi = d();
  else if (key == "pad_frac") c.sampler.pad_frac = d();
  else if (key == "pad_mode") {
    if (v == "per_side") c.sampler.pad_mode = PadMode::PerSide;
    else if (v == "total") c.sampler.pad_mode = PadMode::Total;
    else throw Error(ErrorKind::Config, "pad_mode must be per_side or total");
  } else if (key == "crop_size") c.sampler.out_h = c.sampler.out_w = i();
  else if (key == "crop_h") c.sampler.out_h = i();
  else if (key == "crop_w") c.sampler.out_w = i();
  else if (key == "jitter_brightness") c.sampler.jitter.brightness = d();
  else if (key == "jitter_contrast") c.sampler.jitter.contrast = d();
  else if (key == "jitter_saturation") c.sampler.jitter.saturation = d();
  else if (key == "jitter_hue") c.sampler.jitter.hue = d();
  else if (key == "depth_blocks") c.arch.depth_blocks = i();
  else if (key == "base_channels") c.arch.base_channels = i();
  else if (key == "pos_bands") c.arch.pos_bands = i();
  else if (key == "window_margin") c.window_margin = d();
  else if (key == "max_train") c.max_train = i();
  else if (key == "labeled_count") c.labeled_count = i();
  else if (key == "target_bias") c.target_bias = d();
  else if (key == "val_every") c.val_every = i();
  else if (key == "val_images") c.val_images = i();
  else if (key == "val_crops") c.val_crops = i();
  else if (key == "val_seed") c.val_seed = static_cast<std::uint64_t>(to_int(key, v));
  else if (key == "checkpoint_every") c.checkpoint_every = i();
  else if (key == "teacher") c.teacher = v;
  else if (key == "run_id") c.run_id = v;
  else if (key == "deterministic") c.deterministic = to_bool(key, v);
  else throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
}

TrainConfig parse_config(const std::string& text, TrainConfig cfg) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::Config, "line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream os;
  os << "mode = " << to_string(c.mode) << '\n'
     << "task = " << to_string(c.task) << '\n'
     << "crops = " << c.crops << '\n'
     << "lambda = " << num(c.lambda) << '\n';
  if (c.lambda_unlabeled) os << "lambda_unlabeled = " << num(*c.lambda_unlabeled) << '\n';
  os << "loss_layer = " << c.loss_layer.to_string() << '\n'
     << "lr_start = " << num(c.lr_start) << '\n'
     << "lr_end = " << num(c.lr_end) << '\n'
     << "weight_decay = " << num(c.weight_decay) << '\n'
     << "batch_images = " << c.batch_images << '\n'
     << "steps = " << c.steps << '\n'
     << "seed = " << c.seed << '\n'
     << "scale_lo = " << num(c.sampler.scale_lo) << '\n'
     << "scale_hi = " << num(c.sampler.scale_hi) << '\n'
     << "aspect_lo = " << num(c.sampler.aspect_lo) << '\n'
     << "aspect_hi = " << num(c.sampler.aspect_hi) << '\n'
     << "pad_frac = " << num(c.sampler.pad_frac) << '\n'
     << "pad_mode = " << (c.sampler.pad_mode == PadMode::PerSide ? "per_side" : "total") << '\n'
     << "crop_h = " << c.sampler.out_h << '\n'
     << "crop_w = " << c.sampler.out_w << '\n'
     << "jitter_brightness = " << num(c.sampler.jitter.brightness) << '\n'
     << "jitter_contrast = " << num(c.sampler.jitter.contrast) << '\n'
     << "jitter_saturation = " << num(c.sampler.jitter.saturation) << '\n'
     << "jitter_hue = " << num(c.sampler.jitter.hue) << '\n'
     << "depth_blocks = " << c.arch.depth_blocks << '\n'
     << "base_channels = " << c.arch.base_channels << '\n'
     << "pos_bands = " << c.arch.pos_bands << '\n'
     << "window_margin = " << num(c.window_margin) << '\n'
     << "max_train = " << c.max_train << '\n'
     << "labeled_count = " << c.labeled_count << '\n'
     << "target_bias = " << num(c.target_bias) << '\n'
     << "val_every = " << c.val_every << '\n'
     << "val_images = " << c.val_images << '\n'
     << "val_crops = " << c.val_crops << '\n'
     << "val_seed = " << c.val_seed << '\n'
     << "checkpoint_every = " << c.checkpoint_every << '\n';
  if (!c.teacher.empty()) os << "teacher = " << c.teacher << '\n';
  os << "run_id = " << c.run_id << '\n'
     << "deterministic = " << (c.deterministic ? "true" : "false") << '\n';
  return os.str();
}

double EvalMetrics::at(const std::string& key) const {
  const auto it = values.find(key);
  if (it == values.end()) throw Error(ErrorKind::Config, "no metric named " + key);
  return it->second;
}

DenseMap predict_task(const PredictorNet& net, Task task, const DenseMap& rgb) {
  DenseMap y = net.predict(rgb);
  y.set_semantics(task_semantics(task));
  return y;
}

const DenseMap& task_target(const SceneSample& s, Task task) {
  switch (task) {
    case Task::Depth: return s.disparity;
    case Task::Normal: return s.normal;
    case Task::Edge: return s.edge;
  }
  return s.disparity;
}

void apply_position_bias(DenseMap& target, double amplitude) {
  const int h = target.height();
  const int w = target.width();
  const int c = target.channels();
  for (int i = 0; i < h; ++i) {
    const double sv = std::sin(2.0 * std::numbers::pi * (i + 0.5) / h);
    for (int j = 0; j < w; ++j) {
      const double su = std::sin(2.0 * std::numbers::pi * (j + 0.5) / w);
      const double f = 1.0 + amplitude * 0.5 * (su + sv);
      for (int k = 0; k < c; ++k) target.at(i, j, k) *= f;
    }
  }
}

ObjectiveEval training_objective(const PredictorNet& net, const LinearPredictorHead& head,
                                 const TrainConfig& cfg, const DenseMap& rgb,
                                 const DenseMap* target, std::span<const CropTransform> ts,
                                 const EquivariantAverage* frozen) {
  const bool with_eq = cfg.mode != TrainMode::Sup && cfg.mode != TrainMode::Aug;
  const StepContext ctx{cfg.task, cfg.loss_layer, cfg.window_margin, cfg.target_bias};
  ObjectiveEval r;
  r.parameters.assign(static_cast<std::size_t>(net.parameter_count()), 0.0);
  r.head.assign(head.weights().size(), 0.0);
  ImageLoss l = image_step(net, head, ctx, rgb, target, ts, with_eq ? cfg.lambda : 0.0, with_eq,
                           r.parameters, r.head, frozen);
  r.task = l.task;
  r.eq = l.eq;
  r.value = l.task + (with_eq ? cfg.lambda * l.eq : 0.0);
  r.average = std::move(l.average);
  return r;
}

double validation_eqloss(const PredictorNet& net, Task task, std::span<const DenseMap> images,
                         const CropSampler& sampler, int crops, std::uint64_t seed,
                         double window_margin) {
  if (images.empty()) throw Error(ErrorKind::EmptyMetric, "no validation images");
  CropSampler s = sampler;
  s.jitter = JitterRanges{0.0, 0.0, 0.0, 0.0};
  const WeightMap window = cosine_window(s.out_h, s.out_w, window_margin);
  const LinearPredictorHead head(net.architecture().out_channels);
  const PredictorFn f = [&](const DenseMap& x) { return predict_task(net, task, x); };
  double sum = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    RandomState rng = RandomState::substream(seed, i);
    std::vector<CropTransform> ts;
    for (int k = 0; k < crops; ++k) {
      ts.push_back(sample_transform(s, images[i].height(), images[i].width(), rng));
    }
    const CropPredictions p = predict_crops(f, images[i], ts, window);
    sum += equivariant_loss(p.outputs, ts, p.average, head).value;
  }
  return sum / static_cast<double>(images.size());
}

EvalMetrics evaluate_predictor(const PredictorFn& f, Task task,
                               std::span<const SceneSample> samples) {
  if (samples.empty()) throw Error(ErrorKind::EmptyMetric, "no evaluation samples");
  EvalMetrics m;
  const double n = static_cast<double>(samples.size());
  for (const SceneSample& s : samples) {
    const DenseMap pred = f(s.rgb);
    switch (task) {
      case Task::Depth: {
        const AlignmentCoeffs a = lsq_align(pred, s.disparity);
        const DenseMap depth = disparity_to_depth(apply_alignment(pred, a));
        m.values["absrel"] += absrel(depth, s.depth) / n;
        m.values["delta_1.25"] += delta_gt(depth, s.depth) / n;
        break;
      }
      case Task::Normal: {
        const AngularStats st = angular_error(pred, s.normal);
        m.values["angular_mean"] += st.mean_deg / n;
        m.values["angular_median"] += st.median_deg / n;
        m.values["angular_11.25"] += st.pct_below / n;
        break;
      }
      case Task::Edge:
        m.values["l1"] += l1_error(pred, s.edge) / n;
        break;
    }
  }
  return m;
}

EvalMetrics evaluate(const PredictorNet& net, const TrainConfig& cfg,
                     std::span<const SceneSample> samples) {
  EvalMetrics m = evaluate_predictor(
      [&](const DenseMap& x) { return predict_task(net, cfg.task, x); }, cfg.task, samples);
  std::vector<DenseMap> images;
  for (const SceneSample& s : samples) images.push_back(s.rgb);
  m.values["eqloss"] = validation_eqloss(net, cfg.task, images, cfg.sampler, cfg.val_crops,
                                         cfg.val_seed, cfg.window_margin);
  return m;
}

TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest,
                  const std::filesystem::path& out_dir) {
  cfg.check();
  if (cfg.mode == TrainMode::Finetune) {
    if (cfg.teacher.empty()) throw Error(ErrorKind::Config, "finetune needs a teacher checkpoint");
    const PredictorNet teacher = load_checkpoint(cfg.teacher, cfg.effective_arch());
    return finetune_unsupervised(cfg, manifest, teacher, out_dir);
  }
  std::vector<SceneSample> samples = load_split(manifest, "train");
  if (cfg.max_train > 0 && samples.size() > static_cast<std::size_t>(cfg.max_train)) {
    samples.resize(static_cast<std::size_t>(cfg.max_train));
  }
  const std::vector<SceneSample> val = val_samples(cfg, manifest);
  std::vector<DenseMap> images;
  std::vector<const DenseMap*> targets;
  for (const SceneSample& s : samples) images.push_back(s.rgb);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const bool labeled = cfg.mode != TrainMode::SemiSup || i < static_cast<std::size_t>(cfg.labeled_count);
    targets.push_back(labeled ? &task_target(samples[i], cfg.task) : nullptr);
  }
  PredictorNet net(cfg.effective_arch(), cfg.seed);
  return run_loop(cfg, net, images, targets, {}, val, out_dir);
}

TrainResult finetune_unsupervised(const TrainConfig& cfg, const DatasetManifest& manifest,
                                  const PredictorNet& teacher,
                                  const std::filesystem::path& out_dir) {
  TrainConfig c = cfg;
  c.mode = TrainMode::Finetune;
  c.target_bias = 0.0;
  c.check();
  if (!(teacher.architecture() == c.effective_arch())) {
    throw Error(ErrorKind::Architecture, "teacher " + teacher.architecture().describe() +
                                             " does not match student " +
                                             c.effective_arch().describe());
  }
  const RgbOnlyLoader loader(manifest, "train");
  std::vector<DenseMap> images;
  const std::size_t n = c.max_train > 0 ? std::min<std::size_t>(loader.size(), c.max_train)
                                        : loader.size();
  for (std::size_t i = 0; i < n; ++i) images.push_back(loader.image(i));
  const std::vector<const DenseMap*> no_targets(images.size(), nullptr);
  const std::vector<SceneSample> val = val_samples(c, manifest);
  PredictorNet student = teacher;
  const PredictorNet frozen = teacher;
  const Task task = c.task;
  auto pseudo = [&frozen, task](const DenseMap& rgb) { return predict_task(frozen, task, rgb); };
  return run_loop(c, student, images, no_targets, pseudo, val, out_dir);
}

}  // namespace eqreg
