#include "eqreg/equivariance.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "eqreg/error.hpp"

namespace eqreg {
namespace {

std::pair<int, int> normalized_offset(const CropTransform& t, int h, int w) {
  int dy = static_cast<int>(t.y0);
  int dx = static_cast<int>(t.x0);
  if (t.boundary == Boundary::Wrap) {
    dy = ((dy % h) + h) % h;
    dx = ((dx % w) + w) % w;
  }
  return {dy, dx};
}

}  // namespace

EquivariantAverage equivariant_average(std::span<const DenseMap> crop_outputs,
                                       std::span<const CropTransform> transforms,
                                       const WeightMap& window, int src_h, int src_w) {
  if (crop_outputs.empty()) throw Error(ErrorKind::EmptySample, "no crop outputs to average");
  if (crop_outputs.size() != transforms.size()) {
    throw Error(ErrorKind::Dimension, "crop outputs and transforms differ in count");
  }
  const int c = crop_outputs.front().channels();
  DenseMap accum(src_h, src_w, c, crop_outputs.front().semantics());
  DenseMap weight(src_h, src_w, 1, Semantics::Weight);
  for (std::size_t k = 0; k < crop_outputs.size(); ++k) {
    const DenseMap& out = crop_outputs[k];
    const CropTransform& t = transforms[k];
    if (out.height() != t.out_h || out.width() != t.out_w || out.channels() != c) {
      throw Error(ErrorKind::Dimension, "crop output " + std::to_string(k) +
                                            " does not match its transform");
    }
    WeightMap w = window;
    if (out.has_mask()) {
      for (int p = 0; p < w.pixels(); ++p) {
        if (!out.valid(p)) w.values()[p] = 0.0;
      }
    }
    const SplatResult s = inverse_splat(t, out, w, src_h, src_w);
    for (std::size_t i = 0; i < accum.size(); ++i) accum.values()[i] += s.accum.values()[i];
    for (std::size_t i = 0; i < weight.size(); ++i) weight.values()[i] += s.weights.values()[i];
  }
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(src_h) * src_w, 0);
  bool covered = false;
  for (int p = 0; p < src_h * src_w; ++p) {
    const double wt = weight.values()[p];
    double* v = accum.data() + static_cast<std::size_t>(p) * c;
    if (wt > kWeightEpsilon) {
      for (int k = 0; k < c; ++k) v[k] /= wt;
      mask[p] = 1;
      covered = true;
    } else {
      for (int k = 0; k < c; ++k) v[k] = 0.0;
    }
  }
  if (!covered) {
    throw Error(ErrorKind::DegenerateCoverage, "total window weight is zero everywhere");
  }
  accum.set_mask(std::move(mask));
  EquivariantAverage avg;
  avg.mean = std::move(accum);
  avg.weight_total = std::move(weight);
  avg.transforms.assign(transforms.begin(), transforms.end());
  avg.crops = static_cast<int>(crop_outputs.size());
  return avg;
}

void check_translation_group(std::span<const CropTransform> group, int src_h, int src_w) {
  if (group.empty()) throw Error(ErrorKind::Group, "empty group");
  const Boundary bd = group.front().boundary;
  for (const CropTransform& t : group) {
    if (!t.is_integer_translation() || t.out_h != src_h || t.out_w != src_w ||
        t.boundary != bd) {
      throw Error(ErrorKind::Group, "group elements must be integer translations of the source");
    }
  }
  // Offsets are integers, so membership is a table lookup. Zero-boundary
  // offsets can reach (-h, h) and (-w, w).
  const int span_h = 2 * src_h + 1;
  const int span_w = 2 * src_w + 1;
  auto slot = [&](const CropTransform& t) -> long {
    const auto n = normalized_offset(t, src_h, src_w);
    if (std::abs(n.first) > src_h || std::abs(n.second) > src_w) return -1;
    return static_cast<long>(n.first + src_h) * span_w + (n.second + src_w);
  };
  std::vector<std::uint8_t> member(static_cast<std::size_t>(span_h) * span_w, 0);
  for (const CropTransform& g : group) member[static_cast<std::size_t>(slot(g))] = 1;
  for (const CropTransform& a : group) {
    for (const CropTransform& b : group) {
      const CropTransform ab = compose(a, b);
      const long k = slot(ab);
      if (k < 0 || member[static_cast<std::size_t>(k)] == 0) {
        throw Error(ErrorKind::Group, "set not closed: composition gives offset (" +
                                          std::to_string(ab.y0) + ", " + std::to_string(ab.x0) +
                                          ")");
      }
    }
  }
}

CropPredictions predict_crops(const PredictorFn& f, const DenseMap& x,
                              std::span<const CropTransform> transforms,
                              const WeightMap& window) {
  CropPredictions r;
  r.outputs.reserve(transforms.size());
  for (const CropTransform& t : transforms) {
    const DenseMap crop = apply(t, x);
    DenseMap y = f(crop);
    if (y.height() != crop.height() || y.width() != crop.width()) {
      throw Error(ErrorKind::Dimension, "predictor changed the spatial size");
    }
    y.set_mask(joint_mask(y, crop));
    r.outputs.push_back(std::move(y));
  }
  r.average = equivariant_average(r.outputs, transforms, window, x.height(), x.width());
  return r;
}

DenseMap exact_average_discrete(const PredictorFn& f, const DenseMap& x,
                                std::span<const CropTransform> group) {
  check_translation_group(group, x.height(), x.width());
  const WeightMap unit(x.height(), x.width(), 1, Semantics::Weight, 1.0);
  return predict_crops(f, x, group, unit).average.mean;
}

LinearPredictorHead::LinearPredictorHead(int channels)
    : channels_(channels), weights_(static_cast<std::size_t>(channels) * channels, 0.0) {
  for (int i = 0; i < channels; ++i) weights_[static_cast<std::size_t>(i) * channels + i] = 1.0;
}

void LinearPredictorHead::apply(const double* in, double* out) const {
  for (int r = 0; r < channels_; ++r) {
    double s = 0.0;
    for (int c = 0; c < channels_; ++c) s += weights_[r * channels_ + c] * in[c];
    out[r] = s;
  }
}

DenseMap LinearPredictorHead::apply(const DenseMap& m) const {
  if (m.channels() != channels_) throw Error(ErrorKind::Dimension, "head channel mismatch");
  DenseMap out(m.height(), m.width(), channels_, m.semantics());
  for (int p = 0; p < m.pixels(); ++p) {
    apply(m.data() + static_cast<std::size_t>(p) * channels_,
          out.data() + static_cast<std::size_t>(p) * channels_);
  }
  out.set_mask(m.mask());
  return out;
}

EqLossResult equivariant_loss(std::span<const DenseMap> crop_outputs,
                              std::span<const CropTransform> transforms,
                              const EquivariantAverage& avg,
                              const LinearPredictorHead& head) {
  if (crop_outputs.empty()) throw Error(ErrorKind::EmptySample, "no crop outputs");
  if (crop_outputs.size() != transforms.size()) {
    throw Error(ErrorKind::Dimension, "crop outputs and transforms differ in count");
  }
  const int c = avg.mean.channels();
  if (head.channels() != c) {
    throw Error(ErrorKind::Dimension, "head has " + std::to_string(head.channels()) +
                                          " channels, average has " + std::to_string(c));
  }
  const std::size_t crops = crop_outputs.size();

  double z = 0.0;
  for (int p = 0; p < avg.mean.pixels(); ++p) {
    if (!avg.mean.valid(p)) continue;
    const double* v = avg.mean.data() + static_cast<std::size_t>(p) * c;
    for (int k = 0; k < c; ++k) z += v[k] * v[k];
  }
  EqLossResult r;
  r.normalizer_clamped = z < kNormalizerFloor;
  r.normalizer = std::max(z, kNormalizerFloor);
  r.per_crop.resize(crops);
  r.per_crop_residual.resize(crops);
  r.grad_head.assign(static_cast<std::size_t>(c) * c, 0.0);
  r.grad_wrt_crop_outputs.reserve(crops);

  const double g_scale = 2.0 / (r.normalizer * static_cast<double>(crops));
  std::vector<double> pred(static_cast<std::size_t>(c));
  std::vector<double> res(static_cast<std::size_t>(c));
  for (std::size_t k = 0; k < crops; ++k) {
    const DenseMap& out = crop_outputs[k];
    if (out.channels() != c || out.height() != transforms[k].out_h ||
        out.width() != transforms[k].out_w) {
      throw Error(ErrorKind::Dimension, "crop output " + std::to_string(k) + " has wrong shape");
    }
    const DenseMap target = apply(transforms[k], avg.mean);
    DenseMap grad(out.height(), out.width(), c, out.semantics());
    double sum = 0.0;
    for (int p = 0; p < out.pixels(); ++p) {
      if (!out.valid(p) || !target.valid(p)) continue;
      const double* o = out.data() + static_cast<std::size_t>(p) * c;
      const double* tg = target.data() + static_cast<std::size_t>(p) * c;
      head.apply(o, pred.data());
      for (int i = 0; i < c; ++i) {
        res[i] = pred[i] - tg[i];
        sum += res[i] * res[i];
      }
      double* g = grad.data() + static_cast<std::size_t>(p) * c;
      for (int col = 0; col < c; ++col) {
        double acc = 0.0;
        for (int row = 0; row < c; ++row) acc += head.at(row, col) * res[row];
        g[col] = g_scale * acc;
      }
      for (int row = 0; row < c; ++row) {
        for (int col = 0; col < c; ++col) {
          r.grad_head[static_cast<std::size_t>(row) * c + col] += g_scale * res[row] * o[col];
        }
      }
    }
    r.per_crop_residual[k] = sum;
    r.per_crop[k] = sum / r.normalizer;
    r.grad_wrt_crop_outputs.push_back(std::move(grad));
  }
  double total = 0.0;
  for (double v : r.per_crop) total += v;
  r.value = total / static_cast<double>(crops);
  return r;
}

TotalLoss total_loss(const TaskLoss& task, const EqLossResult& eq, double lambda) {
  if (!(lambda >= 0.0)) throw Error(ErrorKind::Config, "lambda must be non-negative");
  TotalLoss t;
  t.task = task.value;
  t.equivariant = eq.value;
  t.value = task.value + lambda * eq.value;
  t.grad_outputs = task.grad_outputs;
  t.grad_captured.reserve(eq.grad_wrt_crop_outputs.size());
  for (const DenseMap& g : eq.grad_wrt_crop_outputs) t.grad_captured.push_back(scaled(g, lambda));
  t.grad_head.resize(eq.grad_head.size());
  for (std::size_t i = 0; i < eq.grad_head.size(); ++i) t.grad_head[i] = lambda * eq.grad_head[i];
  return t;
}

TaskLoss l1_task_loss(std::span<const DenseMap> outputs, std::span<const DenseMap> targets) {
  if (outputs.empty()) throw Error(ErrorKind::EmptySample, "no outputs for task loss");
  if (outputs.size() != targets.size()) {
    throw Error(ErrorKind::Dimension, "outputs and targets differ in count");
  }
  TaskLoss loss;
  const double n = static_cast<double>(outputs.size());
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const DenseMap& o = outputs[k];
    const DenseMap& y = targets[k];
    if (!o.same_shape(y)) throw Error(ErrorKind::Dimension, "output/target shape mismatch");
    const int c = o.channels();
    DenseMap g(o.height(), o.width(), c, o.semantics());
    int valid = 0;
    for (int p = 0; p < o.pixels(); ++p) valid += (o.valid(p) && y.valid(p)) ? 1 : 0;
    if (valid == 0) {
      loss.grad_outputs.push_back(std::move(g));
      continue;
    }
    const double inv = 1.0 / (static_cast<double>(valid) * c * n);
    double sum = 0.0;
    for (int p = 0; p < o.pixels(); ++p) {
      if (!o.valid(p) || !y.valid(p)) continue;
      for (int i = 0; i < c; ++i) {
        const std::size_t idx = static_cast<std::size_t>(p) * c + i;
        const double d = o.values()[idx] - y.values()[idx];
        sum += std::abs(d);
        g.values()[idx] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
      }
    }
    loss.value += sum * inv;
    loss.grad_outputs.push_back(std::move(g));
  }
  return loss;
}

DenseMap predict_tta(const PredictorFn& f, const DenseMap& x, const CropSampler& sampler,
                     int crops, RandomState& rng, double window_margin) {
  if (crops < 0) throw Error(ErrorKind::Config, "crop count must be non-negative");
  CropSampler s = sampler;
  s.jitter = JitterRanges{0.0, 0.0, 0.0, 0.0};
  std::vector<CropTransform> ts;
  ts.push_back(CropTransform::identity(x.height(), x.width()));
  ts.back().out_h = s.out_h;
  ts.back().out_w = s.out_w;
  for (int k = 0; k < crops; ++k) ts.push_back(sample_transform(s, x.height(), x.width(), rng));
  return predict_crops(f, x, ts, cosine_window(s.out_h, s.out_w, window_margin)).average.mean;
}

}  // namespace eqreg
