#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace eqreg {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamWHyper&) const = default;
};

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  AdamWHyper hyper;

  explicit OptimizerState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
  bool operator==(const OptimizerState&) const = default;
};

/// One AdamW update with decoupled weight decay:
///   p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)
/// Throws ErrorKind::Divergence on a non-finite gradient.
void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                double lr, double weight_decay);

/// lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total)) / 2
double cosine_lr(std::int64_t step, std::int64_t total, double lr_start, double lr_end);

}  // namespace eqreg
