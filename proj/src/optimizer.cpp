#include "eqreg/optimizer.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "eqreg/error.hpp"

namespace eqreg {

void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                double lr, double weight_decay) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw Error(ErrorKind::Dimension, "optimizer shapes do not match parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw Error(ErrorKind::Divergence, "non-finite gradient at parameter " + std::to_string(i) +
                                             " in step " + std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const AdamWHyper& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grads[i];
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr * weight_decay * params[i];
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

double cosine_lr(std::int64_t step, std::int64_t total, double lr_start, double lr_end) {
  if (total <= 0 || step < 0 || step > total) {
    throw Error(ErrorKind::Config, "cosine schedule step " + std::to_string(step) +
                                       " outside [0, " + std::to_string(total) + "]");
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace eqreg
