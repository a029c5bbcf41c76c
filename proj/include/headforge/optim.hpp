// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "headforge/error.hpp"

namespace headforge {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

/// First/second moments in float32 so they checkpoint bit-exactly.
struct AdamState {
  std::vector<float> m, v;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0f), v(n, 0.0f) {}
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Bias-corrected Adam. A non-finite gradient is rejected before anything is
/// modified.
inline void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (grads.size() != params.size()) throw ShapeError("adam_step: gradient size mismatch");
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: optimizer state size mismatch");
  for (float g : grads)
    if (!std::isfinite(g)) throw PoisonedGradientError("adam_step: non-finite gradient");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    state.m[i] = static_cast<float>(m);
    state.v[i] = static_cast<float>(v);
    params[i] = static_cast<float>(params[i] - cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps));
  }
}

}  // namespace headforge
