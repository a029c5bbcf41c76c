// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "headforge/error.hpp"
#include "headforge/image.hpp"
#include "headforge/rng.hpp"

namespace headforge {

/// Discrete diffusion noise schedule: cumulative signal fraction alpha_bar[t].
class DiffusionSchedule {
 public:
  /// Scaled-linear beta schedule: beta_t = lerp(sqrt(beta_start), sqrt(beta_end))^2,
  /// alpha_bar the cumulative product of (1 - beta).
  static DiffusionSchedule scaled_linear(int num_steps = 1000, double beta_start = 0.00085,
                                         double beta_end = 0.012) {
    if (num_steps < 1) throw InvalidRangeError("schedule: num_steps must be >= 1");
    if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end))
      throw InvalidRangeError("schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> ab(static_cast<std::size_t>(num_steps));
    const double s0 = std::sqrt(beta_start), s1 = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < num_steps; ++i) {
      const double f = num_steps == 1 ? 0.0 : double(i) / double(num_steps - 1);
      const double s = s0 + (s1 - s0) * f;
      prod *= 1.0 - s * s;
      ab[static_cast<std::size_t>(i)] = prod;
    }
    return DiffusionSchedule(std::move(ab));
  }

  /// Arbitrary schedule; validated against the monotonicity/range invariants.
  static DiffusionSchedule from_alpha_bar(std::vector<double> alpha_bar) {
    return DiffusionSchedule(std::move(alpha_bar));
  }

  int num_steps() const { return static_cast<int>(alpha_bar_.size()); }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(check(t))); }
  std::span<const double> alpha_bars() const { return alpha_bar_; }

  /// Uniform integer timestep t with lo*T <= t < hi*T.
  int sample_timestep(std::pair<double, double> range, Rng& rng) const {
    const auto [lo, hi] = timestep_bounds(range);
    return static_cast<int>(rng.uniform_int(lo, hi));
  }

  std::pair<int, int> timestep_bounds(std::pair<double, double> range) const {
    const auto [lo, hi] = range;
    if (!(0.0 <= lo && lo < hi && hi <= 1.0))
      throw InvalidRangeError("t_range must satisfy 0 <= lo < hi <= 1");
    const double T = num_steps();
    // Tolerance absorbs representation error in lo*T / hi*T near integers.
    const int a = static_cast<int>(std::ceil(lo * T - 1e-9));
    const int b = std::min(static_cast<int>(std::ceil(hi * T - 1e-9)) - 1, num_steps() - 1);
    if (a > b) throw InvalidRangeError("t_range is empty after rounding");
    return {a, b};
  }

  /// sqrt(ab_t) * z + sqrt(1 - ab_t) * eps.
  Image add_noise(const Image& z, const Image& eps, int t) const {
    require_same_shape(z, eps, "add_noise");
    const double ab = alpha_bar(t);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    Image out(z.height, z.width, z.channels);
    for (std::size_t i = 0; i < z.size(); ++i)
      out.data[i] = static_cast<float>(sa * z.data[i] + sn * eps.data[i]);
    return out;
  }

  /// SDS weighting w(t) = sqrt(ab_t) * (1 - ab_t).
  double sds_weight(int t) const {
    const double ab = alpha_bar(t);
    return std::sqrt(ab) * (1.0 - ab);
  }

 private:
  explicit DiffusionSchedule(std::vector<double> ab) : alpha_bar_(std::move(ab)) {
    if (alpha_bar_.empty()) throw InvalidRangeError("schedule: empty alpha_bar");
    for (std::size_t i = 0; i < alpha_bar_.size(); ++i) {
      if (!(alpha_bar_[i] > 0.0 && alpha_bar_[i] <= 1.0))
        throw InvalidRangeError("schedule: alpha_bar[" + std::to_string(i) + "] outside (0,1]");
      if (i > 0 && alpha_bar_[i] > alpha_bar_[i - 1])
        throw InvalidRangeError("schedule: alpha_bar must be non-increasing");
    }
  }

  int check(int t) const {
    if (t < 0 || t >= num_steps())
      throw InvalidRangeError("timestep " + std::to_string(t) + " out of range");
    return t;
  }

  std::vector<double> alpha_bar_;
};

}  // namespace headforge
