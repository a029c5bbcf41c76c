// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "headforge/error.hpp"
#include "headforge/vec.hpp"

namespace headforge {

/// Stateless 64-bit mixer, used to derive per-pixel and per-request streams.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Random source with a portable output mapping.
///
/// The engine (mt19937_64) has a standardized sequence; the float/int/normal
/// mappings below are written out by hand instead of using <random>
/// distributions, whose outputs are implementation-defined. This keeps seeded
/// traces stable across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<double>(hi - lo + 1);
    auto k = static_cast<std::int64_t>(uniform01() * span);
    return lo + std::min<std::int64_t>(k, hi - lo);
  }

  /// Standard normal via Box-Muller (one draw per call, two uniforms consumed).
  double normal() {
    const double u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * kPi * u2);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  static Rng deserialize(const std::string& state) {
    Rng r;
    std::istringstream is(state);
    is >> r.engine_;
    if (!is) throw ParseError("invalid rng state");
    return r;
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace headforge
