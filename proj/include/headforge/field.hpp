// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "headforge/error.hpp"
#include "headforge/head_prior.hpp"
#include "headforge/image.hpp"
#include "headforge/rng.hpp"
#include "headforge/vec.hpp"

namespace headforge {

inline constexpr int kEncodedDim = 32;
inline constexpr int kHiddenDim = 64;
inline constexpr int kFieldOutputs = 7;  // normals(3), density(1), rgb(3)

struct FieldConfig {
  int levels = 16;
  int features_per_level = 2;
  int table_size_log2 = 19;
  int base_resolution = 16;
  double max_resolution = 2048;  // finest level; growth = (max/base)^(1/(levels-1)) ~ 1.38
  double table_init = 1e-4;      // hash entries ~ U(-init, init)
  double density_bias_init = -10.0;

  int output_dim() const { return levels * features_per_level; }
  double growth() const {
    return levels > 1 ? std::exp(std::log(max_resolution / base_resolution) / (levels - 1)) : 1.0;
  }
};

/// Named slice of the flattened parameter vector.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::int64_t> shape;
  std::size_t size() const {
    std::size_t n = 1;
    for (auto s : shape) n *= static_cast<std::size_t>(s);
    return n;
  }
};

/// Hash-grid tables and MLP weights in one flat float vector.
///
/// Layout (stable, used for optimizer state and checkpoints):
///   encoder.tables   [entries, features]   all levels back to back
///   mlp.w0 [64,32] mlp.b0 [64] mlp.w1 [64,64] mlp.b1 [64] mlp.w2 [7,64] mlp.b2 [7]
/// Weights are row-major [out, in].
class FieldParams {
 public:
  FieldParams() = default;
  explicit FieldParams(const FieldConfig& cfg) : cfg_(cfg) {
    if (cfg.output_dim() != kEncodedDim)
      throw InvalidRangeError("hash grid output must be 32-dimensional (levels * features)");
    if (cfg.features_per_level != 2) throw InvalidRangeError("features_per_level must be 2");
    if (cfg.table_size_log2 < 4 || cfg.table_size_log2 > 24) throw InvalidRangeError("table_size_log2 out of range");
    const std::uint64_t table_cap = std::uint64_t(1) << cfg.table_size_log2;
    const double g = cfg.growth();
    std::size_t offset = 0;
    for (int l = 0; l < cfg.levels; ++l) {
      Level lv;
      lv.resolution = static_cast<int>(std::floor(cfg.base_resolution * std::pow(g, l) + 1e-9));
      const std::uint64_t dense = std::uint64_t(lv.resolution + 1) * (lv.resolution + 1) * (lv.resolution + 1);
      lv.hashed = dense > table_cap;
      lv.entries = lv.hashed ? table_cap : dense;
      lv.offset = offset;
      offset += lv.entries * cfg.features_per_level;
      levels_.push_back(lv);
    }
    blocks_.push_back({"encoder.tables", 0, {std::int64_t(offset / 2), 2}});
    auto add = [&](const char* name, std::vector<std::int64_t> shape) {
      ParamBlock b{name, offset, std::move(shape)};
      offset += b.size();
      blocks_.push_back(std::move(b));
    };
    add("mlp.w0", {kHiddenDim, kEncodedDim});
    add("mlp.b0", {kHiddenDim});
    add("mlp.w1", {kHiddenDim, kHiddenDim});
    add("mlp.b1", {kHiddenDim});
    add("mlp.w2", {kFieldOutputs, kHiddenDim});
    add("mlp.b2", {kFieldOutputs});
    data_.assign(offset, 0.0f);
  }

  struct Level {
    int resolution = 0;  // cells per axis
    bool hashed = false;
    std::uint64_t entries = 0;
    std::size_t offset = 0;  // into data (floats)
  };

  const FieldConfig& config() const { return cfg_; }
  const std::vector<Level>& levels() const { return levels_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw Error("unknown parameter block " + name);
  }
  std::size_t encoder_size() const { return blocks_[0].size(); }
  std::size_t mlp_offset() const { return blocks_[1].offset; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  /// Tables ~ U(-table_init, table_init); weights He-uniform, biases
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); density output bias = density_bias_init.
  void initialize(Rng& rng) {
    for (std::size_t i = 0; i < encoder_size(); ++i)
      data_[i] = static_cast<float>(rng.uniform(-cfg_.table_init, cfg_.table_init));
    auto fill = [&](const std::string& w, const std::string& b, int fan_in) {
      const double lw = std::sqrt(6.0 / fan_in), lb = 1.0 / std::sqrt(double(fan_in));
      const auto& bw = block(w);
      for (std::size_t i = 0; i < bw.size(); ++i) data_[bw.offset + i] = static_cast<float>(rng.uniform(-lw, lw));
      const auto& bb = block(b);
      for (std::size_t i = 0; i < bb.size(); ++i) data_[bb.offset + i] = static_cast<float>(rng.uniform(-lb, lb));
    };
    fill("mlp.w0", "mlp.b0", kEncodedDim);
    fill("mlp.w1", "mlp.b1", kHiddenDim);
    fill("mlp.w2", "mlp.b2", kHiddenDim);
    data_[block("mlp.b2").offset + 3] = static_cast<float>(cfg_.density_bias_init);
  }

  /// Throws PoisonedParameterError on the first non-finite entry.
  void validate() const {
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!std::isfinite(data_[i]))
        throw PoisonedParameterError("non-finite field parameter at index " + std::to_string(i));
  }

  friend bool operator==(const FieldParams& a, const FieldParams& b) {
    return a.data_.size() == b.data_.size() &&
           std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
  }

 private:
  FieldConfig cfg_;
  std::vector<Level> levels_;
  std::vector<ParamBlock> blocks_;
  std::vector<float> data_;
};

/// Per-point encoder record: table slots and trilinear weights per level.
struct EncodingTrace {
  static constexpr int kMaxLevels = 16;
  std::array<std::array<std::uint32_t, 8>, kMaxLevels> entry{};  // float offset of the 2-feature entry
  std::array<std::array<double, 8>, kMaxLevels> weight{};
  std::array<std::array<double, 3>, kMaxLevels> frac{};
  Vec3 clamped;
  std::array<bool, 3> inside{true, true, true};  // false if that coordinate was clamped
};

/// Multi-resolution hash encoding of x in [-1,1]^3 (clamped), 32 features.
inline void encode(const FieldParams& params, const Vec3& x, std::span<double, kEncodedDim> out,
                   EncodingTrace* trace = nullptr) {
  const auto data = params.data();
  const auto& levels = params.levels();
  Vec3 u;
  std::array<bool, 3> inside{};
  for (int a = 0; a < 3; ++a) {
    inside[a] = x[a] >= -1.0 && x[a] <= 1.0;
    u[a] = (std::clamp(x[a], -1.0, 1.0) + 1.0) * 0.5;
  }
  if (trace) {
    trace->clamped = u * 2.0 - Vec3{1, 1, 1};
    trace->inside = inside;
  }
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& lv = levels[l];
    const int n = lv.resolution;
    std::array<std::int64_t, 3> c{};
    std::array<double, 3> f{};
    for (int a = 0; a < 3; ++a) {
      const double p = u[a] * n;
      c[a] = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(p)), n - 1);
      f[a] = p - double(c[a]);
    }
    double acc0 = 0, acc1 = 0;
    for (int corner = 0; corner < 8; ++corner) {
      std::uint64_t q[3];
      double w = 1;
      for (int a = 0; a < 3; ++a) {
        const int bit = (corner >> a) & 1;
        q[a] = std::uint64_t(c[a] + bit);
        w *= bit ? f[a] : 1.0 - f[a];
      }
      std::uint64_t slot;
      if (lv.hashed) {
        slot = (q[0] * 1u ^ q[1] * 2654435761u ^ q[2] * 805459861u) & (lv.entries - 1);
      } else {
        const std::uint64_t side = std::uint64_t(n) + 1;
        slot = (q[2] * side + q[1]) * side + q[0];
      }
      const std::size_t at = lv.offset + slot * 2;
      acc0 += w * data[at];
      acc1 += w * data[at + 1];
      if (trace) {
        trace->entry[l][corner] = static_cast<std::uint32_t>(at);
        trace->weight[l][corner] = w;
      }
    }
    if (trace) trace->frac[l] = f;
    out[2 * l] = acc0;
    out[2 * l + 1] = acc1;
  }
}

/// Scatter d(loss)/d(features) into table gradients.
inline void encode_backward_tables(const EncodingTrace& tr, std::span<const double, kEncodedDim> d_out,
                                   std::span<float> grad, int levels) {
  for (int l = 0; l < levels; ++l)
    for (int corner = 0; corner < 8; ++corner) {
      const auto at = tr.entry[l][corner];
      const double w = tr.weight[l][corner];
      grad[at] += static_cast<float>(w * d_out[2 * l]);
      grad[at + 1] += static_cast<float>(w * d_out[2 * l + 1]);
    }
}

/// d(loss)/dx through the trilinear weights (zero along clamped axes).
inline Vec3 encode_backward_position(const FieldParams& params, const EncodingTrace& tr,
                                     std::span<const double, kEncodedDim> d_out) {
  const auto data = params.data();
  Vec3 g;
  const auto& levels = params.levels();
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const double scale = levels[l].resolution * 0.5;  // dp/dx
    const auto& f = tr.frac[l];
    for (int corner = 0; corner < 8; ++corner) {
      const auto at = tr.entry[l][corner];
      const double v = d_out[2 * l] * data[at] + d_out[2 * l + 1] * data[at + 1];
      for (int a = 0; a < 3; ++a) {
        double w = 1;
        for (int b = 0; b < 3; ++b) {
          const int bit = (corner >> b) & 1;
          if (b == a) w *= bit ? 1.0 : -1.0;
          else w *= bit ? f[b] : 1.0 - f[b];
        }
        g[a] += v * w * scale;
      }
    }
  }
  for (int a = 0; a < 3; ++a)
    if (!tr.inside[a]) g[a] = 0;
  return g;
}

/// Activations kept for the MLP backward pass.
struct MlpTrace {
  std::array<double, kEncodedDim> in{};
  std::array<double, kHiddenDim> h0{};  // post-ReLU
  std::array<double, kHiddenDim> h1{};
  std::array<double, kFieldOutputs> out{};
};

inline void mlp_forward(const FieldParams& params, MlpTrace& t) {
  const auto d = params.data();
  const std::size_t o = params.mlp_offset();
  const float* w0 = d.data() + o;
  const float* b0 = w0 + kHiddenDim * kEncodedDim;
  const float* w1 = b0 + kHiddenDim;
  const float* b1 = w1 + kHiddenDim * kHiddenDim;
  const float* w2 = b1 + kHiddenDim;
  const float* b2 = w2 + kFieldOutputs * kHiddenDim;
  for (int i = 0; i < kHiddenDim; ++i) {
    double s = b0[i];
    for (int j = 0; j < kEncodedDim; ++j) s += double(w0[i * kEncodedDim + j]) * t.in[j];
    t.h0[i] = s > 0 ? s : 0;
  }
  for (int i = 0; i < kHiddenDim; ++i) {
    double s = b1[i];
    for (int j = 0; j < kHiddenDim; ++j) s += double(w1[i * kHiddenDim + j]) * t.h0[j];
    t.h1[i] = s > 0 ? s : 0;
  }
  for (int i = 0; i < kFieldOutputs; ++i) {
    double s = b2[i];
    for (int j = 0; j < kHiddenDim; ++j) s += double(w2[i * kHiddenDim + j]) * t.h1[j];
    t.out[i] = s;
  }
}

/// Accumulates weight gradients into `grad` and writes d(loss)/d(input) to d_in.
inline void mlp_backward(const FieldParams& params, const MlpTrace& t,
                         std::span<const double, kFieldOutputs> d_out, std::span<float> grad,
                         std::span<double, kEncodedDim> d_in) {
  const auto d = params.data();
  const std::size_t o = params.mlp_offset();
  const float* w0 = d.data() + o;
  const float* w1 = w0 + kHiddenDim * kEncodedDim + kHiddenDim;
  const float* w2 = w1 + kHiddenDim * kHiddenDim + kHiddenDim;
  float* gw0 = grad.data() + o;
  float* gb0 = gw0 + kHiddenDim * kEncodedDim;
  float* gw1 = gb0 + kHiddenDim;
  float* gb1 = gw1 + kHiddenDim * kHiddenDim;
  float* gw2 = gb1 + kHiddenDim;
  float* gb2 = gw2 + kFieldOutputs * kHiddenDim;

  std::array<double, kHiddenDim> dh1{};
  for (int i = 0; i < kFieldOutputs; ++i) {
    const double g = d_out[i];
    if (g == 0) continue;
    gb2[i] += static_cast<float>(g);
    for (int j = 0; j < kHiddenDim; ++j) {
      gw2[i * kHiddenDim + j] += static_cast<float>(g * t.h1[j]);
      dh1[j] += g * w2[i * kHiddenDim + j];
    }
  }
  std::array<double, kHiddenDim> dh0{};
  for (int i = 0; i < kHiddenDim; ++i) {
    if (t.h1[i] <= 0) continue;
    const double g = dh1[i];
    gb1[i] += static_cast<float>(g);
    for (int j = 0; j < kHiddenDim; ++j) {
      gw1[i * kHiddenDim + j] += static_cast<float>(g * t.h0[j]);
      dh0[j] += g * w1[i * kHiddenDim + j];
    }
  }
  std::fill(d_in.begin(), d_in.end(), 0.0);
  for (int i = 0; i < kHiddenDim; ++i) {
    if (t.h0[i] <= 0) continue;
    const double g = dh0[i];
    gb0[i] += static_cast<float>(g);
    for (int j = 0; j < kEncodedDim; ++j) {
      gw0[i * kEncodedDim + j] += static_cast<float>(g * t.in[j]);
      d_in[j] += g * w0[i * kEncodedDim + j];
    }
  }
}

struct FieldSample {
  double density = 0;  // sigma >= 0
  Vec3 rgb;            // in (0,1)
  Vec3 normal;         // raw predicted normal
  double raw_density = 0;
  double prior = 0;    // sigma_bar(x)
};

/// Full per-point trace for backward passes.
struct FieldTrace {
  EncodingTrace enc;
  MlpTrace mlp;
};

/// sigma = softplus(raw_density + sigma_bar(x)), c = sigmoid(raw_rgb), n = raw normals.
inline FieldSample field_eval(const FieldParams& params, double prior_density, const Vec3& x,
                              FieldTrace* trace = nullptr) {
  FieldTrace local;
  FieldTrace& t = trace ? *trace : local;
  encode(params, x, t.mlp.in, &t.enc);
  mlp_forward(params, t.mlp);
  FieldSample s;
  s.normal = {t.mlp.out[0], t.mlp.out[1], t.mlp.out[2]};
  s.raw_density = t.mlp.out[3];
  s.prior = prior_density;
  s.density = softplus(s.raw_density + prior_density);
  s.rgb = {sigmoid(t.mlp.out[4]), sigmoid(t.mlp.out[5]), sigmoid(t.mlp.out[6])};
  if (!std::isfinite(s.density) || !std::isfinite(s.rgb.x + s.rgb.y + s.rgb.z))
    throw PoisonedParameterError("field evaluation produced a non-finite value");
  return s;
}

inline FieldSample field_eval(const FieldParams& params, const PriorField& prior, const Vec3& x,
                              FieldTrace* trace = nullptr) {
  return field_eval(params, prior.density(x), x, trace);
}

/// Backward through field_eval given d(loss)/d(sigma) and d(loss)/d(rgb).
/// Adds parameter gradients to `grad`; returns d(loss)/dx when `want_position`.
inline Vec3 field_backward(const FieldParams& params, const FieldTrace& t, const FieldSample& s,
                           double d_density, const Vec3& d_rgb, std::span<float> grad,
                           bool want_position = false) {
  std::array<double, kFieldOutputs> d_out{};
  d_out[3] = d_density * sigmoid(s.raw_density + s.prior);
  for (int k = 0; k < 3; ++k) d_out[4 + k] = d_rgb[k] * s.rgb[k] * (1 - s.rgb[k]);
  std::array<double, kEncodedDim> d_in{};
  mlp_backward(params, t.mlp, d_out, grad, d_in);
  encode_backward_tables(t.enc, d_in, grad, params.config().levels);
  return want_position ? encode_backward_position(params, t.enc, d_in) : Vec3{};
}

}  // namespace headforge
