// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "headforge/camera.hpp"
#include "headforge/error.hpp"
#include "headforge/field.hpp"
#include "headforge/head_prior.hpp"
#include "headforge/image.hpp"
#include "headforge/rng.hpp"

namespace headforge {

inline constexpr int kMaxStepsPerRay = 1024;

struct RaySamples {
  std::vector<double> t;  // distance along the ray, ascending
  std::vector<Vec3> positions;
  std::vector<double> deltas;  // spacing to the next sample (last: one stratum width)
  std::size_t size() const { return t.size(); }
};

/// Stratified samples in [near, far]: one per equal sub-interval, jittered
/// uniformly within it when `rng` is given, at the midpoint otherwise.
inline RaySamples sample_along_ray(const Ray& ray, double near, double far, int n, Rng* rng) {
  if (!(near < far)) throw InvalidRangeError("sample_along_ray: need near < far");
  if (n < 1 || n > kMaxStepsPerRay) throw InvalidRangeError("sample_along_ray: need 1 <= n <= 1024");
  RaySamples s;
  s.t.resize(n);
  s.positions.resize(n);
  s.deltas.resize(n);
  const double bin = (far - near) / n;
  for (int i = 0; i < n; ++i) {
    const double j = rng ? rng->uniform01() : 0.5;
    s.t[i] = near + (i + j) * bin;
    s.positions[i] = ray.origin + ray.direction * s.t[i];
  }
  for (int i = 0; i + 1 < n; ++i) s.deltas[i] = s.t[i + 1] - s.t[i];
  s.deltas[n - 1] = bin;
  return s;
}

struct CompositeResult {
  Vec3 rgb;
  std::vector<double> weights;
  double opacity = 0;  // sum of weights
};

/// alpha_i = 1 - exp(-sigma_i delta_i), W_i = alpha_i prod_{j<i}(1 - alpha_j),
/// pixel = sum W_i c_i + (1 - sum W_i) * background.
inline CompositeResult composite(std::span<const double> sigmas, std::span<const Vec3> colors,
                                 std::span<const double> deltas, const Vec3& background) {
  if (sigmas.size() != colors.size() || sigmas.size() != deltas.size())
    throw ShapeError("composite: arrays must have the same length");
  CompositeResult r;
  r.weights.resize(sigmas.size());
  double trans = 1.0;
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (sigmas[i] < 0) throw ContractViolation("composite: negative density");
    const double alpha = -std::expm1(-sigmas[i] * deltas[i]);
    const double w = alpha * trans;
    r.weights[i] = w;
    r.rgb += colors[i] * w;
    trans *= 1.0 - alpha;
  }
  r.opacity = 1.0 - trans;
  r.rgb += background * trans;
  return r;
}

/// Exact transmittance remaining after the composite, prod(1 - alpha_i).
inline double transmittance(std::span<const double> sigmas, std::span<const double> deltas) {
  double acc = 0;
  for (std::size_t i = 0; i < sigmas.size(); ++i) acc += sigmas[i] * deltas[i];
  return std::exp(-acc);
}

/// Entry/exit distances of a ray through a sphere at the origin.
inline std::optional<std::pair<double, double>> ray_sphere(const Ray& ray, double radius) {
  const double b = dot(ray.origin, ray.direction);
  const double c = dot(ray.origin, ray.origin) - radius * radius;
  const double disc = b * b - c;
  if (disc <= 0) return std::nullopt;
  const double s = std::sqrt(disc);
  const double t0 = std::max(0.0, -b - s), t1 = -b + s;
  if (t1 <= t0) return std::nullopt;
  return std::make_pair(t0, t1);
}

enum class NormalSource { None, DensityGradient, Predicted };

struct RenderSettings {
  int samples_per_ray = 128;
  bool jitter = true;
  // Rays stop once transmittance falls below this (0 = march every sample).
  double early_stop_transmittance = 1e-4;
  NormalSource normals = NormalSource::None;
};

struct RenderOutput {
  Image rgb;      // H x W x 3
  Image opacity;  // H x W x 1
  Image depth;    // H x W x 1, expected distance along the ray
  Image normal;   // H x W x 3 world-space, empty unless requested
};

namespace detail {

inline Rng pixel_rng(std::uint64_t seed, std::size_t pixel) {
  return Rng(splitmix64(seed ^ splitmix64(0x5bd1e995ULL + pixel)));
}

/// Central-difference gradient of total density; used for shading normals.
inline Vec3 density_gradient(const FieldParams& params, const PriorField& prior, const Vec3& x, double h) {
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 dx;
    dx[a] = h;
    g[a] = (field_eval(params, prior, x + dx).density - field_eval(params, prior, x - dx).density) / (2 * h);
  }
  return g;
}

struct RayWork {
  RaySamples samples;
  std::vector<FieldTrace> traces;
  std::vector<FieldSample> values;
  std::vector<double> alphas;
  std::size_t used = 0;  // samples actually composited (early stop)
};

/// Forward march for one pixel; fills `work` for a later backward pass.
inline void march(const FieldParams& params, const PriorField& prior, const Ray& ray, const RenderSettings& s,
                  Rng* rng, double near, double far, RayWork& work) {
  work.samples = sample_along_ray(ray, near, far, s.samples_per_ray, rng);
  const std::size_t n = work.samples.size();
  if (work.traces.size() < n) work.traces.resize(n);
  work.values.resize(n);
  work.alphas.resize(n);
  double trans = 1.0;
  work.used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (s.early_stop_transmittance > 0 && trans < s.early_stop_transmittance) break;
    work.values[i] = field_eval(params, prior, work.samples.positions[i], &work.traces[i]);
    work.alphas[i] = -std::expm1(-work.values[i].density * work.samples.deltas[i]);
    trans *= 1.0 - work.alphas[i];
    work.used = i + 1;
  }
}

}  // namespace detail

struct PixelSample {
  Vec3 rgb;  // background included
  double transmittance = 1.0;
  double depth = 0;
  Vec3 normal;  // unnormalized; zero unless requested
};

namespace detail {

inline PixelSample shade(const FieldParams& params, const PriorField& prior, const CameraFrame& frame, int row,
                         int col, const RenderSettings& settings, const Vec3& background, std::uint64_t seed,
                         RayWork& work) {
  PixelSample px;
  const Ray ray = pixel_ray(frame, row, col);
  const double radius = prior.render_radius();
  const auto span = ray_sphere(ray, radius);
  if (!span) {
    px.rgb = background;
    return px;
  }
  Rng rng = pixel_rng(seed, std::size_t(row) * frame.width + col);
  march(params, prior, ray, settings, settings.jitter ? &rng : nullptr, span->first, span->second, work);
  double trans = 1.0;
  for (std::size_t i = 0; i < work.used; ++i) {
    const double w = work.alphas[i] * trans;
    px.rgb += work.values[i].rgb * w;
    px.depth += work.samples.t[i] * w;
    if (settings.normals == NormalSource::DensityGradient && w > 1e-4)
      px.normal -= normalized(density_gradient(params, prior, work.samples.positions[i], 1e-3 * radius)) * w;
    else if (settings.normals == NormalSource::Predicted)
      px.normal += normalized(work.values[i].normal) * w;
    trans *= 1.0 - work.alphas[i];
  }
  px.rgb += background * trans;
  px.transmittance = trans;
  return px;
}

}  // namespace detail

/// One pixel of render_image in double precision.
inline PixelSample render_pixel(const FieldParams& params, const PriorField& prior, const CameraFrame& frame, int row,
                                int col, const RenderSettings& settings, const Vec3& background, std::uint64_t seed) {
  detail::RayWork work;
  return detail::shade(params, prior, frame, row, col, settings, background, seed, work);
}

/// Volume-renders the field from `pose`; deterministic given `seed`.
inline RenderOutput render_image(const FieldParams& params, const PriorField& prior, const CameraPose& pose,
                                 int width, int height, const RenderSettings& settings,
                                 const Vec3& background, std::uint64_t seed) {
  if (width < 1 || height < 1) throw InvalidRangeError("render_image: resolution must be >= 1");
  params.validate();
  RenderOutput out;
  out.rgb = Image(height, width, 3);
  out.opacity = Image(height, width, 1);
  out.depth = Image(height, width, 1);
  if (settings.normals != NormalSource::None) out.normal = Image(height, width, 3);
  const auto frame = camera_frame(pose, width, height);
  detail::RayWork work;
  for (int row = 0; row < height; ++row)
    for (int col = 0; col < width; ++col) {
      const PixelSample px = detail::shade(params, prior, frame, row, col, settings, background, seed, work);
      for (int k = 0; k < 3; ++k) out.rgb.at(row, col, k) = static_cast<float>(px.rgb[k]);
      out.opacity.at(row, col) = static_cast<float>(1.0 - px.transmittance);
      out.depth.at(row, col) = static_cast<float>(px.depth);
      if (!out.normal.data.empty()) {
        const Vec3 n = normalized(px.normal);
        for (int k = 0; k < 3; ++k) out.normal.at(row, col, k) = static_cast<float>(n[k]);
      }
    }
  return out;
}

/// Reverse accumulation of render_image's rgb output. `upstream` is
/// d(loss)/d(rgb) per pixel; gradients are added to `grad` (FieldParams layout).
/// Pixels are processed in a fixed order, so the result is reproducible.
inline void render_backward(const FieldParams& params, const PriorField& prior, const CameraPose& pose,
                            int width, int height, const RenderSettings& settings, const Vec3& background,
                            std::uint64_t seed, const Image& upstream, std::span<float> grad) {
  if (upstream.height != height || upstream.width != width || upstream.channels != 3)
    throw ShapeError("render_backward: upstream gradient must be H x W x 3");
  if (grad.size() != params.size()) throw ShapeError("render_backward: gradient buffer size mismatch");
  const auto frame = camera_frame(pose, width, height);
  const double radius = prior.render_radius();
  detail::RayWork work;
  std::vector<double> trans_before;
  for (int row = 0; row < height; ++row)
    for (int col = 0; col < width; ++col) {
      const Vec3 g{upstream.at(row, col, 0), upstream.at(row, col, 1), upstream.at(row, col, 2)};
      if (g.x == 0 && g.y == 0 && g.z == 0) continue;
      const std::size_t pix = std::size_t(row) * width + col;
      const Ray ray = pixel_ray(frame, row, col);
      const auto span = ray_sphere(ray, radius);
      if (!span) continue;
      Rng rng = detail::pixel_rng(seed, pix);
      detail::march(params, prior, ray, settings, settings.jitter ? &rng : nullptr, span->first, span->second, work);
      const std::size_t n = work.used;
      trans_before.resize(n + 1);
      trans_before[0] = 1.0;
      for (std::size_t i = 0; i < n; ++i) trans_before[i + 1] = trans_before[i] * (1.0 - work.alphas[i]);
      // suffix = sum_{k > i} W_k (g . c_k) + T_n (g . bg), walked back to front
      double suffix = trans_before[n] * dot(g, background);
      for (std::size_t i = n; i-- > 0;) {
        const auto& v = work.values[i];
        const double w = work.alphas[i] * trans_before[i];
        const double gc = dot(g, v.rgb);
        const double d_sigma = work.samples.deltas[i] * (trans_before[i + 1] * gc - suffix);
        field_backward(params, work.traces[i], v, d_sigma, g * w, grad);
        suffix += w * gc;
      }
    }
}

inline std::vector<float> render_backward(const FieldParams& params, const PriorField& prior,
                                          const CameraPose& pose, int width, int height,
                                          const RenderSettings& settings, const Vec3& background,
                                          std::uint64_t seed, const Image& upstream) {
  std::vector<float> grad(params.size(), 0.0f);
  render_backward(params, prior, pose, width, height, settings, background, seed, upstream, grad);
  return grad;
}

/// Normal image mapped from [-1,1] to [0,1] for PNG export.
inline Image normal_to_rgb(const Image& normal) {
  Image out = normal;
  for (auto& v : out.data) v = 0.5f * (v + 1.0f);
  return out;
}

}  // namespace headforge
