// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "headforge/bvh.hpp"
#include "headforge/error.hpp"
#include "headforge/mesh.hpp"
#include "headforge/vec.hpp"

namespace headforge {

/// Generalized winding number of a closed triangle mesh about p (exact
/// solid-angle sum, Van Oosterom-Strackee). ~1 inside, ~0 outside.
inline double winding_number(const TriMesh& m, const Vec3& p) {
  double total = 0;
  for (const auto& f : m.faces) {
    const Vec3 a = m.vertices[f[0]] - p, b = m.vertices[f[1]] - p, c = m.vertices[f[2]] - p;
    const double la = norm(a), lb = norm(b), lc = norm(c);
    const double num = dot(a, cross(b, c));
    const double den = la * lb * lc + dot(a, b) * lc + dot(b, c) * la + dot(c, a) * lb;
    total += 2.0 * std::atan2(num, den);
  }
  return total / (4.0 * kPi);
}

/// tau(d) = sigmoid(-d/a)/a, the sharp prior density before inversion.
inline double prior_tau(double d, double a) { return sigmoid(-d / a) / a; }

/// max(0, softplus^-1(tau)) with the asymptotic branch ln(e^tau - 1) ~ tau + ln(1 - e^-tau).
inline double prior_density_from_distance(double d, double a) {
  const double tau = prior_tau(d, a);
  if (tau > 30.0) return tau + std::log1p(-std::exp(-tau));
  if (tau <= 0.0) return 0.0;
  return std::max(0.0, std::log(std::expm1(tau)));
}

/// Regular grid of signed distances, trilinearly interpolated.
class DistanceGrid {
 public:
  DistanceGrid() = default;
  template <class Fn>
  DistanceGrid(int resolution, double half_extent, Fn&& sdf)
      : n_(resolution), half_(half_extent), values_(std::size_t(resolution) * resolution * resolution) {
    const double step = 2 * half_ / (n_ - 1);
    for (int k = 0; k < n_; ++k)
      for (int j = 0; j < n_; ++j)
        for (int i = 0; i < n_; ++i)
          values_[idx(i, j, k)] = sdf(Vec3{-half_ + i * step, -half_ + j * step, -half_ + k * step});
  }

  bool contains(const Vec3& p) const {
    return std::abs(p.x) <= half_ && std::abs(p.y) <= half_ && std::abs(p.z) <= half_;
  }

  double sample(const Vec3& p) const {
    const double scale = (n_ - 1) / (2 * half_);
    double f[3];
    int c[3];
    for (int a = 0; a < 3; ++a) {
      const double u = std::clamp((p[a] + half_) * scale, 0.0, double(n_ - 1));
      c[a] = std::min(static_cast<int>(u), n_ - 2);
      f[a] = u - c[a];
    }
    double acc = 0;
    for (int corner = 0; corner < 8; ++corner) {
      double w = 1;
      int q[3];
      for (int a = 0; a < 3; ++a) {
        const int bit = (corner >> a) & 1;
        w *= bit ? f[a] : 1 - f[a];
        q[a] = c[a] + bit;
      }
      acc += w * values_[idx(q[0], q[1], q[2])];
    }
    return acc;
  }

  int resolution() const { return n_; }

 private:
  std::size_t idx(int i, int j, int k) const { return (std::size_t(k) * n_ + j) * n_ + i; }
  int n_ = 0;
  double half_ = 1;
  std::vector<double> values_;
};

/// Head prior: signed distance to a watertight mesh and the residual density
/// sigma_bar derived from it. Immutable once constructed.
class PriorField {
 public:
  static constexpr double kDefaultSharpness = 0.005;

  explicit PriorField(HeadMesh head, double sharpness = kDefaultSharpness)
      : head_(std::make_shared<const HeadMesh>(std::move(head))), a_(sharpness) {
    if (!(a_ > 0)) throw InvalidRangeError("prior sharpness a must be > 0");
    validate_head_mesh(*head_);
    bvh_ = std::make_shared<const TriangleBvh>(head_->mesh);
    for (const auto& v : head_->mesh.vertices) bounding_radius_ = std::max(bounding_radius_, norm(v));
  }

  const HeadMesh& head() const { return *head_; }
  const TriMesh& mesh() const { return head_->mesh; }
  const TriangleBvh& bvh() const { return *bvh_; }
  double sharpness() const { return a_; }
  /// Max distance of a mesh vertex from the origin.
  double bounding_radius() const { return bounding_radius_; }

  double unsigned_distance(const Vec3& x) const { return std::sqrt(bvh_->nearest(x).dist2); }

  /// Positive outside, negative inside (sign from the winding number).
  double signed_distance(const Vec3& x) const {
    const double d = unsigned_distance(x);
    if (d == 0.0) return 0.0;
    return winding_number(head_->mesh, x) >= 0.5 ? -d : d;
  }

  double tau(const Vec3& x) const { return prior_tau(signed_distance(x), a_); }

  /// Exact sigma_bar(x).
  double prior_density(const Vec3& x) const {
    return prior_density_from_distance(signed_distance(x), a_);
  }

  /// Precomputes signed distances on a grid covering the render volume; after
  /// this, `density()` interpolates the distance instead of querying the mesh.
  void bake(int resolution = 64) {
    if (resolution < 2) throw InvalidRangeError("bake resolution must be >= 2");
    const double half = render_radius();
    baked_ = std::make_shared<const DistanceGrid>(resolution, half,
                                                  [this](const Vec3& p) { return signed_distance(p); });
  }
  bool baked() const { return baked_ != nullptr; }

  /// Signed distance used by the renderer: baked if available, exact otherwise.
  double render_distance(const Vec3& x) const {
    if (baked_ && baked_->contains(x)) return baked_->sample(x);
    return signed_distance(x);
  }

  double density(const Vec3& x) const { return prior_density_from_distance(render_distance(x), a_); }

  /// Radius of the bounding sphere that bounds rendering and the tet grid.
  double render_radius() const { return 1.1 * bounding_radius_; }

 private:
  std::shared_ptr<const HeadMesh> head_;
  std::shared_ptr<const TriangleBvh> bvh_;
  std::shared_ptr<const DistanceGrid> baked_;
  double a_;
  double bounding_radius_ = 0;
};

}  // namespace headforge
