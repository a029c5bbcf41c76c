// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "headforge/mesh.hpp"
#include "headforge/vec.hpp"

namespace headforge {

/// Closest point on triangle (a,b,c) to p (Ericson, Real-Time Collision Detection 5.1.5).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Vec3 bp = p - b;
  const double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + ab * (d1 / (d1 - d3));
  const Vec3 cp = p - c;
  const double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + ac * (d2 / (d2 - d6));
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0)
    return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

/// Moller-Trumbore; returns hit distance (> t_min) or nullopt.
inline std::optional<double> ray_triangle(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b,
                                          const Vec3& c, double t_min = 1e-12) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 pv = cross(d, e2);
  const double det = dot(e1, pv);
  if (std::abs(det) < 1e-300) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 tv = o - a;
  const double u = dot(tv, pv) * inv;
  if (u < 0 || u > 1) return std::nullopt;
  const Vec3 qv = cross(tv, e1);
  const double v = dot(d, qv) * inv;
  if (v < 0 || u + v > 1) return std::nullopt;
  const double t = dot(e2, qv) * inv;
  if (t <= t_min) return std::nullopt;
  return t;
}

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  std::int32_t face = -1;
  explicit operator bool() const { return face >= 0; }
};

/// Median-split bounding volume hierarchy over a triangle mesh.
class TriangleBvh {
 public:
  TriangleBvh() = default;
  explicit TriangleBvh(const TriMesh& mesh) : mesh_(&mesh) {
    order_.resize(mesh.faces.size());
    std::iota(order_.begin(), order_.end(), 0);
    centroids_.reserve(mesh.faces.size());
    for (const auto& f : mesh.faces)
      centroids_.push_back((mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0);
    if (!order_.empty()) {
      nodes_.emplace_back();
      fill(0, 0, static_cast<std::int32_t>(order_.size()));
    }
  }

  const TriMesh& mesh() const { return *mesh_; }

  /// Nearest surface point; `dist2` is the squared distance.
  struct Nearest {
    double dist2 = std::numeric_limits<double>::infinity();
    Vec3 point;
    std::int32_t face = -1;
  };

  Nearest nearest(const Vec3& p) const {
    Nearest best;
    if (nodes_.empty()) return best;
    std::int32_t stack[64];
    int top = 0;
    stack[top++] = 0;
    while (top) {
      const Node& n = nodes_[stack[--top]];
      if (n.box.squared_distance(p) >= best.dist2) continue;
      if (n.count > 0) {
        for (std::int32_t i = n.first; i < n.first + n.count; ++i) {
          const auto fi = order_[i];
          const auto& f = mesh_->faces[fi];
          const Vec3 q = closest_point_on_triangle(p, mesh_->vertices[f[0]], mesh_->vertices[f[1]],
                                                   mesh_->vertices[f[2]]);
          const double d2 = squared_norm(q - p);
          if (d2 < best.dist2) best = {d2, q, fi};
        }
      } else {
        const double dl = nodes_[n.left].box.squared_distance(p);
        const double dr = nodes_[n.left + 1].box.squared_distance(p);
        // visit nearer child first
        if (dl < dr) {
          stack[top++] = n.left + 1;
          stack[top++] = n.left;
        } else {
          stack[top++] = n.left;
          stack[top++] = n.left + 1;
        }
      }
    }
    return best;
  }

  RayHit first_hit(const Vec3& o, const Vec3& d, double t_max = std::numeric_limits<double>::infinity(),
                   double t_min = 1e-12) const {
    RayHit hit;
    hit.t = t_max;
    visit_ray(o, d, t_min, [&](std::int32_t fi, double t) {
      if (t < hit.t) hit = {t, fi};
      return hit.t;
    }, t_max);
    if (hit.face < 0) hit.t = std::numeric_limits<double>::infinity();
    return hit;
  }

  /// Number of surface crossings along the ray (all of them, no early exit).
  int count_hits(const Vec3& o, const Vec3& d) const {
    int n = 0;
    visit_ray(o, d, 1e-12, [&](std::int32_t, double) {
      ++n;
      return std::numeric_limits<double>::infinity();
    }, std::numeric_limits<double>::infinity());
    return n;
  }

  Aabb bounds() const { return nodes_.empty() ? Aabb{} : nodes_[0].box; }

 private:
  struct Node {
    Aabb box;
    std::int32_t left = -1;  // children at left, left+1
    std::int32_t first = 0, count = 0;
  };

  Aabb face_box(std::int32_t fi) const {
    Aabb b;
    for (auto v : mesh_->faces[fi]) b.expand(mesh_->vertices[v]);
    return b;
  }

  void fill(std::int32_t slot, std::int32_t first, std::int32_t last) {
    Aabb box, cbox;
    for (std::int32_t i = first; i < last; ++i) {
      box.expand(face_box(order_[i]));
      cbox.expand(centroids_[order_[i]]);
    }
    nodes_[slot].box = box;
    if (last - first <= 4) {
      nodes_[slot].first = first;
      nodes_[slot].count = last - first;
      nodes_[slot].left = -1;
      return;
    }
    const Vec3 ext = cbox.extent();
    const int axis = ext.x > ext.y ? (ext.x > ext.z ? 0 : 2) : (ext.y > ext.z ? 1 : 2);
    const std::int32_t mid = (first + last) / 2;
    std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + last,
                     [&](std::int32_t a, std::int32_t b) {
                       const double ca = centroids_[a][axis], cb = centroids_[b][axis];
                       return ca < cb || (ca == cb && a < b);
                     });
    const auto child = static_cast<std::int32_t>(nodes_.size());
    nodes_[slot].left = child;
    nodes_[slot].count = 0;
    nodes_.resize(nodes_.size() + 2);
    fill(child, first, mid);
    fill(child + 1, mid, last);
  }

  template <class OnHit>
  void visit_ray(const Vec3& o, const Vec3& d, double t_min, OnHit&& on_hit, double t_max) const {
    if (nodes_.empty()) return;
    const Vec3 inv{1.0 / d.x, 1.0 / d.y, 1.0 / d.z};
    std::int32_t stack[64];
    int top = 0;
    stack[top++] = 0;
    double limit = t_max;
    while (top) {
      const Node& n = nodes_[stack[--top]];
      if (n.box.intersect(o, inv, limit) < 0) continue;
      if (n.count > 0) {
        for (std::int32_t i = n.first; i < n.first + n.count; ++i) {
          const auto fi = order_[i];
          const auto& f = mesh_->faces[fi];
          if (auto t = ray_triangle(o, d, mesh_->vertices[f[0]], mesh_->vertices[f[1]],
                                    mesh_->vertices[f[2]], t_min);
              t && *t < limit)
            limit = std::min(limit, on_hit(fi, *t));
        }
      } else {
        stack[top++] = n.left;
        stack[top++] = n.left + 1;
      }
    }
  }

  const TriMesh* mesh_ = nullptr;
  std::vector<std::int32_t> order_;
  std::vector<Vec3> centroids_;
  std::vector<Node> nodes_;
};

}  // namespace headforge
