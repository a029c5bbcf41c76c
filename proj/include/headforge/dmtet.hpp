// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "headforge/bvh.hpp"
#include "headforge/camera.hpp"
#include "headforge/error.hpp"
#include "headforge/field.hpp"
#include "headforge/head_prior.hpp"
#include "headforge/image.hpp"
#include "headforge/mesh.hpp"

namespace headforge {

using Tet = std::array<std::int32_t, 4>;

inline double signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return dot(b - a, cross(c - a, d - a)) / 6.0;
}

/// Deformable tetrahedral grid on a body-centered cubic lattice over
/// [-half_extent, half_extent]^3 with `resolution` cells per axis.
///
/// Vertices: (R+1)^3 cube corners followed by R^3 cube centers. Tets are
/// generated on demand: four per interior face (the two adjacent centers plus
/// one face edge) and two per boundary face (center plus half the face).
class TetGrid {
 public:
  /// Per-component offset bound, as a fraction of the cell size. Every tet
  /// keeps positive volume for any offsets within this bound (checked
  /// exhaustively over box corners in the test suite).
  static constexpr double kOffsetLimit = 0.1;

  TetGrid() = default;
  TetGrid(int resolution, double half_extent) : r_(resolution), half_(half_extent) {
    if (resolution < 1) throw InvalidRangeError("tet grid resolution must be >= 1");
    if (!(half_extent > 0)) throw InvalidRangeError("tet grid extent must be > 0");
    s.assign(vertex_count(), 1.0f);
    dv.assign(vertex_count() * 3, 0.0f);
  }

  std::vector<float> s;   // signed distance per vertex (negative inside)
  std::vector<float> dv;  // xyz offset per vertex

  int resolution() const { return r_; }
  double half_extent() const { return half_; }
  double cell() const { return 2 * half_ / r_; }
  double max_offset() const { return kOffsetLimit * cell(); }

  std::size_t corner_count() const { return std::size_t(r_ + 1) * (r_ + 1) * (r_ + 1); }
  std::size_t vertex_count() const { return corner_count() + std::size_t(r_) * r_ * r_; }
  std::size_t tet_count() const {
    const std::size_t r = r_;
    return 4 * 3 * r * r * (r - 1) + 2 * 6 * r * r;
  }

  std::int32_t corner(int i, int j, int k) const {
    return static_cast<std::int32_t>((std::size_t(k) * (r_ + 1) + j) * (r_ + 1) + i);
  }
  std::int32_t center(int i, int j, int k) const {
    return static_cast<std::int32_t>(corner_count() + (std::size_t(k) * r_ + j) * r_ + i);
  }

  Vec3 base_position(std::int32_t v) const {
    const double h = cell();
    const auto cc = corner_count();
    if (std::size_t(v) < cc) {
      const auto n = std::size_t(r_ + 1);
      const std::size_t i = v % n, j = (v / n) % n, k = v / (n * n);
      return {-half_ + i * h, -half_ + j * h, -half_ + k * h};
    }
    const std::size_t c = v - cc, n = r_;
    const std::size_t i = c % n, j = (c / n) % n, k = c / (n * n);
    return {-half_ + (i + 0.5) * h, -half_ + (j + 0.5) * h, -half_ + (k + 0.5) * h};
  }

  Vec3 position(std::int32_t v) const {
    const std::size_t o = std::size_t(v) * 3;
    return base_position(v) + Vec3{dv[o], dv[o + 1], dv[o + 2]};
  }

  /// Clamps every offset component to +-max_offset().
  void clamp_offsets() {
    const auto m = static_cast<float>(max_offset());
    for (auto& x : dv) x = std::clamp(x, -m, m);
  }

  /// Calls fn(tet) for every tet in a fixed order; tets are positively
  /// oriented at the base positions.
  template <class Fn>
  void for_each_tet(Fn&& fn) const {
    const int r = r_;
    auto emit = [&](Tet t) {
      if (signed_volume(base_position(t[0]), base_position(t[1]), base_position(t[2]), base_position(t[3])) < 0)
        std::swap(t[2], t[3]);
      fn(t);
    };
    for (int k = 0; k < r; ++k)
      for (int j = 0; j < r; ++j)
        for (int i = 0; i < r; ++i) {
          const std::int32_t c = center(i, j, k);
          const int idx[3] = {i, j, k};
          for (int axis = 0; axis < 3; ++axis) {
            const int b = (axis + 1) % 3, e = (axis + 2) % 3;
            // Faces on the low side only at the boundary; high side always.
            for (int side = 0; side < 2; ++side) {
              if (side == 0 && idx[axis] != 0) continue;
              int q[3] = {i, j, k};
              q[axis] += side;  // corner plane index of this face
              std::int32_t f[4];
              for (int m = 0; m < 4; ++m) {
                int p[3] = {q[0], q[1], q[2]};
                const int db = (m == 1 || m == 2), de = (m >= 2);  // 00,10,11,01 around the square
                p[b] += db;
                p[e] += de;
                f[m] = corner(p[0], p[1], p[2]);
              }
              const bool interior = side == 1 && idx[axis] + 1 < r;
              if (interior) {
                int n[3] = {i, j, k};
                n[axis] += 1;
                const std::int32_t c2 = center(n[0], n[1], n[2]);
                for (int m = 0; m < 4; ++m) emit({c, c2, f[m], f[(m + 1) % 4]});
              } else {
                emit({c, f[0], f[1], f[2]});
                emit({c, f[0], f[2], f[3]});
              }
            }
          }
        }
  }

 private:
  int r_ = 0;
  double half_ = 1;
};

/// Grid signs from the prior's exact signed distance; offsets zero.
inline TetGrid init_grid(int resolution, const PriorField& prior) {
  if (resolution < 8) throw InvalidRangeError("init_grid: resolution must be >= 8");
  TetGrid g(resolution, prior.render_radius());
  for (std::size_t v = 0; v < g.vertex_count(); ++v)
    g.s[v] = static_cast<float>(prior.signed_distance(g.base_position(static_cast<std::int32_t>(v))));
  return g;
}

/// Grid signs from a coarse field: occ = 1 - exp(-sigma * cell),
/// s = logit(iso) - logit(clamp(occ, eps, 1 - eps)); negative where occ > iso.
inline TetGrid init_grid(int resolution, const FieldParams& params, const PriorField& prior, double iso = 0.5) {
  if (resolution < 8) throw InvalidRangeError("init_grid: resolution must be >= 8");
  if (!(iso > 0 && iso < 1)) throw InvalidRangeError("init_grid: iso must be in (0,1)");
  TetGrid g(resolution, prior.render_radius());
  constexpr double eps = 1e-6;
  const auto logit = [](double p) { return std::log(p / (1 - p)); };
  const double h = g.cell();
  for (std::size_t v = 0; v < g.vertex_count(); ++v) {
    const Vec3 x = g.base_position(static_cast<std::int32_t>(v));
    const double sigma = field_eval(params, prior, x).density;
    const double occ = std::clamp(-std::expm1(-sigma * h), eps, 1 - eps);
    g.s[v] = static_cast<float>(logit(iso) - logit(occ));
  }
  return g;
}

/// Extracted vertex on grid edge (p, q): position(p) + w (position(q) - position(p)).
struct EdgeVertex {
  std::int32_t p = 0, q = 0;
  double w = 0;
};

struct MarchResult {
  TriMesh mesh;
  std::vector<EdgeVertex> sources;  // one per mesh vertex
};

/// Exact zeros are nudged to +1e-8 so every vertex has a definite sign.
inline double tet_sign_value(float s) { return s == 0.0f ? 1e-8 : double(s); }

namespace detail {

/// Shared marching core. `pos(v)` and `sign(v)` give vertex data; `each(fn)`
/// enumerates tets.
template <class PosFn, class SignFn, class EachTet>
MarchResult march(PosFn&& pos, SignFn&& sign, EachTet&& each) {
  MarchResult out;
  std::unordered_map<std::uint64_t, std::int32_t> edge_vertex;
  std::uint64_t tet_index = 0;
  auto vertex_on = [&](std::int32_t a, std::int32_t b) {
    if (a > b) std::swap(a, b);
    const auto key = edge_key(a, b);
    if (auto it = edge_vertex.find(key); it != edge_vertex.end()) return it->second;
    const double sa = sign(a), sb = sign(b);
    const double w = sa / (sa - sb);
    const Vec3 pa = pos(a), pb = pos(b);
    out.mesh.vertices.push_back(pa + (pb - pa) * w);
    out.sources.push_back({a, b, w});
    const auto id = static_cast<std::int32_t>(out.mesh.vertices.size() - 1);
    edge_vertex.emplace(key, id);
    return id;
  };
  each([&](const Tet& t) {
    const std::uint64_t this_tet = tet_index++;
    int neg[4], posv[4], nn = 0, np = 0;
    for (int m = 0; m < 4; ++m) {
      if (sign(t[m]) < 0) neg[nn++] = m;
      else posv[np++] = m;
    }
    if (nn == 0 || np == 0) return;
    Vec3 x[4];
    for (int m = 0; m < 4; ++m) x[m] = pos(t[m]);
    if (std::abs(signed_volume(x[0], x[1], x[2], x[3])) <= 1e-18)
      throw ValidationError("degenerate tet " + std::to_string(this_tet) + " (zero volume)");
    Vec3 cneg, cpos;
    for (int m = 0; m < nn; ++m) cneg += x[neg[m]];
    for (int m = 0; m < np; ++m) cpos += x[posv[m]];
    const Vec3 outward = cpos / np - cneg / nn;
    auto add_tri = [&](std::int32_t a, std::int32_t b, std::int32_t c) {
      const auto& V = out.mesh.vertices;
      if (dot(cross(V[b] - V[a], V[c] - V[a]), outward) < 0) std::swap(b, c);
      out.mesh.faces.push_back({a, b, c});
    };
    if (nn == 1 || np == 1) {
      const bool lone_neg = nn == 1;
      const int lone = lone_neg ? neg[0] : posv[0];
      const int* others = lone_neg ? posv : neg;
      add_tri(vertex_on(t[lone], t[others[0]]), vertex_on(t[lone], t[others[1]]),
              vertex_on(t[lone], t[others[2]]));
    } else {
      const auto ac = vertex_on(t[neg[0]], t[posv[0]]);
      const auto ad = vertex_on(t[neg[0]], t[posv[1]]);
      const auto bd = vertex_on(t[neg[1]], t[posv[1]]);
      const auto bc = vertex_on(t[neg[1]], t[posv[0]]);
      add_tri(ac, ad, bd);
      add_tri(ac, bd, bc);
    }
  });
  return out;
}

}  // namespace detail

/// Marching tetrahedra over all grid tets. Triangles are oriented with
/// normals pointing toward s > 0; crossing vertices are shared per grid edge.
inline MarchResult marching_tets(const TetGrid& grid) {
  return detail::march([&](std::int32_t v) { return grid.position(v); },
                       [&](std::int32_t v) { return tet_sign_value(grid.s[v]); },
                       [&](auto&& fn) { grid.for_each_tet(fn); });
}

/// Marching tetrahedra over an explicit tet list.
inline MarchResult marching_tets(std::span<const Vec3> positions, std::span<const float> s, std::span<const Tet> tets) {
  if (positions.size() != s.size()) throw ShapeError("marching_tets: one s value per vertex required");
  for (const auto& t : tets)
    for (auto v : t)
      if (v < 0 || std::size_t(v) >= positions.size()) throw ValidationError("marching_tets: tet index out of range");
  return detail::march([&](std::int32_t v) { return positions[v]; },
                       [&](std::int32_t v) { return tet_sign_value(s[v]); },
                       [&](auto&& fn) {
                         for (const auto& t : tets) fn(t);
                       });
}

/// Maps per-mesh-vertex position gradients back to grid s and dv.
inline void marching_tets_backward(const TetGrid& grid, const MarchResult& march,
                                   std::span<const Vec3> vertex_grad, std::span<float> grad_s,
                                   std::span<float> grad_dv) {
  if (vertex_grad.size() != march.sources.size()) throw ShapeError("marching_tets_backward: gradient size");
  if (grad_s.size() != grid.s.size() || grad_dv.size() != grid.dv.size())
    throw ShapeError("marching_tets_backward: grid gradient size");
  for (std::size_t i = 0; i < march.sources.size(); ++i) {
    const Vec3& g = vertex_grad[i];
    if (g.x == 0 && g.y == 0 && g.z == 0) continue;
    const auto& src = march.sources[i];
    const double sp = tet_sign_value(grid.s[src.p]), sq = tet_sign_value(grid.s[src.q]);
    const double den = (sp - sq) * (sp - sq);
    const Vec3 edge = grid.position(src.q) - grid.position(src.p);
    const double ge = dot(g, edge);
    grad_s[src.p] += static_cast<float>(ge * (-sq / den));
    grad_s[src.q] += static_cast<float>(ge * (sp / den));
    for (int a = 0; a < 3; ++a) {
      grad_dv[std::size_t(src.p) * 3 + a] += static_cast<float>(g[a] * (1 - src.w));
      grad_dv[std::size_t(src.q) * 3 + a] += static_cast<float>(g[a] * src.w);
    }
  }
}

struct RasterOutput {
  Image rgb;                        // H x W x 3, background where uncovered
  Image mask;                       // H x W x 1, 1 where covered
  std::vector<std::int32_t> face;   // per pixel, -1 if uncovered
  std::vector<Vec3> point;          // surface point per covered pixel
};

/// Hard z-buffer rasterization. Coverage is tested at pixel centers; the
/// surface point is the exact pixel-ray / triangle intersection, and
/// `color(x)` shades it. Nearest hit wins, ties go to the lower face index.
template <class ColorFn>
  requires std::invocable<ColorFn&, const Vec3&>
RasterOutput rasterize(const TriMesh& mesh, ColorFn&& color, const CameraPose& pose, int width, int height,
                       const Vec3& background = {1, 1, 1}) {
  if (mesh.empty()) throw ValidationError("rasterize: mesh is empty");
  const auto frame = camera_frame(pose, width, height);
  RasterOutput out;
  out.rgb = Image(height, width, 3);
  out.mask = Image(height, width, 1);
  const std::size_t npix = std::size_t(width) * height;
  out.face.assign(npix, -1);
  out.point.assign(npix, Vec3{});
  std::vector<double> zbuf(npix, std::numeric_limits<double>::infinity());
  for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const auto& f = mesh.faces[fi];
    ProjectedPoint p[3];
    bool behind = false;
    for (int k = 0; k < 3; ++k) {
      p[k] = project_point(frame, mesh.vertices[f[k]]);
      behind |= !p[k].visible;
    }
    if (behind) continue;  // no near-plane clipping; cameras stay outside the surface
    const double umin = std::min({p[0].u, p[1].u, p[2].u}), umax = std::max({p[0].u, p[1].u, p[2].u});
    const double vmin = std::min({p[0].v, p[1].v, p[2].v}), vmax = std::max({p[0].v, p[1].v, p[2].v});
    const int c0 = std::max(0, int(std::floor(umin - 0.5))), c1 = std::min(width - 1, int(std::ceil(umax - 0.5)));
    const int r0 = std::max(0, int(std::floor(vmin - 0.5))), r1 = std::min(height - 1, int(std::ceil(vmax - 0.5)));
    for (int row = r0; row <= r1; ++row)
      for (int col = c0; col <= c1; ++col) {
        const Ray ray = pixel_ray(frame, row, col);
        const auto t = ray_triangle(ray.origin, ray.direction, mesh.vertices[f[0]], mesh.vertices[f[1]],
                                    mesh.vertices[f[2]]);
        if (!t) continue;
        const std::size_t pix = std::size_t(row) * width + col;
        if (*t < zbuf[pix]) {
          zbuf[pix] = *t;
          out.face[pix] = static_cast<std::int32_t>(fi);
          out.point[pix] = ray.origin + ray.direction * *t;
        }
      }
  }
  for (int row = 0; row < height; ++row)
    for (int col = 0; col < width; ++col) {
      const std::size_t pix = std::size_t(row) * width + col;
      const Vec3 c = out.face[pix] >= 0 ? Vec3(color(out.point[pix])) : background;
      for (int k = 0; k < 3; ++k) out.rgb.at(row, col, k) = static_cast<float>(c[k]);
      out.mask.at(row, col) = out.face[pix] >= 0 ? 1.0f : 0.0f;
    }
  return out;
}

/// Color lookup through the coarse MLP's color head.
struct FieldColor {
  const FieldParams* params;
  Vec3 operator()(const Vec3& x) const { return field_eval(*params, 0.0, x).rgb; }
};

inline RasterOutput rasterize(const TriMesh& mesh, const FieldParams& params, const CameraPose& pose, int width,
                              int height, const Vec3& background = {1, 1, 1}) {
  return rasterize(mesh, FieldColor{&params}, pose, width, height, background);
}

/// Backward of the field-colored rasterization. Adds color-field parameter
/// gradients to `grad_color` and returns d(loss)/d(vertex position) per mesh
/// vertex through the visible surface points (no coverage gradients).
inline std::vector<Vec3> rasterize_backward(const TriMesh& mesh, const RasterOutput& fwd, const FieldParams& params,
                                            const CameraPose& pose, const Image& upstream,
                                            std::span<float> grad_color) {
  const int width = fwd.rgb.width, height = fwd.rgb.height;
  if (upstream.height != height || upstream.width != width || upstream.channels != 3)
    throw ShapeError("rasterize_backward: upstream gradient must match the render");
  if (grad_color.size() != params.size()) throw ShapeError("rasterize_backward: gradient buffer size mismatch");
  const auto frame = camera_frame(pose, width, height);
  std::vector<Vec3> vgrad(mesh.vertices.size());
  FieldTrace trace;
  for (int row = 0; row < height; ++row)
    for (int col = 0; col < width; ++col) {
      const std::size_t pix = std::size_t(row) * width + col;
      const auto fi = fwd.face[pix];
      if (fi < 0) continue;
      const Vec3 g{upstream.at(row, col, 0), upstream.at(row, col, 1), upstream.at(row, col, 2)};
      if (g.x == 0 && g.y == 0 && g.z == 0) continue;
      const Vec3& x = fwd.point[pix];
      const auto sample = field_eval(params, 0.0, x, &trace);
      const Vec3 dx = field_backward(params, trace, sample, 0.0, g, grad_color, true);
      // x = o + t d on the plane of (v0, v1, v2); move t with the vertices.
      const auto& f = mesh.faces[fi];
      const Vec3 v0 = mesh.vertices[f[0]], v1 = mesh.vertices[f[1]], v2 = mesh.vertices[f[2]];
      const Vec3 e1 = v1 - v0, e2 = v2 - v0, n = cross(e1, e2);
      const Vec3 d = pixel_ray(frame, row, col).direction;
      const double nd = dot(n, d);
      if (std::abs(nd) < 1e-300) continue;
      const double scale = -dot(dx, d) / nd;
      const Vec3 A = cross(e2, x - v0), B = cross(x - v0, e1);
      vgrad[f[1]] += A * scale;
      vgrad[f[2]] += B * scale;
      vgrad[f[0]] += (-n - A - B) * scale;
    }
  return vgrad;
}

/// Per-vertex colors from the color head, for export.
inline void colorize(TriMesh& mesh, const FieldParams& params) {
  mesh.colors.clear();
  for (const auto& v : mesh.vertices) mesh.colors.push_back(field_eval(params, 0.0, v).rgb);
}

}  // namespace headforge
