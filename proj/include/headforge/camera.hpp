// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "headforge/bvh.hpp"
#include "headforge/error.hpp"
#include "headforge/image.hpp"
#include "headforge/mesh.hpp"
#include "headforge/rng.hpp"
#include "headforge/vec.hpp"

namespace headforge {

/// Spherical camera around `look_at`. Polar angle is measured from +y (up);
/// azimuth 0 looks at the face (camera on +z), increasing toward +x.
struct CameraPose {
  double azimuth = 0;       // degrees, [0, 360)
  double polar_theta = 90;  // degrees
  double radius = 1.25;
  double fov = 40;          // vertical field of view, degrees
  Vec3 look_at{};

  friend bool operator==(const CameraPose&, const CameraPose&) = default;
};

inline void validate_pose(const CameraPose& p) {
  if (!(p.radius > 0)) throw InvalidRangeError("camera radius must be > 0");
  if (!(p.fov > 0 && p.fov < 180)) throw InvalidRangeError("camera fov must be in (0, 180)");
}

using Range = std::pair<double, double>;

struct CameraRanges {
  Range azimuth_range{0.0, 360.0};
  Range theta_range{20.0, 110.0};
  Range radius_range{1.0, 1.5};
  Range fov_range{30.0, 50.0};
};

inline void validate_ranges(const CameraRanges& r) {
  for (const auto& [lo, hi] : {r.azimuth_range, r.theta_range, r.radius_range, r.fov_range})
    if (!(lo <= hi)) throw InvalidRangeError("camera range requires lo <= hi");
  if (!(r.radius_range.first > 0)) throw InvalidRangeError("camera radius range must be positive");
  if (!(r.fov_range.first > 0 && r.fov_range.second < 180)) throw InvalidRangeError("fov range must be in (0,180)");
}

inline CameraPose sample_pose(const CameraRanges& ranges, Rng& rng) {
  validate_ranges(ranges);
  CameraPose p;
  // Full-circle azimuth is sampled half-open so 360 never appears.
  p.azimuth = rng.uniform(ranges.azimuth_range.first, ranges.azimuth_range.second);
  if (p.azimuth >= 360.0) p.azimuth = std::fmod(p.azimuth, 360.0);
  p.polar_theta = rng.uniform(ranges.theta_range.first, ranges.theta_range.second);
  p.radius = rng.uniform(ranges.radius_range.first, ranges.radius_range.second);
  p.fov = rng.uniform(ranges.fov_range.first, ranges.fov_range.second);
  return p;
}

/// Orthonormal camera frame derived from a pose.
struct CameraFrame {
  Vec3 position, right, up, forward;
  double focal = 1;  // pixels
  double cx = 0, cy = 0;
  int width = 1, height = 1;
};

inline CameraFrame camera_frame(const CameraPose& pose, int width, int height) {
  validate_pose(pose);
  const double th = deg2rad(pose.polar_theta), az = deg2rad(pose.azimuth);
  CameraFrame f;
  f.position = pose.look_at + Vec3{std::sin(th) * std::sin(az), std::cos(th), std::sin(th) * std::cos(az)} * pose.radius;
  f.forward = normalized(pose.look_at - f.position);
  Vec3 world_up{0, 1, 0};
  if (norm(cross(f.forward, world_up)) < 1e-9) world_up = Vec3{0, 0, -1};
  f.right = normalized(cross(f.forward, world_up));
  f.up = cross(f.right, f.forward);
  f.focal = height / (2.0 * std::tan(deg2rad(pose.fov) / 2.0));
  f.cx = width / 2.0;
  f.cy = height / 2.0;
  f.width = width;
  f.height = height;
  return f;
}

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
};

/// Ray through the center of pixel (row, col).
inline Ray pixel_ray(const CameraFrame& f, double row, double col) {
  const double x = (col + 0.5 - f.cx) / f.focal;
  const double y = -(row + 0.5 - f.cy) / f.focal;
  return {f.position, normalized(f.forward + f.right * x + f.up * y)};
}

/// One ray per pixel, row-major.
inline std::vector<Ray> generate_rays(const CameraPose& pose, int width, int height) {
  if (width < 1 || height < 1) throw InvalidRangeError("generate_rays: need width, height >= 1");
  const auto f = camera_frame(pose, width, height);
  std::vector<Ray> rays;
  rays.reserve(std::size_t(width) * height);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) rays.push_back(pixel_ray(f, r, c));
  return rays;
}

struct ProjectedPoint {
  double u = 0, v = 0;  // continuous pixel coords; pixel (row, col) spans [col, col+1) x [row, row+1)
  double depth = 0;     // camera-space distance along the optical axis
  bool visible = false; // in front of the camera plane
};

inline ProjectedPoint project_point(const CameraFrame& f, const Vec3& p) {
  const Vec3 q = p - f.position;
  ProjectedPoint out;
  out.depth = dot(q, f.forward);
  out.visible = out.depth > 1e-12;
  const double x = dot(q, f.right), y = dot(q, f.up);
  const double z = out.visible ? out.depth : 1e-12;
  out.u = f.cx + f.focal * x / z;
  out.v = f.cy - f.focal * y / z;
  return out;
}

inline std::vector<ProjectedPoint> project_points(const CameraPose& pose, const std::vector<Vec3>& points,
                                                  int width, int height) {
  const auto f = camera_frame(pose, width, height);
  std::vector<ProjectedPoint> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(project_point(f, p));
  return out;
}

enum class ViewBucket { Front, Side, Back };

inline const char* to_string(ViewBucket b) {
  switch (b) {
    case ViewBucket::Front: return "front";
    case ViewBucket::Side: return "side";
    case ViewBucket::Back: return "back";
  }
  return "?";
}

/// Front for |az| < 45, Side for 45 <= |az| <= 135, Back beyond (az wrapped to (-180, 180]).
inline ViewBucket view_bucket(double azimuth) {
  double a = std::fmod(azimuth, 360.0);
  if (a > 180.0) a -= 360.0;
  if (a <= -180.0) a += 360.0;
  const double m = std::abs(a);
  if (m < 45.0) return ViewBucket::Front;
  if (m <= 135.0) return ViewBucket::Side;
  return ViewBucket::Back;
}

struct LandmarkStyle {
  double radius_px = 0;  // <= 0: max(1, width / 128)
  bool polylines = true;
  double line_width_px = 0;  // <= 0: max(1, radius / 2)
  double occlusion_eps = 1e-3;
  std::vector<std::array<float, 3>> palette = {
      {1.0f, 1.0f, 1.0f},   // contour
      {0.19f, 1.0f, 0.19f}, // eyes
      {0.19f, 1.0f, 0.19f},
      {1.0f, 0.19f, 0.19f}, // brows
      {1.0f, 0.19f, 0.19f},
      {1.0f, 1.0f, 0.19f},  // nose
      {0.19f, 0.19f, 1.0f}, // mouth
  };
};

namespace detail {

inline void stamp_disc(Image& img, double u, double v, double r, const std::array<float, 3>& c) {
  const int c0 = std::max(0, int(std::floor(u - r - 1))), c1 = std::min(img.width - 1, int(std::ceil(u + r + 1)));
  const int r0 = std::max(0, int(std::floor(v - r - 1))), r1 = std::min(img.height - 1, int(std::ceil(v + r + 1)));
  for (int row = r0; row <= r1; ++row)
    for (int col = c0; col <= c1; ++col) {
      const double dx = col + 0.5 - u, dy = row + 0.5 - v;
      // the pixel containing (u, v) is always drawn
      const bool own = int(std::floor(u)) == col && int(std::floor(v)) == row;
      if (own || dx * dx + dy * dy <= r * r)
        for (int k = 0; k < 3; ++k) img.at(row, col, k) = c[k];
    }
}

inline void stamp_segment(Image& img, double u0, double v0, double u1, double v1, double w,
                          const std::array<float, 3>& c) {
  const double half = w / 2;
  const int c0 = std::max(0, int(std::floor(std::min(u0, u1) - w))), c1 = std::min(img.width - 1, int(std::ceil(std::max(u0, u1) + w)));
  const int r0 = std::max(0, int(std::floor(std::min(v0, v1) - w))), r1 = std::min(img.height - 1, int(std::ceil(std::max(v0, v1) + w)));
  const double du = u1 - u0, dv = v1 - v0, len2 = du * du + dv * dv;
  for (int row = r0; row <= r1; ++row)
    for (int col = c0; col <= c1; ++col) {
      const double px = col + 0.5 - u0, py = row + 0.5 - v0;
      const double t = len2 > 0 ? std::clamp((px * du + py * dv) / len2, 0.0, 1.0) : 0.0;
      const double ex = px - t * du, ey = py - t * dv;
      if (ex * ex + ey * ey <= half * half)
        for (int k = 0; k < 3; ++k) img.at(row, col, k) = c[k];
    }
}

}  // namespace detail

/// Landmark condition image: visible landmarks as discs on black, optional
/// polylines within each group; landmarks occluded by the mesh are skipped.
inline Image render_landmark_map(const HeadMesh& head, const TriangleBvh& occluder, const CameraPose& pose,
                                 const LandmarkStyle& style, int width, int height) {
  Image img(height, width, 3, 0.0f);
  const auto frame = camera_frame(pose, width, height);
  const double radius = style.radius_px > 0 ? style.radius_px : std::max(1.0, width / 128.0);
  const double line_w = style.line_width_px > 0 ? style.line_width_px : std::max(1.0, radius / 2.0);

  struct Mark {
    ProjectedPoint p;
    bool shown;
  };
  std::vector<std::vector<Mark>> groups;
  for (const auto& g : head.landmark_groups) {
    std::vector<Mark> marks;
    for (auto idx : g.indices) {
      const Vec3 x = head.mesh.vertices[idx];
      const auto p = project_point(frame, x);
      bool shown = p.visible;
      if (shown) {
        const Vec3 to = x - frame.position;
        const double dist = norm(to);
        const auto hit = occluder.first_hit(frame.position, to / dist, dist);
        shown = !hit || hit.t >= dist - style.occlusion_eps;
      }
      marks.push_back({p, shown});
    }
    groups.push_back(std::move(marks));
  }

  const auto color_of = [&](std::size_t gi) {
    return style.palette.empty() ? std::array<float, 3>{1, 1, 1} : style.palette[gi % style.palette.size()];
  };
  if (style.polylines)
    for (std::size_t gi = 0; gi < groups.size(); ++gi)
      for (std::size_t k = 1; k < groups[gi].size(); ++k) {
        const auto& a = groups[gi][k - 1];
        const auto& b = groups[gi][k];
        if (a.shown && b.shown) detail::stamp_segment(img, a.p.u, a.p.v, b.p.u, b.p.v, line_w, color_of(gi));
      }
  for (std::size_t gi = 0; gi < groups.size(); ++gi)
    for (const auto& m : groups[gi])
      if (m.shown) detail::stamp_disc(img, m.p.u, m.p.v, radius, color_of(gi));
  return img;
}

inline Image render_landmark_map(const HeadMesh& head, const CameraPose& pose, const LandmarkStyle& style,
                                 int width, int height) {
  const TriangleBvh bvh(head.mesh);
  return render_landmark_map(head, bvh, pose, style, width, height);
}

}  // namespace headforge
