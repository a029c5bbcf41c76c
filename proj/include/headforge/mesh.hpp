// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "headforge/error.hpp"
#include "headforge/vec.hpp"

namespace headforge {

using Face = std::array<std::int32_t, 3>;

/// Triangle mesh with optional per-vertex RGB.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> colors;  // empty or one per vertex

  bool empty() const { return faces.empty(); }
  Vec3 face_normal(std::size_t f) const {
    const auto& t = faces[f];
    return cross(vertices[t[1]] - vertices[t[0]], vertices[t[2]] - vertices[t[0]]);
  }
};

struct LandmarkGroup {
  std::string name;
  std::vector<std::int32_t> indices;
};

/// Watertight head prior with landmark vertex groups (contour, eyes, nose, ...).
struct HeadMesh {
  TriMesh mesh;
  std::vector<LandmarkGroup> landmark_groups;

  std::vector<std::int32_t> landmark_indices() const {
    std::vector<std::int32_t> out;
    for (const auto& g : landmark_groups) out.insert(out.end(), g.indices.begin(), g.indices.end());
    return out;
  }
};

inline std::uint64_t edge_key(std::int32_t a, std::int32_t b) {
  if (a > b) std::swap(a, b);
  return (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b);
}

/// Undirected edges whose face count differs from two.
inline std::vector<std::pair<std::int32_t, std::int32_t>> non_manifold_edges(const TriMesh& m) {
  std::map<std::uint64_t, int> count;
  for (const auto& f : m.faces)
    for (int k = 0; k < 3; ++k) ++count[edge_key(f[k], f[(k + 1) % 3])];
  std::vector<std::pair<std::int32_t, std::int32_t>> bad;
  for (const auto& [key, n] : count)
    if (n != 2) bad.emplace_back(std::int32_t(key >> 32), std::int32_t(key & 0xffffffffu));
  return bad;
}

inline bool is_watertight(const TriMesh& m) { return !m.empty() && non_manifold_edges(m).empty(); }

inline std::int64_t euler_characteristic(const TriMesh& m) {
  std::map<std::uint64_t, int> edges;
  for (const auto& f : m.faces)
    for (int k = 0; k < 3; ++k) ++edges[edge_key(f[k], f[(k + 1) % 3])];
  return std::int64_t(m.vertices.size()) - std::int64_t(edges.size()) + std::int64_t(m.faces.size());
}

/// Index range, degenerate-face and watertightness checks for a head prior.
inline void validate_head_mesh(const HeadMesh& h) {
  const auto nv = static_cast<std::int32_t>(h.mesh.vertices.size());
  for (std::size_t i = 0; i < h.mesh.faces.size(); ++i) {
    for (auto idx : h.mesh.faces[i])
      if (idx < 0 || idx >= nv)
        throw ValidationError("face " + std::to_string(i) + " references vertex " +
                              std::to_string(idx) + " (have " + std::to_string(nv) + ")");
    if (norm(h.mesh.face_normal(i)) <= 1e-14)
      throw ValidationError("face " + std::to_string(i) + " is degenerate (zero area)");
  }
  for (const auto& g : h.landmark_groups)
    for (auto idx : g.indices)
      if (idx < 0 || idx >= nv)
        throw ValidationError("landmark '" + g.name + "' index " + std::to_string(idx) +
                              " out of range");
  if (h.mesh.faces.empty()) throw ValidationError("mesh has no faces");
  const auto bad = non_manifold_edges(h.mesh);
  if (!bad.empty()) {
    std::ostringstream os;
    os << "mesh is not watertight: " << bad.size() << " edge(s) not shared by exactly two faces:";
    for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 16); ++i)
      os << " (" << bad[i].first << "," << bad[i].second << ")";
    if (bad.size() > 16) os << " ...";
    throw ValidationError(os.str());
  }
}

/// Reads `v x y z [r g b]` and `f a b c ...` records (1-based or negative
/// indices, `a/b/c` tokens accepted; polygons fan-triangulated).
inline TriMesh parse_obj(std::istream& in) {
  TriMesh m;
  std::string line;
  int lineno = 0;
  bool any_color = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      std::vector<double> vals;
      double x;
      while (ls >> x) vals.push_back(x);
      if (!ls.eof()) throw ParseError("obj: bad vertex record", lineno);
      if (vals.size() != 3 && vals.size() != 6 && vals.size() != 4)
        throw ParseError("obj: vertex needs 3 or 6 numbers", lineno);
      m.vertices.push_back({vals[0], vals[1], vals[2]});
      if (vals.size() == 6) {
        any_color = true;
        m.colors.resize(m.vertices.size() - 1, Vec3{});
        m.colors.push_back({vals[3], vals[4], vals[5]});
      }
    } else if (tag == "f") {
      std::vector<std::int32_t> poly;
      std::string tok;
      while (ls >> tok) {
        const auto slash = tok.find('/');
        const std::string head = tok.substr(0, slash);
        long idx = 0;
        try {
          std::size_t used = 0;
          idx = std::stol(head, &used);
          if (used != head.size()) throw std::invalid_argument(head);
        } catch (const std::exception&) {
          throw ParseError("obj: bad face index '" + tok + "'", lineno);
        }
        const long n = static_cast<long>(m.vertices.size());
        if (idx < 0) idx = n + idx + 1;
        if (idx < 1 || idx > n) throw ParseError("obj: face index out of range", lineno);
        poly.push_back(static_cast<std::int32_t>(idx - 1));
      }
      if (poly.size() < 3) throw ParseError("obj: face needs at least 3 vertices", lineno);
      for (std::size_t k = 1; k + 1 < poly.size(); ++k) m.faces.push_back({poly[0], poly[k], poly[k + 1]});
    }
    // vt, vn, g, o, s, usemtl, ... are ignored.
  }
  if (any_color) m.colors.resize(m.vertices.size(), Vec3{});
  return m;
}

inline TriMesh read_obj(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open mesh: " + path.string());
  return parse_obj(f);
}

/// Sidecar format: one `group_name vertex_index` per line; groups keep first-seen order.
inline std::vector<LandmarkGroup> parse_landmarks(std::istream& in) {
  std::vector<LandmarkGroup> groups;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string name;
    if (!(ls >> name) || name[0] == '#') continue;
    long idx;
    std::string extra;
    if (!(ls >> idx) || (ls >> extra)) throw ParseError("landmarks: expected 'group index'", lineno);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.name == name; });
    if (it == groups.end()) {
      groups.push_back({name, {}});
      it = groups.end() - 1;
    }
    it->indices.push_back(static_cast<std::int32_t>(idx));
  }
  return groups;
}

inline std::filesystem::path default_landmark_path(const std::filesystem::path& mesh_path) {
  auto p = mesh_path;
  p.replace_extension(".landmarks");
  return p;
}

/// Loads and validates a head prior; the landmark sidecar is optional.
inline HeadMesh load_mesh(const std::filesystem::path& path,
                          std::optional<std::filesystem::path> landmarks = std::nullopt) {
  HeadMesh h;
  h.mesh = read_obj(path);
  const auto lm = landmarks.value_or(default_landmark_path(path));
  if (std::filesystem::exists(lm)) {
    std::ifstream f(lm);
    h.landmark_groups = parse_landmarks(f);
  } else if (landmarks) {
    throw IoError("landmark sidecar not found: " + lm.string());
  }
  validate_head_mesh(h);
  return h;
}

/// ASCII OBJ with 1-based faces; colors written as `v x y z r g b`.
inline void write_obj(const TriMesh& m, std::ostream& f) {
  const bool colored = m.colors.size() == m.vertices.size() && !m.colors.empty();
  char buf[256];
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    const auto& v = m.vertices[i];
    if (colored) {
      const auto& c = m.colors[i];
      std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g %.9g %.9g %.9g\n", v.x, v.y, v.z, c.x, c.y, c.z);
    } else {
      std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
    }
    f << buf;
  }
  for (const auto& t : m.faces) f << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
}

inline void export_obj(const TriMesh& m, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  write_obj(m, f);
  if (!f) throw IoError("write failed: " + path.string());
}

inline void write_landmarks(const HeadMesh& h, std::ostream& f) {
  for (const auto& g : h.landmark_groups)
    for (auto i : g.indices) f << g.name << ' ' << i << '\n';
}

inline void export_landmarks(const HeadMesh& h, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  write_landmarks(h, f);
  if (!f) throw IoError("write failed: " + path.string());
}

/// Unit icosphere after `level` 4:1 subdivisions (10*4^level + 2 vertices).
inline TriMesh make_icosphere(int level) {
  TriMesh m;
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  const Vec3 base[12] = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (const auto& v : base) m.vertices.push_back(normalized(v));
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::unordered_map<std::uint64_t, std::int32_t> mid;
    auto midpoint = [&](std::int32_t a, std::int32_t b) {
      const auto key = edge_key(a, b);
      if (auto it = mid.find(key); it != mid.end()) return it->second;
      m.vertices.push_back(normalized(m.vertices[a] + m.vertices[b]));
      const auto id = static_cast<std::int32_t>(m.vertices.size() - 1);
      mid.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(m.faces.size() * 4);
    for (const auto& f : m.faces) {
      const auto a = midpoint(f[0], f[1]), b = midpoint(f[1], f[2]), c = midpoint(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    m.faces = std::move(next);
  }
  return m;
}

namespace standin {

// Canonical frame: +y up, face toward +z. Units fit the head well inside the unit sphere.
inline constexpr Vec3 kCraniumCenter{0.0, 0.06, 0.0};
inline constexpr Vec3 kCraniumRadii{0.26, 0.31, 0.29};
inline constexpr double kNeckTop = 0.0, kNeckBottom = -0.42;
inline constexpr double kNeckRadiusTop = 0.13, kNeckRadiusBottom = 0.16;
// Star center shared by both convex pieces.
inline constexpr Vec3 kStarCenter{0.0, -0.02, 0.0};

/// Exit distance along unit `d` from `o` (inside) through the ellipsoid.
inline double ellipsoid_exit(const Vec3& o, const Vec3& d) {
  const Vec3 p = o - kCraniumCenter;
  const Vec3 r = kCraniumRadii;
  const Vec3 ps{p.x / r.x, p.y / r.y, p.z / r.z}, ds{d.x / r.x, d.y / r.y, d.z / r.z};
  const double a = dot(ds, ds), b = 2 * dot(ps, ds), c = dot(ps, ps) - 1;
  return (-b + std::sqrt(b * b - 4 * a * c)) / (2 * a);
}

/// Exit distance from the neck frustum (radius linear in y between the caps).
inline double frustum_exit(const Vec3& o, const Vec3& d) {
  double t = 1e300;
  if (d.y > 0) t = std::min(t, (kNeckTop + 0.05 - o.y) / d.y);
  if (d.y < 0) t = std::min(t, (kNeckBottom - o.y) / d.y);
  // radius(y) = r0 + k (y - y0); constraint x^2 + z^2 <= radius(y)^2.
  const double k = (kNeckRadiusTop - kNeckRadiusBottom) / (kNeckTop - kNeckBottom);
  const double r0 = kNeckRadiusBottom - k * kNeckBottom;
  const double ra = r0 + k * o.y, rb = k * d.y;
  const double a = d.x * d.x + d.z * d.z - rb * rb;
  const double b = 2 * (o.x * d.x + o.z * d.z - ra * rb);
  const double c = o.x * o.x + o.z * o.z - ra * ra;
  if (std::abs(a) < 1e-14) {
    if (b > 0) t = std::min(t, -c / b);
  } else {
    const double disc = b * b - 4 * a * c;
    if (disc >= 0) {
      const double s = std::sqrt(disc);
      const double r1 = (-b - s) / (2 * a), r2 = (-b + s) / (2 * a);
      for (double r : {r1, r2})
        if (r > 0 && r0 + k * (o.y + r * d.y) >= 0) {
          // first positive root where the cone surface is crossed outward
          const Vec3 p = o + d * r;
          const Vec3 grad{p.x, -(r0 + k * p.y) * k, p.z};
          if (dot(grad, d) > 0) t = std::min(t, r);
        }
    }
  }
  return t;
}

/// Radial distance of the head surface from the star center along unit `d`.
inline double surface_radius(const Vec3& d) {
  double r = std::max(ellipsoid_exit(kStarCenter, d), frustum_exit(kStarCenter, d));
  // Nose bump centered on a slightly downward frontal direction.
  const Vec3 nose_dir = normalized(Vec3{0.0, -0.05, 1.0});
  const double c = dot(d, nose_dir);
  r *= 1.0 + 0.12 * std::exp(-(1.0 - c) / 0.004);
  return r;
}

inline Vec3 surface_point(const Vec3& dir) {
  const Vec3 d = normalized(dir);
  return kStarCenter + d * surface_radius(d);
}

/// Synthetic landmark directions (from the star center) per facial group.
inline std::vector<std::pair<std::string, std::vector<Vec3>>> landmark_directions() {
  auto dir = [](double az_deg, double el_deg) {
    const double az = deg2rad(az_deg), el = deg2rad(el_deg);
    return Vec3{std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
  };
  std::vector<std::pair<std::string, std::vector<Vec3>>> g;
  std::vector<Vec3> contour;
  for (int i = 0; i <= 8; ++i) contour.push_back(dir(-70.0 + 17.5 * i, -8.0 - 10.0 * std::sin(kPi * i / 8.0)));
  g.emplace_back("contour", contour);
  g.emplace_back("left_eye", std::vector<Vec3>{dir(-32, 22), dir(-24, 25), dir(-16, 22), dir(-24, 19)});
  g.emplace_back("right_eye", std::vector<Vec3>{dir(16, 22), dir(24, 25), dir(32, 22), dir(24, 19)});
  g.emplace_back("left_brow", std::vector<Vec3>{dir(-36, 32), dir(-25, 35), dir(-14, 33)});
  g.emplace_back("right_brow", std::vector<Vec3>{dir(14, 33), dir(25, 35), dir(36, 32)});
  g.emplace_back("nose", std::vector<Vec3>{dir(0, 20), dir(0, 12), dir(0, 5), dir(-7, 2), dir(7, 2)});
  g.emplace_back("mouth", std::vector<Vec3>{dir(-14, -7), dir(-5, -5), dir(5, -5), dir(14, -7), dir(0, -10)});
  return g;
}

/// Procedural albedo: skin, hair cap, dark eyes, red lips. Keyed on the
/// direction from the star center, so it is defined for any point.
inline Vec3 albedo(const Vec3& x) {
  const Vec3 d = normalized(x - kStarCenter);
  const double el = rad2deg(std::asin(std::clamp(d.y, -1.0, 1.0)));
  const double az = rad2deg(std::atan2(d.x, d.z));
  const Vec3 skin{0.86, 0.66, 0.54}, hair{0.23, 0.15, 0.10}, eye{0.12, 0.10, 0.10}, lip{0.72, 0.28, 0.30};
  const double hairline = std::abs(az) < 60 ? 38.0 : 10.0 + 28.0 * std::max(0.0, 1.0 - (std::abs(az) - 60) / 60);
  if (el > hairline && d.y > -0.2) return hair;
  auto near = [&](double a, double e, double ra, double re) {
    const double u = (az - a) / ra, v = (el - e) / re;
    return u * u + v * v < 1.0;
  };
  if (near(-24, 22, 7, 3.5) || near(24, 22, 7, 3.5)) return eye;
  if (near(0, -6, 13, 3)) return lip;
  const double shade = 0.9 + 0.1 * std::cos(deg2rad(el));
  return skin * shade;
}

}  // namespace standin

/// Procedural watertight head (ellipsoid cranium + frustum neck + nose bump),
/// built by radially projecting an icosphere onto the star-shaped surface.
/// Landmarks are the vertices closest to fixed facial directions.
inline HeadMesh make_standin_head(int resolution = 3) {
  if (resolution < 1) throw InvalidRangeError("make_standin_head: resolution must be >= 1");
  HeadMesh h;
  h.mesh = make_icosphere(resolution);
  for (auto& v : h.mesh.vertices) v = standin::surface_point(v);
  std::vector<Vec3> dirs;
  dirs.reserve(h.mesh.vertices.size());
  for (const auto& v : h.mesh.vertices) dirs.push_back(normalized(v - standin::kStarCenter));
  for (const auto& [name, targets] : standin::landmark_directions()) {
    LandmarkGroup g{name, {}};
    for (const auto& t : targets) {
      std::int32_t best = 0;
      double best_dot = -2;
      for (std::size_t i = 0; i < dirs.size(); ++i)
        if (const double c = dot(dirs[i], t); c > best_dot) best_dot = c, best = std::int32_t(i);
      if (g.indices.empty() || g.indices.back() != best) g.indices.push_back(best);
    }
    h.landmark_groups.push_back(std::move(g));
  }
  validate_head_mesh(h);
  return h;
}

}  // namespace headforge
