// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "headforge/bvh.hpp"
#include "headforge/dmtet.hpp"
#include "oracles.hpp"

using namespace headforge;

namespace {

TetGrid sphere_grid(int r, double half = 1.25) {
  TetGrid g(r, half);
  for (std::size_t v = 0; v < g.vertex_count(); ++v)
    g.s[v] = static_cast<float>(norm(g.base_position(std::int32_t(v))) - 1.0);
  return g;
}

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) { return 0.5 * norm(cross(b - a, c - a)); }

// Area of a planar convex polygon given in any order.
double polygon_area(std::vector<Vec3> pts, const Vec3& normal) {
  Vec3 c;
  for (const auto& p : pts) c += p;
  c = c / double(pts.size());
  const Vec3 u = normalized(pts[0] - c), v = cross(normalized(normal), u);
  std::sort(pts.begin(), pts.end(), [&](const Vec3& a, const Vec3& b) {
    return std::atan2(dot(a - c, v), dot(a - c, u)) < std::atan2(dot(b - c, v), dot(b - c, u));
  });
  double area = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) area += triangle_area(c, pts[i], pts[(i + 1) % pts.size()]);
  return area;
}

double min_tet_volume(const TetGrid& g) {
  double lo = std::numeric_limits<double>::infinity();
  g.for_each_tet([&](const Tet& t) {
    lo = std::min(lo, signed_volume(g.position(t[0]), g.position(t[1]), g.position(t[2]), g.position(t[3])));
  });
  return lo;
}

}  // namespace

TEST(TetGrid, CountsAndBaseOrientation) {
  for (int r : {1, 2, 3, 5}) {
    const TetGrid g(r, 1.0);
    std::size_t n = 0;
    double volume = 0;
    g.for_each_tet([&](const Tet& t) {
      ++n;
      const double v = signed_volume(g.position(t[0]), g.position(t[1]), g.position(t[2]), g.position(t[3]));
      EXPECT_GT(v, 0);
      volume += v;
    });
    EXPECT_EQ(n, g.tet_count());
    EXPECT_NEAR(volume, 8.0, 1e-9) << "tets must tile the cube";
  }
  EXPECT_THROW(TetGrid(0, 1.0), InvalidRangeError);
  EXPECT_THROW(TetGrid(4, 0.0), InvalidRangeError);
}

TEST(TetGrid, OffsetsWithinClampKeepOrientation) {
  TetGrid g(3, 1.0);
  Rng rng(4);
  const double m = g.max_offset();
  for (int trial = 0; trial < 50; ++trial) {
    for (auto& x : g.dv) x = static_cast<float>(rng.uniform(-3 * m, 3 * m));
    g.clamp_offsets();
    for (float x : g.dv) ASSERT_LE(std::abs(x), m * (1 + 1e-6));
    EXPECT_GT(min_tet_volume(g), 0.0);
  }
  // extreme corners of the offset box
  for (int trial = 0; trial < 200; ++trial) {
    for (auto& x : g.dv) x = static_cast<float>(rng.uniform01() < 0.5 ? -m : m);
    EXPECT_GT(min_tet_volume(g), 0.0);
  }
}

TEST(TetGrid, OffsetBoundIsTightAtOneEighthCell) {
  // Exhaustive over the 2^12 corner offsets of each tet: volume stays
  // positive at 0.1 cell and reaches zero at cell / 8.
  const TetGrid g(2, 1.0);
  auto worst = [&](double frac) {
    const double m = frac * g.cell();
    double lo = std::numeric_limits<double>::infinity();
    g.for_each_tet([&](const Tet& t) {
      for (int mask = 0; mask < 4096; ++mask) {
        Vec3 p[4];
        for (int v = 0; v < 4; ++v) {
          p[v] = g.base_position(t[v]);
          for (int a = 0; a < 3; ++a) p[v][a] += (mask >> (3 * v + a)) & 1 ? m : -m;
        }
        lo = std::min(lo, signed_volume(p[0], p[1], p[2], p[3]));
      }
    });
    return lo;
  };
  EXPECT_GT(worst(TetGrid::kOffsetLimit), 0.0);
  EXPECT_NEAR(worst(0.125), 0.0, 1e-15);
  EXPECT_LT(worst(0.15), 0.0);
}

TEST(MarchingTets, AllSixteenSignPatterns) {
  const std::vector<Vec3> pos{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  ASSERT_GT(signed_volume(pos[0], pos[1], pos[2], pos[3]), 0);
  const std::vector<Tet> tets{{0, 1, 2, 3}};
  for (unsigned mask = 0; mask < 16; ++mask) {
    std::vector<float> s(4);
    for (int m = 0; m < 4; ++m) s[m] = (mask >> m) & 1 ? -(1.0f + 0.3f * m) : 0.5f + 0.2f * m;
    const auto expected = oracle::tet_case(mask);
    const auto got = marching_tets(pos, s, tets);
    ASSERT_EQ(got.mesh.faces.size(), std::size_t(expected.triangles)) << "mask " << mask;
    ASSERT_EQ(got.mesh.vertices.size(), expected.cut_edges.size()) << "mask " << mask;
    // every cut edge contributes its zero crossing exactly once
    std::vector<Vec3> want;
    for (auto [a, b] : expected.cut_edges) {
      const double w = double(s[a]) / (double(s[a]) - double(s[b]));
      want.push_back(pos[a] + (pos[b] - pos[a]) * w);
    }
    for (const auto& w : want) {
      const auto hits = std::count_if(got.mesh.vertices.begin(), got.mesh.vertices.end(),
                                      [&](const Vec3& v) { return norm(v - w) < 1e-12; });
      EXPECT_EQ(hits, 1) << "mask " << mask;
    }
    if (expected.triangles == 0) continue;
    // normals face the positive side, and the triangles tile the cut polygon
    Vec3 cneg, cpos;
    int nn = 0, np = 0;
    for (int m = 0; m < 4; ++m) {
      if ((mask >> m) & 1) {
        cneg += pos[m];
        ++nn;
      } else {
        cpos += pos[m];
        ++np;
      }
    }
    const Vec3 outward = cpos / np - cneg / nn;
    double area = 0;
    for (std::size_t f = 0; f < got.mesh.faces.size(); ++f) {
      EXPECT_GT(dot(got.mesh.face_normal(f), outward), 0) << "mask " << mask;
      const auto& t = got.mesh.faces[f];
      area += triangle_area(got.mesh.vertices[t[0]], got.mesh.vertices[t[1]], got.mesh.vertices[t[2]]);
    }
    EXPECT_NEAR(area, polygon_area(want, outward), 1e-12) << "mask " << mask;
  }
}

TEST(MarchingTets, UnitTetMidpoints) {
  const std::vector<Vec3> pos{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const std::vector<Tet> tets{{0, 1, 2, 3}};
  const auto one = marching_tets(pos, std::vector<float>{-1, 1, 1, 1}, tets);
  ASSERT_EQ(one.mesh.faces.size(), 1u);
  auto sorted = oracle::vertex_multiset(one.mesh);
  EXPECT_EQ(sorted, (std::vector<std::array<double, 3>>{{0, 0, 0.5}, {0, 0.5, 0}, {0.5, 0, 0}}));
  const auto two = marching_tets(pos, std::vector<float>{-1, -1, 1, 1}, tets);
  ASSERT_EQ(two.mesh.faces.size(), 2u);
  EXPECT_EQ(oracle::vertex_multiset(two.mesh),
            (std::vector<std::array<double, 3>>{{0, 0, 0.5}, {0, 0.5, 0}, {0.5, 0, 0.5}, {0.5, 0.5, 0}}));
  EXPECT_THROW(marching_tets(pos, std::vector<float>{-1, 1, 1}, tets), ShapeError);
  EXPECT_THROW(marching_tets(pos, std::vector<float>{-1, 1, 1, 1}, std::vector<Tet>{{0, 1, 2, 9}}), ValidationError);
}

TEST(MarchingTets, ZeroCountsAsPositive) {
  const std::vector<Vec3> pos{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const auto r = marching_tets(pos, std::vector<float>{-1, 0, 1, 1}, std::vector<Tet>{{0, 1, 2, 3}});
  ASSERT_EQ(r.mesh.faces.size(), 1u);
  const auto n = std::count_if(r.mesh.vertices.begin(), r.mesh.vertices.end(),
                               [](const Vec3& v) { return norm(v - Vec3{1, 0, 0}) < 1e-7; });
  EXPECT_EQ(n, 1);
}

TEST(MarchingTets, DegenerateTetIsReported) {
  const std::vector<Vec3> pos{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  try {
    marching_tets(pos, std::vector<float>{-1, 1, 1, 1}, std::vector<Tet>{{0, 1, 2, 3}});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("tet 0"), std::string::npos);
  }
}

TEST(MarchingTets, SphereIsClosedAccurateAndOutward) {
  const TetGrid g = sphere_grid(32);
  const auto r = marching_tets(g);
  ASSERT_FALSE(r.mesh.empty());
  EXPECT_TRUE(non_manifold_edges(r.mesh).empty());
  EXPECT_EQ(euler_characteristic(r.mesh), 2);
  const double diag = g.cell() * std::sqrt(3.0);
  for (const auto& v : r.mesh.vertices) EXPECT_LT(std::abs(norm(v) - 1.0), diag);
  int inward = 0;
  for (std::size_t f = 0; f < r.mesh.faces.size(); ++f) {
    const auto& t = r.mesh.faces[f];
    const Vec3 c = (r.mesh.vertices[t[0]] + r.mesh.vertices[t[1]] + r.mesh.vertices[t[2]]) / 3.0;
    inward += dot(cross(r.mesh.vertices[t[1]] - r.mesh.vertices[t[0]], r.mesh.vertices[t[2]] - r.mesh.vertices[t[0]]), c) < 0;
  }
  EXPECT_EQ(inward, 0);
}

TEST(MarchingTets, SphereWithExactZerosStaysClosed) {
  TetGrid g = sphere_grid(16);
  int zeros = 0;
  for (std::size_t v = 0; v < g.vertex_count(); ++v)
    if (std::abs(g.s[v]) < 0.25 * g.cell()) g.s[v] = 0.0f, ++zeros;
  ASSERT_GT(zeros, 0);
  const auto r = marching_tets(g);
  EXPECT_TRUE(non_manifold_edges(r.mesh).empty());
  EXPECT_EQ(euler_characteristic(r.mesh), 2);
}

TEST(MarchingTets, SmallestGridStillFindsSphere) {
  const auto r = marching_tets(sphere_grid(8));
  EXPECT_FALSE(r.mesh.empty());
  EXPECT_TRUE(is_watertight(r.mesh));
}

TEST(MarchingTets, AllOneSignIsEmpty) {
  TetGrid g(8, 1.0);
  EXPECT_TRUE(marching_tets(g).mesh.empty());
  std::fill(g.s.begin(), g.s.end(), -1.0f);
  EXPECT_TRUE(marching_tets(g).mesh.empty());
}

TEST(MarchingTets, BackwardMatchesFiniteDifferences) {
  TetGrid g = sphere_grid(6);
  Rng rng(3);
  for (auto& x : g.dv) x = static_cast<float>(rng.uniform(-0.5, 0.5) * g.max_offset());
  const auto base = marching_tets(g);
  std::vector<Vec3> coeff(base.mesh.vertices.size());
  for (auto& c : coeff) c = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  auto loss = [&] {
    const auto r = marching_tets(g);
    double s = 0;
    for (std::size_t i = 0; i < coeff.size(); ++i) s += dot(coeff[i], r.mesh.vertices[i]);
    return s;
  };
  std::vector<float> gs(g.s.size(), 0.0f), gdv(g.dv.size(), 0.0f);
  marching_tets_backward(g, base, coeff, gs, gdv);

  auto fd = [&](std::vector<float>& v, std::size_t i) {
    const float orig = v[i];
    const float h = 1e-3f * std::max(1.0f, std::abs(orig));
    v[i] = orig + h;
    const double lp = loss();
    v[i] = orig - h;
    const double lm = loss();
    v[i] = orig;
    return (lp - lm) / (double(orig + h) - double(orig - h));
  };
  int checked = 0;
  for (const auto& src : base.sources) {
    if (checked >= 40) break;
    for (auto v : {src.p, src.q}) {
      const double num = fd(g.s, std::size_t(v));
      EXPECT_LT(std::abs(gs[v] - num), 2e-3 * std::max(1.0, std::abs(num))) << "s[" << v << "]";
      const auto a = std::size_t(v) * 3 + std::size_t(checked % 3);
      const double numd = fd(g.dv, a);
      EXPECT_LT(std::abs(gdv[a] - numd), 1e-3 * std::max(1.0, std::abs(numd))) << "dv[" << a << "]";
    }
    ++checked;
  }
  EXPECT_EQ(checked, 40);
}

TEST(MarchingTets, InitFromPriorMatchesSigns) {
  const PriorField prior(make_standin_head(2));
  const TetGrid g = init_grid(8, prior);
  for (std::size_t v = 0; v < g.vertex_count(); ++v) {
    const double d = prior.signed_distance(g.base_position(std::int32_t(v)));
    if (std::abs(d) > 1e-6) EXPECT_EQ(g.s[v] < 0, d < 0) << v;
  }
  EXPECT_THROW(init_grid(4, prior), InvalidRangeError);
}

TEST(MarchingTets, InitFromPriorOnlyFieldTracksSurface) {
  PriorField prior(make_standin_head(3));
  prior.bake(64);
  FieldParams p(FieldConfig{});
  p.data()[p.block("mlp.b2").offset + 3] = -10.0f;
  const TetGrid g = init_grid(32, p, prior);
  const auto r = marching_tets(g);
  ASSERT_FALSE(r.mesh.empty());
  EXPECT_TRUE(is_watertight(r.mesh));
  const double tol = 2 * g.cell();
  double worst = 0;
  for (const auto& v : r.mesh.vertices) worst = std::max(worst, std::abs(prior.signed_distance(v)));
  EXPECT_LT(worst, tol);
  const TriangleBvh extracted(r.mesh);
  worst = 0;
  for (const auto& v : prior.mesh().vertices) worst = std::max(worst, std::sqrt(extracted.nearest(v).dist2));
  EXPECT_LT(worst, tol);
}

TEST(Rasterize, EmptyMeshAndBackground) {
  EXPECT_THROW(rasterize(TriMesh{}, [](const Vec3&) { return Vec3{}; }, CameraPose{}, 4, 4), ValidationError);
  TriMesh far;
  far.vertices = {{5, 5, 0}, {6, 5, 0}, {5, 6, 0}};
  far.faces = {{0, 1, 2}};
  const auto r = rasterize(far, [](const Vec3&) { return Vec3{}; }, CameraPose{}, 8, 8);
  for (float v : r.rgb.data) EXPECT_EQ(v, 1.0f);
  for (float v : r.mask.data) EXPECT_EQ(v, 0.0f);
}

TEST(Rasterize, NearestSurfaceWins) {
  TriMesh m;
  m.vertices = {{-5, -5, 0.2}, {5, -5, 0.2}, {0, 5, 0.2}, {-5, -5, -0.2}, {5, -5, -0.2}, {0, 5, -0.2}};
  m.faces = {{3, 4, 5}, {0, 1, 2}};
  const auto r = rasterize(m, [](const Vec3& x) { return Vec3{x.z > 0 ? 1.0 : 0.0, 0, 0}; }, CameraPose{}, 6, 6);
  for (int i = 0; i < 36; ++i) {
    EXPECT_EQ(r.face[i], 1);
    EXPECT_NEAR(r.point[i].z, 0.2, 1e-12);
  }
}

TEST(Rasterize, ColorAndVertexGradientsMatchFiniteDifferences) {
  FieldConfig c;
  c.table_size_log2 = 12;
  c.table_init = 0.3;
  FieldParams p(c);
  Rng rng(8);
  p.initialize(rng);
  // one slanted triangle larger than the view, so coverage never changes
  TriMesh m;
  m.vertices = {{-4, -4, 0.15}, {4, -4, -0.1}, {0.2, 4, 0.05}};
  m.faces = {{0, 1, 2}};
  CameraPose pose;
  pose.fov = 30;
  Image up(5, 5, 3);
  for (auto& v : up.data) v = float(rng.uniform(-1, 1));
  // shade the exact surface points in double; the float image would swamp the quotient
  auto loss = [&] {
    const auto r = rasterize(m, p, pose, 5, 5);
    double s = 0;
    for (int pix = 0; pix < 25; ++pix) {
      const Vec3 c = field_eval(p, 0.0, r.point[std::size_t(pix)]).rgb;
      for (int k = 0; k < 3; ++k) s += double(up.data[std::size_t(pix) * 3 + k]) * c[k];
    }
    return s;
  };
  const auto fwd = rasterize(m, p, pose, 5, 5);
  for (float v : fwd.mask.data) ASSERT_EQ(v, 1.0f);
  std::vector<float> gc(p.size(), 0.0f);
  const auto vg = rasterize_backward(m, fwd, p, pose, up, gc);

  for (int vi = 0; vi < 3; ++vi)
    for (int a = 0; a < 3; ++a) {
      const double num = oracle::central_diff(
          [&](double x) {
            const double keep = m.vertices[vi][a];
            m.vertices[vi][a] = x;
            const double l = loss();
            m.vertices[vi][a] = keep;
            return l;
          },
          m.vertices[vi][a], 1e-7);
      EXPECT_LT(std::abs(vg[vi][a] - num), 1e-3 * std::max(std::abs(num), std::abs(vg[vi][a])) + 1e-6)
          << "vertex " << vi << " axis " << a;
    }

  for (int probe = 0; probe < 20; ++probe) {
    const std::size_t i = p.mlp_offset() + std::size_t(rng.uniform_int(0, std::int64_t(p.size() - p.mlp_offset()) - 1));
    const float orig = p.data()[i];
    const float hp = float(orig + 1e-6), hm = float(orig - 1e-6);
    p.data()[i] = hp;
    const double lp = loss();
    p.data()[i] = hm;
    const double lm = loss();
    p.data()[i] = orig;
    const double num = (lp - lm) / (double(hp) - double(hm));
    EXPECT_LT(std::abs(gc[i] - num), 1e-3 * std::max(std::abs(num), std::abs(double(gc[i]))) + 1e-7) << "param " << i;
  }
  const auto zero = rasterize_backward(m, fwd, p, pose, Image(5, 5, 3, 0.0f), gc);
  for (const auto& g : zero) EXPECT_EQ(g, Vec3{});
}

TEST(MeshExport, ObjRoundTripIsExact) {
  const auto r = marching_tets(sphere_grid(12));
  std::stringstream ss;
  write_obj(r.mesh, ss);
  const TriMesh back = parse_obj(ss);
  EXPECT_EQ(oracle::vertex_multiset(back), oracle::vertex_multiset(r.mesh));
  EXPECT_EQ(oracle::face_multiset(back), oracle::face_multiset(r.mesh));
}
