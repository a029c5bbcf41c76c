// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>

// Eigen first: the resolver headers pulled in by the HTTP client define `_res`.
#include "../oracles.hpp"
#include "headforge/headforge.hpp"

using namespace headforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAILED ") + what;
    pass = pass && ok;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const PriorField& standin_prior() {
  static const PriorField prior = [] {
    PriorField p(make_standin_head(3));
    p.bake(48);
    return p;
  }();
  return prior;
}

// ---- 1: prior density --------------------------------------------------------

Outcome prior_density() {
  Outcome o;
  const double a = 0.005;
  const double at_surface = prior_density_from_distance(0.0, a);
  o.check(std::abs(at_surface - 100.0) <= 1e-3, "sigma(0) = " + fmt("%.9f", at_surface));

  // zero for every d > 5a
  double worst = 0, worst_d = 0;
  for (int i = 1; i <= 2000; ++i) {
    const double d = 5 * a + i * (5 * a / 2000);
    const double s = prior_density_from_distance(d, a);
    if (s > worst) worst = s, worst_d = d;
  }
  o.check(worst == 0.0, "max sigma over d in (5a, 10a] = " + fmt("%.6g", worst) + " at d/a = " + fmt("%.4f", worst_d / a));
  // where the clamp actually begins
  bool clamp_ok = true;
  for (int i = 1; i <= 2000; ++i)
    clamp_ok &= prior_density_from_distance(oracle::kZeroThreshold * a * (1 + i * 1e-4), a) == 0.0;
  o.check(clamp_ok, "sigma = 0 for d > " + fmt("%.6f", oracle::kZeroThreshold) + "a");

  const PriorField& prior = standin_prior();
  const Vec3 from{0, 0, 0}, to{0, 0, 0.6};
  double prev = prior.prior_density(from);
  bool mono = true, crossed = false;
  for (int i = 1; i < 1000; ++i) {
    const Vec3 x = from + (to - from) * (i / 999.0);
    const double s = prior.prior_density(x);
    mono &= s <= prev;
    crossed |= prior.signed_distance(x) > 0;
    prev = s;
  }
  o.check(mono && crossed, "non-increasing over 1000 samples through the surface");
  return o;
}

// ---- 2: compositing ----------------------------------------------------------

Outcome compositing() {
  Outcome o;
  double worst_t = 0;
  for (double sigma : {0.1, 1.0, 4.0, 12.5}) {
    const int n = 128;
    const double L = 0.9;
    const std::vector<double> s(n, sigma), d(n, L / n);
    const std::vector<Vec3> c(n, Vec3{0.5, 0.5, 0.5});
    const auto r = composite(s, c, d, {0, 0, 0});
    worst_t = std::max(worst_t, std::abs((1.0 - r.opacity) - std::exp(-sigma * L)));
  }
  o.check(worst_t <= 1e-6, "transmittance error " + fmt("%.3g", worst_t));

  // one random ray per pixel of a 32 x 32 image
  Rng rng(12);
  double worst_sum = 0;
  for (int px = 0; px < 32 * 32; ++px) {
    const int n = 1 + int(rng.uniform_int(0, 127));
    std::vector<double> s(n), d(n);
    std::vector<Vec3> c(n);
    for (int i = 0; i < n; ++i) {
      s[i] = rng.uniform(0, 200);
      d[i] = rng.uniform(0, 0.02);
      c[i] = {rng.uniform01(), rng.uniform01(), rng.uniform01()};
    }
    const auto r = composite(s, c, d, {1, 1, 1});
    double sum = 0;
    for (double w : r.weights) sum += w;
    worst_sum = std::max(worst_sum, std::abs(sum + transmittance(s, d) - 1.0));
  }
  o.check(worst_sum <= 1e-6, "per-pixel sum(W) + T error " + fmt("%.3g", worst_sum));

  const auto r = composite(std::vector<double>{1.0, 1.0}, std::vector<Vec3>{{1, 0, 0}, {0, 1, 0}},
                           std::vector<double>{1.0, 1.0}, {0, 0, 0});
  const double e = std::max(std::abs(r.weights[0] - 0.63212), std::abs(r.weights[1] - 0.23254));
  o.check(e <= 1e-5, "worked case W = (" + fmt("%.5f", r.weights[0]) + ", " + fmt("%.5f", r.weights[1]) + ")");
  return o;
}

// ---- 3: renderer gradients ---------------------------------------------------

Outcome renderer_gradients() {
  Outcome o;
  const auto& prior = standin_prior();
  FieldConfig fc;
  fc.table_size_log2 = 12;
  fc.table_init = 0.5;
  fc.density_bias_init = 0.0;
  FieldParams p(fc);
  Rng init(5);
  p.initialize(init);
  const RenderSettings rs{32, true, 0.0, NormalSource::None};
  CameraPose pose;
  pose.azimuth = 25;
  pose.radius = 1.0;
  pose.fov = 30;
  const Vec3 bg{0.3, 0.6, 0.9};
  Image up(4, 4, 3);
  Rng rng(7);
  for (auto& v : up.data) v = float(rng.uniform(-1, 1));
  const auto grad = render_backward(p, prior, pose, 4, 4, rs, bg, 9, up);
  const auto frame = camera_frame(pose, 4, 4);
  auto loss = [&] {
    double s = 0;
    for (int row = 0; row < 4; ++row)
      for (int col = 0; col < 4; ++col) {
        const Vec3 c = render_pixel(p, prior, frame, row, col, rs, bg, 9).rgb;
        for (int k = 0; k < 3; ++k) s += c[k] * up.at(row, col, k);
      }
    return s;
  };
  // half the probes in the MLP, half among the table entries the rays touch
  std::vector<std::size_t> probes;
  const std::size_t mlp = p.mlp_offset();
  for (int i = 0; i < 25; ++i) probes.push_back(mlp + std::size_t(rng.uniform_int(0, std::int64_t(p.size() - mlp) - 1)));
  std::vector<std::size_t> touched;
  for (std::size_t i = 0; i < mlp; ++i)
    if (grad[i] != 0.0f) touched.push_back(i);
  for (int i = 0; i < 25 && !touched.empty(); ++i)
    probes.push_back(touched[std::size_t(rng.uniform_int(0, std::int64_t(touched.size()) - 1))]);
  int ok = 0;
  double worst = 0;
  for (std::size_t i : probes) {
    const float orig = p.data()[i];
    const double h = 1e-6;
    const float hi = float(orig + h), lo = float(orig - h);
    p.data()[i] = hi;
    const double lp = loss();
    p.data()[i] = lo;
    const double lm = loss();
    p.data()[i] = orig;
    const double fd = (lp - lm) / (double(hi) - double(lo));
    const double scale = std::max(std::abs(fd), std::abs(double(grad[i])));
    const double err = std::abs(grad[i] - fd);
    if (err <= 1e-3 * scale + 1e-7) ++ok;
    if (scale > 1e-7) worst = std::max(worst, err / scale);
  }
  o.check(probes.size() == 50 && ok == 50,
          std::to_string(ok) + "/" + std::to_string(probes.size()) + " probes, worst relative " + fmt("%.2e", worst));
  return o;
}

// ---- 4: marching tetrahedra --------------------------------------------------

Outcome marching() {
  Outcome o;
  const std::vector<Vec3> pos{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const std::vector<Tet> tets{{0, 1, 2, 3}};
  int matched = 0;
  for (unsigned mask = 0; mask < 16; ++mask) {
    std::vector<float> s(4);
    for (int m = 0; m < 4; ++m) s[m] = (mask >> m) & 1 ? -(1.0f + 0.3f * m) : 0.5f + 0.2f * m;
    const auto want = oracle::tet_case(mask);
    const auto got = marching_tets(pos, s, tets);
    bool ok = got.mesh.faces.size() == std::size_t(want.triangles) && got.mesh.vertices.size() == want.cut_edges.size();
    for (auto [a, b] : want.cut_edges) {
      const double w = double(s[a]) / (double(s[a]) - double(s[b]));
      const Vec3 x = pos[a] + (pos[b] - pos[a]) * w;
      ok &= std::count_if(got.mesh.vertices.begin(), got.mesh.vertices.end(),
                          [&](const Vec3& v) { return norm(v - x) < 1e-12; }) == 1;
    }
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
    for (std::size_t f = 0; f < got.mesh.faces.size(); ++f) ok &= dot(got.mesh.face_normal(f), cpos / np - cneg / nn) > 0;
    matched += ok;
  }
  o.check(matched == 16, std::to_string(matched) + "/16 sign patterns");

  TetGrid g(32, 1.25);
  for (std::size_t v = 0; v < g.vertex_count(); ++v)
    g.s[v] = static_cast<float>(norm(g.base_position(std::int32_t(v))) - 1.0);
  const auto r = marching_tets(g);
  const bool closed = !r.mesh.empty() && non_manifold_edges(r.mesh).empty();
  const auto chi = euler_characteristic(r.mesh);
  double worst = 0;
  for (const auto& v : r.mesh.vertices) worst = std::max(worst, std::abs(norm(v) - 1.0));
  const double diag = g.cell() * std::sqrt(3.0);
  o.check(closed, "sphere watertight (" + std::to_string(r.mesh.faces.size()) + " faces)");
  o.check(chi == 2, "Euler characteristic " + std::to_string(chi));
  o.check(worst < diag, "max |r - 1| " + fmt("%.4f", worst) + " < diagonal " + fmt("%.4f", diag));
  return o;
}

// ---- 5: IESD algebra -----------------------------------------------------------

Outcome iesd() {
  Outcome o;
  Image a(8, 8, 3), b(8, 8, 3), c(8, 8, 3), zero(8, 8, 3, 0.0f), apc(8, 8, 3);
  Rng rng(3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.data[i] = float(rng.uniform(-3, 3));
    b.data[i] = float(rng.uniform(-3, 3));
  }
  o.check(iesd_blend(a, b, 1.0).data == a.data && iesd_blend(a, b, 0.0).data == b.data, "endpoints exact");
  // representable inputs: every product and sum is exact in binary floating point
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.data[i] = float(rng.uniform_int(-1024, 1024)) / 1024.0f;
    c.data[i] = float(rng.uniform_int(-1024, 1024)) / 1024.0f;
    b.data[i] = float(rng.uniform_int(-1024, 1024)) / 1024.0f;
    apc.data[i] = a.data[i] + c.data[i];
  }
  bool linear = true;
  for (double w : {0.25, 0.375, 0.5, 0.75}) {
    const Image l = iesd_blend(apc, zero, w), r1 = iesd_blend(a, zero, w), r2 = iesd_blend(c, zero, w);
    const Image ab = iesd_blend(a, b, w), ba = iesd_blend(b, a, w);
    for (std::size_t i = 0; i < a.size(); ++i) {
      linear &= l.data[i] == r1.data[i] + r2.data[i];
      linear &= ab.data[i] + ba.data[i] == a.data[i] + b.data[i];
    }
  }
  o.check(linear, "linearity exact");
  const float worked = iesd_blend(Image(1, 1, 3, 1.0f), Image(1, 1, 3, 0.0f), 0.6).data[0];
  o.check(worked == 0.6f, "worked blend " + fmt("%.7f", worked));
  return o;
}

// ---- 6: mock SDS dynamics ------------------------------------------------------

Outcome sds_dynamics() {
  Outcome o;
  const auto schedule = DiffusionSchedule::scaled_linear();
  Image target(32, 32, 3);
  Rng init(100);
  for (auto& v : target.data) v = float(init.uniform01());
  Image z(32, 32, 3, 0.5f);
  MockPredictor mock(schedule, target);
  LocalScoreProvider provider(mock, schedule);
  PromptSet prompts;
  prompts.base_prompt = "a portrait";
  const SdsContext ctx{&prompts, ViewBucket::Front, nullptr, nullptr, std::nullopt};
  GuidanceConfig gc;
  gc.cfg_scale = 1.0;
  AdamState opt(z.size());
  Rng rng(4);
  const double start = mean_abs_error(z, target);
  for (int step = 0; step < 200; ++step) {
    const auto r = sds_step(provider, z, ctx, gc, schedule, rng);
    adam_step(z.data, r.gradient.data, opt, {0.1, 0.9, 0.99, 1e-8});
  }
  const double drop = 1.0 - mean_abs_error(z, target) / start;
  o.check(drop >= 0.9, "mean |z - z*| reduced by " + fmt("%.1f%%", 100 * drop));

  const auto quarter = DiffusionSchedule::from_alpha_bar(std::vector<double>(1000, 0.25));
  Image zq(4, 4, 3), tq(4, 4, 3);
  for (std::size_t i = 0; i < zq.size(); ++i) {
    zq.data[i] = float(init.uniform01());
    tq.data[i] = float(init.uniform01());
  }
  MockPredictor mq(quarter, tq);
  LocalScoreProvider pq(mq, quarter);
  std::vector<double> mean(zq.size(), 0.0);
  for (int i = 0; i < 1000; ++i) {
    const auto r = sds_step(pq, zq, ctx, gc, quarter, rng);
    for (std::size_t k = 0; k < zq.size(); ++k) mean[k] += r.gradient.data[k] / 1000.0;
  }
  double worst = 0;
  for (std::size_t k = 0; k < zq.size(); ++k)
    worst = std::max(worst, std::abs(mean[k] - oracle::kExpectedGradient * (double(zq.data[k]) - tq.data[k])));
  o.check(worst <= 1e-4, "expected gradient error " + fmt("%.2e", worst));
  return o;
}

// ---- 7: coarse smoke -----------------------------------------------------------

PipelineConfig smoke_config() {
  PipelineConfig cfg;
  cfg.field.table_size_log2 = 14;
  cfg.render.samples_per_ray = 32;
  cfg.background = BackgroundPolicy::White;
  cfg.camera.azimuth_range = {0, 0};
  cfg.camera.theta_range = {90, 90};
  cfg.camera.radius_range = {1.25, 1.25};
  cfg.camera.fov_range = {40, 40};
  cfg.prior_bake_resolution = 48;
  cfg.prompts.base_prompt = "a DSLR portrait of a man";
  cfg.coarse.resolution = 16;
  cfg.coarse.iterations = 100;
  cfg.coarse.batch_size = 1;
  cfg.coarse.lr_field = 1e-2;
  cfg.coarse.seed = 2024;
  return cfg;
}

Outcome coarse_smoke() {
  Outcome o;
  const PipelineConfig cfg = smoke_config();
  const HeadMesh head = make_standin_head(3);
  const PriorField prior = make_prior(head, cfg);
  const auto schedule = cfg.schedule();
  MockPredictor mock(schedule, standin_target(head));
  LocalScoreProvider provider(mock, schedule);
  const RunContext ctx{&prior, &cfg, &provider, {}, {}};

  CameraPose pose;
  pose.azimuth = 0;
  pose.polar_theta = 90;
  pose.radius = 1.25;
  pose.fov = 40;
  const int n = cfg.coarse.resolution;
  Image target = rasterize(head.mesh, standin::albedo, pose, n, n).rgb;
  const auto mask = rasterize(head.mesh, standin::albedo, pose, n, n).mask;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (mask.data[i / 3] == 0.0f) target.data[i] = 1.0f;
  RenderSettings eval = cfg.render;
  eval.jitter = false;
  auto mse = [&](const FieldParams& f) {
    return mean_squared_error(render_image(f, prior, pose, n, n, eval, {1, 1, 1}, 0).rgb, target);
  };

  const auto t0 = std::chrono::steady_clock::now();
  const RunState initial = start_coarse(cfg);
  const RunState a = run_coarse(ctx);
  const RunState b = run_coarse(ctx);
  const double elapsed = seconds_since(t0);
  const double before = mse(initial.field), after = mse(a.field);
  const double drop = 1.0 - after / before;
  o.check(drop >= 0.5, "MSE " + fmt("%.4f", before) + " -> " + fmt("%.4f", after) + " (" + fmt("%.1f%%", 100 * drop) + " drop)");
  o.check(a.field == b.field && metrics_digest(a.metrics) == metrics_digest(b.metrics),
          "two seeded runs identical, digest " + metrics_digest(a.metrics).substr(0, 16));
  o.check(elapsed < 120.0, "both runs in " + fmt("%.1f s", elapsed));
  return o;
}

// ---- 8: camera and landmarks ---------------------------------------------------

Outcome camera_landmarks() {
  Outcome o;
  Rng rng(123);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    CameraPose p = sample_pose({}, rng);
    const int w = 64 + int(rng.uniform_int(0, 64)), h = 64 + int(rng.uniform_int(0, 64));
    const Vec3 x{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    const auto got = project_point(camera_frame(p, w, h), x);
    const auto P = oracle::projection_matrix(p.azimuth, p.polar_theta, p.radius, p.fov, oracle::to_eigen(p.look_at), w, h);
    const auto want = oracle::project(P, oracle::to_eigen(x));
    worst = std::max({worst, std::abs(got.u - want.u), std::abs(got.v - want.v)});
  }
  o.check(worst < 0.5, "projection error " + fmt("%.2e px", worst));
  o.check(view_bucket(0) == ViewBucket::Front && view_bucket(90) == ViewBucket::Side &&
              view_bucket(180) == ViewBucket::Back,
          "view buckets");

  const auto& prior = standin_prior();
  FieldParams p(FieldConfig{});  // zero weights plus the density bias: the prior alone
  p.data()[p.block("mlp.b2").offset + 3] = float(FieldConfig{}.density_bias_init);
  const RenderSettings rs{128, false, 1e-4, NormalSource::None};
  double lowest = 1;
  for (double az : {0.0, 90.0, 200.0}) {
    CameraPose pose;
    pose.azimuth = az;
    const int n = 64;
    const auto render = render_image(p, prior, pose, n, n, rs, {1, 1, 1}, 0);
    const auto raster = rasterize(prior.mesh(), [](const Vec3&) { return Vec3{0, 0, 0}; }, pose, n, n);
    int inter = 0, uni = 0;
    for (int i = 0; i < n * n; ++i) {
      const bool x = render.opacity.data[i] > 0.5f, y = raster.mask.data[i] > 0.5f;
      inter += x && y;
      uni += x || y;
    }
    lowest = std::min(lowest, double(inter) / uni);
  }
  o.check(lowest >= 0.95, "silhouette IoU " + fmt("%.4f", lowest));
  return o;
}

// ---- 9: persistence ------------------------------------------------------------

Outcome persistence() {
  Outcome o;
  PipelineConfig cfg;
  cfg.field.table_size_log2 = 12;
  cfg.render.samples_per_ray = 24;
  cfg.prior_bake_resolution = 24;
  cfg.grid_resolution = 12;
  cfg.prompts.base_prompt = "a bust";
  for (Stage s : {Stage::Coarse, Stage::Fine}) {
    cfg.stage(s).resolution = 12;
    cfg.stage(s).batch_size = 2;
    cfg.stage(s).iterations = 6;
  }
  const HeadMesh head = make_standin_head(2);
  const PriorField prior = make_prior(head, cfg);
  const auto schedule = cfg.schedule();
  MockPredictor mock(schedule, standin_target(head));
  LocalScoreProvider provider(mock, schedule);
  const fs::path dir = fs::temp_directory_path() / ("headforge_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const RunContext quiet{&prior, &cfg, &provider, {}, {}};
  const RunContext saving{&prior, &cfg, &provider, dir, {}};

  auto same = [](const RunState& x, const RunState& y) {
    bool eq = x.iteration == y.iteration && x.field == y.field && x.field_opt == y.field_opt && x.rng == y.rng;
    if (x.grid && y.grid)
      eq = eq && std::memcmp(x.grid->s.data(), y.grid->s.data(), x.grid->s.size() * 4) == 0 &&
           std::memcmp(x.grid->dv.data(), y.grid->dv.data(), x.grid->dv.size() * 4) == 0;
    return eq && x.grid.has_value() == y.grid.has_value();
  };

  const RunState full = run_coarse(quiet);
  RunState part = start_coarse(cfg);
  run_coarse(part, saving, 3);
  RunState resumed = load_checkpoint(dir / "coarse.hsck");
  run_coarse(resumed, quiet, 6);
  o.check(same(full, resumed), "coarse resume parameter-exact");

  RunState fine_full = start_refinement(full, prior, cfg, Stage::Fine);
  run_refinement(fine_full, quiet, 6);
  RunState fine_part = start_refinement(full, prior, cfg, Stage::Fine);
  run_refinement(fine_part, saving, 2);
  RunState fine_resumed = load_checkpoint(dir / "fine.hsck");
  run_refinement(fine_resumed, quiet, 6);
  o.check(same(fine_full, fine_resumed), "fine resume parameter-exact");

  const TriMesh mesh = extract_mesh(fine_full, prior, cfg);
  export_obj(mesh, dir / "surface.obj");
  const TriMesh back = read_obj(dir / "surface.obj");
  o.check(!mesh.empty() && oracle::vertex_multiset(back) == oracle::vertex_multiset(mesh) &&
              oracle::face_multiset(back) == oracle::face_multiset(mesh),
          "OBJ re-import identical (" + std::to_string(mesh.vertices.size()) + " vertices)");
  fs::remove_all(dir);
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {1, "prior density", 1.0, prior_density},
      {2, "compositing", 1.0, compositing},
      {3, "renderer gradients", 30.0, renderer_gradients},
      {4, "marching tetrahedra", 10.0, marching},
      {5, "IESD algebra", 1.0, iesd},
      {6, "mock SDS dynamics", 10.0, sds_dynamics},
      {7, "coarse smoke", 120.0, coarse_smoke},
      {8, "camera and landmarks", 1e9, camera_landmarks},
      {9, "persistence", 1e9, persistence},
  };
  standin_prior();  // shared fixture, built outside the timed sections
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.check(false, std::string("threw: ") + e.what());
    }
    const double t = seconds_since(t0);
    if (c.budget_s < 1e8) o.check(t < c.budget_s, "runtime " + fmt("%.3f s", t) + " < " + fmt("%g s", c.budget_s));
    else o.check(true, "runtime " + fmt("%.3f s", t));
    failed += !o.pass;
    std::printf("criterion %d (%s): %s  [%s]\n", c.id, c.name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/9 criteria passed\n", 9 - failed);
  return failed == 0 ? 0 : 1;
}
