// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/evp.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "headforge/camera.hpp"
#include "headforge/checkpoint.hpp"
#include "headforge/config.hpp"
#include "headforge/dmtet.hpp"
#include "headforge/error.hpp"
#include "headforge/field.hpp"
#include "headforge/guidance.hpp"
#include "headforge/head_prior.hpp"
#include "headforge/mesh.hpp"
#include "headforge/optim.hpp"
#include "headforge/renderer.hpp"
#include "headforge/schedule.hpp"
#include "json.hpp"

namespace headforge {

enum class Stage { Coarse, Fine, Edit };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Coarse: return "coarse";
    case Stage::Fine: return "fine";
    case Stage::Edit: return "edit";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  if (s == "coarse") return Stage::Coarse;
  if (s == "fine") return Stage::Fine;
  if (s == "edit") return Stage::Edit;
  throw ValidationError("unknown stage '" + s + "'");
}

struct StageConfig {
  Stage stage = Stage::Coarse;
  int iterations = 7000;
  int resolution = 64;
  double lr_field = 1e-3;     // hash grid + MLP
  double lr_geometry = 1e-2;  // tet s and dv
  double beta1 = 0.9, beta2 = 0.99;
  int batch_size = 4;
  std::uint64_t seed = 0;
  int warmup = 0;            // linear LR ramp length; 0 = constant
  int checkpoint_every = 0;  // 0 = only at the end
  int snapshot_every = 0;    // 0 = never

  static StageConfig defaults(Stage s) {
    StageConfig c;
    c.stage = s;
    c.iterations = s == Stage::Coarse ? 7000 : 5000;
    c.resolution = s == Stage::Coarse ? 64 : 512;
    return c;
  }

  void validate() const {
    if (iterations <= 0) throw ConfigError(std::string(to_string(stage)) + ".iterations must be > 0");
    if (resolution < 8) throw ConfigError(std::string(to_string(stage)) + ".resolution must be >= 8");
    if (batch_size < 1) throw ConfigError(std::string(to_string(stage)) + ".batch_size must be >= 1");
    if (!(lr_field > 0 && lr_geometry > 0)) throw ConfigError("learning rates must be > 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0, 1)");
    if (warmup < 0 || checkpoint_every < 0 || snapshot_every < 0) throw ConfigError("intervals must be >= 0");
  }

  AdamConfig adam(double lr) const { return {lr, beta1, beta2, 1e-8}; }
};

enum class BackgroundPolicy { Random, White, Black };

struct PipelineConfig {
  int schedule_steps = 1000;
  double beta_start = 0.00085, beta_end = 0.012;
  FieldConfig field;
  CameraRanges camera;
  LandmarkStyle landmark;
  RenderSettings render{128, true, 1e-4, NormalSource::None};
  BackgroundPolicy background = BackgroundPolicy::Random;
  GuidanceConfig guidance;
  PromptSet prompts;
  std::string provider = "mock";
  std::string endpoint = "http://127.0.0.1:8765";
  int grid_resolution = 128;
  double grid_iso = 0.5;
  double prior_sharpness = PriorField::kDefaultSharpness;
  int prior_bake_resolution = 64;  // 0 = exact signed distance in the renderer
  StageConfig coarse = StageConfig::defaults(Stage::Coarse);
  StageConfig fine = StageConfig::defaults(Stage::Fine);
  StageConfig edit = StageConfig::defaults(Stage::Edit);

  DiffusionSchedule schedule() const { return DiffusionSchedule::scaled_linear(schedule_steps, beta_start, beta_end); }

  StageConfig& stage(Stage s) { return s == Stage::Coarse ? coarse : s == Stage::Fine ? fine : edit; }
  const StageConfig& stage(Stage s) const { return s == Stage::Coarse ? coarse : s == Stage::Fine ? fine : edit; }

  void validate() const {
    validate_ranges(camera);
    guidance.validate();
    coarse.validate();
    fine.validate();
    edit.validate();
    if (render.samples_per_ray < 1 || render.samples_per_ray > kMaxStepsPerRay)
      throw ConfigError("render.max_steps must be in [1, 1024]");
    if (grid_resolution < 8) throw ConfigError("dmtet.resolution must be >= 8");
    if (provider != "mock" && provider != "remote") throw ConfigError("guidance.provider must be mock or remote");
  }
};

namespace detail {

inline Range config_range(const ConfigTable& t, const std::string& key) {
  const auto v = t.get<std::vector<double>>(key);
  if (v.size() != 2) throw ConfigError("config key '" + key + "' must be a [lo, hi] pair");
  return {v[0], v[1]};
}

}  // namespace detail

/// Applies a parsed config file on top of `cfg`. Unknown keys are rejected.
inline void apply_config(PipelineConfig& cfg, const ConfigTable& t) {
  using detail::config_range;
  auto num = [&](const std::string& k) { return t.get<double>(k); };
  auto integer = [&](const std::string& k) {
    const double v = num(k);
    if (v != std::floor(v)) throw ConfigError("config key '" + k + "' must be an integer");
    return static_cast<int>(v);
  };
  auto str = [&](const std::string& k) { return t.get<std::string>(k); };
  auto flag = [&](const std::string& k) { return t.get<bool>(k); };

  std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"schedule.num_steps", [&](auto& k) { cfg.schedule_steps = integer(k); }},
      {"schedule.beta_start", [&](auto& k) { cfg.beta_start = num(k); }},
      {"schedule.beta_end", [&](auto& k) { cfg.beta_end = num(k); }},
      {"camera.azimuth", [&](auto& k) { cfg.camera.azimuth_range = config_range(t, k); }},
      {"camera.theta", [&](auto& k) { cfg.camera.theta_range = config_range(t, k); }},
      {"camera.radius", [&](auto& k) { cfg.camera.radius_range = config_range(t, k); }},
      {"camera.fov", [&](auto& k) { cfg.camera.fov_range = config_range(t, k); }},
      {"landmark.radius_px", [&](auto& k) { cfg.landmark.radius_px = num(k); }},
      {"landmark.line_width_px", [&](auto& k) { cfg.landmark.line_width_px = num(k); }},
      {"landmark.polylines", [&](auto& k) { cfg.landmark.polylines = flag(k); }},
      {"landmark.occlusion_eps", [&](auto& k) { cfg.landmark.occlusion_eps = num(k); }},
      {"landmark.palette",
       [&](auto& k) {
         const auto v = t.get<std::vector<double>>(k);
         if (v.empty() || v.size() % 3 != 0) throw ConfigError("landmark.palette must hold RGB triples");
         cfg.landmark.palette.clear();
         for (std::size_t i = 0; i < v.size(); i += 3)
           cfg.landmark.palette.push_back({float(v[i]), float(v[i + 1]), float(v[i + 2])});
       }},
      {"field.levels", [&](auto& k) { cfg.field.levels = integer(k); }},
      {"field.features_per_level", [&](auto& k) { cfg.field.features_per_level = integer(k); }},
      {"field.table_size_log2", [&](auto& k) { cfg.field.table_size_log2 = integer(k); }},
      {"field.base_resolution", [&](auto& k) { cfg.field.base_resolution = integer(k); }},
      {"field.max_resolution", [&](auto& k) { cfg.field.max_resolution = num(k); }},
      {"field.table_init", [&](auto& k) { cfg.field.table_init = num(k); }},
      {"field.density_bias_init", [&](auto& k) { cfg.field.density_bias_init = num(k); }},
      {"render.max_steps", [&](auto& k) { cfg.render.samples_per_ray = integer(k); }},
      {"render.jitter", [&](auto& k) { cfg.render.jitter = flag(k); }},
      {"render.early_stop", [&](auto& k) { cfg.render.early_stop_transmittance = num(k); }},
      {"render.background",
       [&](auto& k) {
         const auto v = str(k);
         if (v == "random") cfg.background = BackgroundPolicy::Random;
         else if (v == "white") cfg.background = BackgroundPolicy::White;
         else if (v == "black") cfg.background = BackgroundPolicy::Black;
         else throw ConfigError("render.background must be random, white or black");
       }},
      {"render.normals",
       [&](auto& k) {
         const auto v = str(k);
         if (v == "none") cfg.render.normals = NormalSource::None;
         else if (v == "density") cfg.render.normals = NormalSource::DensityGradient;
         else if (v == "predicted") cfg.render.normals = NormalSource::Predicted;
         else throw ConfigError("render.normals must be none, density or predicted");
       }},
      {"guidance.provider", [&](auto& k) { cfg.provider = str(k); }},
      {"guidance.endpoint", [&](auto& k) { cfg.endpoint = str(k); }},
      {"guidance.cfg_scale", [&](auto& k) { cfg.guidance.cfg_scale = num(k); }},
      {"guidance.edit_scale", [&](auto& k) { cfg.guidance.edit_scale = num(k); }},
      {"guidance.t_range", [&](auto& k) { cfg.guidance.t_range = config_range(t, k); }},
      {"guidance.back_token", [&](auto& k) { cfg.prompts.back_token = str(k); }},
      {"guidance.suffix_front", [&](auto& k) { cfg.prompts.suffix_front = str(k); }},
      {"guidance.suffix_side", [&](auto& k) { cfg.prompts.suffix_side = str(k); }},
      {"prompt.base", [&](auto& k) { cfg.prompts.base_prompt = str(k); }},
      {"prompt.instruction", [&](auto& k) { cfg.prompts.edit_instruction = str(k); }},
      {"dmtet.resolution", [&](auto& k) { cfg.grid_resolution = integer(k); }},
      {"dmtet.iso", [&](auto& k) { cfg.grid_iso = num(k); }},
      {"prior.sharpness", [&](auto& k) { cfg.prior_sharpness = num(k); }},
      {"prior.bake_resolution", [&](auto& k) { cfg.prior_bake_resolution = integer(k); }},
  };
  for (Stage s : {Stage::Coarse, Stage::Fine, Stage::Edit}) {
    const std::string p = std::string(to_string(s)) + ".";
    StageConfig* sc = &cfg.stage(s);
    setters[p + "iterations"] = [=](auto& k) { sc->iterations = integer(k); };
    setters[p + "resolution"] = [=](auto& k) { sc->resolution = integer(k); };
    setters[p + "lr"] = [=](auto& k) { sc->lr_field = num(k); };
    setters[p + "lr_geometry"] = [=](auto& k) { sc->lr_geometry = num(k); };
    setters[p + "beta1"] = [=](auto& k) { sc->beta1 = num(k); };
    setters[p + "beta2"] = [=](auto& k) { sc->beta2 = num(k); };
    setters[p + "batch_size"] = [=](auto& k) { sc->batch_size = integer(k); };
    setters[p + "seed"] = [=](auto& k) { sc->seed = static_cast<std::uint64_t>(num(k)); };
    setters[p + "warmup"] = [=](auto& k) { sc->warmup = integer(k); };
    setters[p + "checkpoint_every"] = [=](auto& k) { sc->checkpoint_every = integer(k); };
    setters[p + "snapshot_every"] = [=](auto& k) { sc->snapshot_every = integer(k); };
  }
  for (const auto& [key, value] : t.values()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(key);
  }
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  PipelineConfig cfg;
  apply_config(cfg, ConfigTable::load(path));
  cfg.validate();
  return cfg;
}

struct MetricRecord {
  Stage stage = Stage::Coarse;
  std::int64_t iteration = 0;
  double grad_norm = 0;
  double latency_ms = 0;         // summed provider latency over the batch
  std::int64_t skipped_nan = 0;  // views dropped this iteration
  std::vector<int> timesteps;

  nlohmann::json to_json(bool with_latency = true) const {
    nlohmann::json j = {{"stage", to_string(stage)}, {"iteration", iteration}, {"grad_norm", grad_norm},
                        {"skipped_nan", skipped_nan}, {"timesteps", timesteps}};
    if (with_latency) j["latency_ms"] = latency_ms;
    return j;
  }
};

/// SHA-256 (hex) over the metrics log with wall-clock latency left out.
inline std::string metrics_digest(const std::vector<MetricRecord>& log) {
  std::string text;
  for (const auto& r : log) text += r.to_json(false).dump() + "\n";
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("metrics_digest: SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Everything needed to continue an optimization exactly.
struct RunState {
  Stage stage = Stage::Coarse;
  PromptSet prompts;
  FieldParams field;  // coarse: the radiance field; fine/edit: the color field
  AdamState field_opt;
  std::optional<TetGrid> grid;
  AdamState s_opt, dv_opt;
  std::optional<FieldParams> reference;  // frozen coarse field (edit)
  std::int64_t iteration = 0;
  std::int64_t skipped_nan = 0;
  Rng rng;
  std::vector<MetricRecord> metrics;
};

struct RunContext {
  const PriorField* prior = nullptr;
  const PipelineConfig* config = nullptr;
  ScoreProvider* provider = nullptr;
  std::filesystem::path out_dir;                         // empty: write nothing
  std::function<void(const MetricRecord&)> on_iteration;  // progress hook
};

/// Caches frozen-coarse renders by pose quantized to 1 degree (radius to
/// 0.01); each bin is rendered once at its quantized pose.
class ReferenceRenderer {
 public:
  ReferenceRenderer(const FieldParams& frozen, const PriorField& prior, RenderSettings settings)
      : field_(&frozen), prior_(&prior), settings_(settings) {
    settings_.jitter = false;
    settings_.normals = NormalSource::None;
  }

  static CameraPose quantize(const CameraPose& p) {
    CameraPose q = p;
    q.azimuth = std::fmod(std::round(p.azimuth), 360.0);
    q.polar_theta = std::round(p.polar_theta);
    q.fov = std::round(p.fov);
    q.radius = std::round(p.radius * 100.0) / 100.0;
    return q;
  }

  const Image& render(const CameraPose& pose, int width, int height) {
    const CameraPose q = quantize(pose);
    const auto key = std::make_tuple(q.azimuth, q.polar_theta, q.fov, q.radius, width, height);
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      ++hits_;
      return it->second;
    }
    ++renders_;
    auto out = render_image(*field_, *prior_, q, width, height, settings_, Vec3{1, 1, 1}, 0);
    return cache_.emplace(key, std::move(out.rgb)).first->second;
  }

  std::size_t renders() const { return renders_; }
  std::size_t hits() const { return hits_; }

 private:
  const FieldParams* field_;
  const PriorField* prior_;
  RenderSettings settings_;
  std::map<std::tuple<double, double, double, double, int, int>, Image> cache_;
  std::size_t renders_ = 0, hits_ = 0;
};

/// Deterministic 512x512 (by default) render of the frozen coarse model.
inline Image render_reference(const FieldParams& coarse, const PriorField& prior, const CameraPose& pose,
                              const RenderSettings& settings, int resolution = 512) {
  ReferenceRenderer r(coarse, prior, settings);
  return r.render(pose, resolution, resolution);
}

namespace detail {

inline Vec3 draw_background(BackgroundPolicy p, Rng& rng) {
  switch (p) {
    case BackgroundPolicy::White: return {1, 1, 1};
    case BackgroundPolicy::Black: return {0, 0, 0};
    case BackgroundPolicy::Random: {
      const double r = rng.uniform01(), g = rng.uniform01(), b = rng.uniform01();
      return {r, g, b};
    }
  }
  return {1, 1, 1};
}

inline double lr_at(const StageConfig& sc, double lr, std::int64_t iteration) {
  if (sc.warmup <= 0) return lr;
  return lr * std::min(1.0, double(iteration + 1) / sc.warmup);
}

inline double squared_norm(std::span<const float> v) {
  double acc = 0;
  for (float x : v) acc += double(x) * x;
  return acc;
}

inline void scale(Image& img, double s) {
  for (auto& v : img.data) v = static_cast<float>(v * s);
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, Stage s) {
  return dir / (std::string(to_string(s)) + ".hsck");
}

}  // namespace detail

/// Viewing pose used for progress snapshots.
inline CameraPose snapshot_pose(const PipelineConfig& cfg) {
  CameraPose p;
  p.azimuth = 0;
  p.polar_theta = 90;
  p.radius = 0.5 * (cfg.camera.radius_range.first + cfg.camera.radius_range.second);
  p.fov = 0.5 * (cfg.camera.fov_range.first + cfg.camera.fov_range.second);
  return p;
}

/// Turns a prepared prior into a frozen one suitable for optimization loops.
inline PriorField make_prior(HeadMesh head, const PipelineConfig& cfg) {
  PriorField prior(std::move(head), cfg.prior_sharpness);
  if (cfg.prior_bake_resolution > 0) prior.bake(cfg.prior_bake_resolution);
  return prior;
}

// ---- checkpoints ------------------------------------------------------------

inline Checkpoint to_checkpoint(const RunState& st, const HeadMesh& prior_head) {
  Checkpoint ck;
  const auto& fc = st.field.config();
  nlohmann::json meta = {
      {"stage", to_string(st.stage)},
      {"iteration", st.iteration},
      {"skipped_nan", st.skipped_nan},
      {"rng", st.rng.serialize()},
      {"field",
       {{"levels", fc.levels},
        {"features_per_level", fc.features_per_level},
        {"table_size_log2", fc.table_size_log2},
        {"base_resolution", fc.base_resolution},
        {"max_resolution", fc.max_resolution},
        {"table_init", fc.table_init},
        {"density_bias_init", fc.density_bias_init}}},
      {"field_adam_step", st.field_opt.step},
      {"prompts",
       {{"base", st.prompts.base_prompt},
        {"instruction", st.prompts.edit_instruction ? nlohmann::json(*st.prompts.edit_instruction) : nlohmann::json()},
        {"suffix_front", st.prompts.suffix_front},
        {"suffix_side", st.prompts.suffix_side},
        {"back_token", st.prompts.back_token}}},
  };
  if (st.grid) {
    meta["grid"] = {{"resolution", st.grid->resolution()},
                    {"half_extent", st.grid->half_extent()},
                    {"s_adam_step", st.s_opt.step},
                    {"dv_adam_step", st.dv_opt.step}};
  }
  ck.put_bytes("meta", meta.dump());
  ck.put_f32("field.params", st.field.data());
  ck.put_f32("field.adam.m", st.field_opt.m);
  ck.put_f32("field.adam.v", st.field_opt.v);
  if (st.grid) {
    const auto nv = std::uint64_t(st.grid->vertex_count());
    ck.put_f32("grid.s", st.grid->s, {nv});
    ck.put_f32("grid.dv", st.grid->dv, {nv, 3});
    ck.put_f32("grid.s.adam.m", st.s_opt.m);
    ck.put_f32("grid.s.adam.v", st.s_opt.v);
    ck.put_f32("grid.dv.adam.m", st.dv_opt.m);
    ck.put_f32("grid.dv.adam.v", st.dv_opt.v);
  }
  if (st.reference) ck.put_f32("reference.params", st.reference->data());
  std::ostringstream obj, lm, log;
  write_obj(prior_head.mesh, obj);
  write_landmarks(prior_head, lm);
  for (const auto& r : st.metrics) log << r.to_json().dump() << '\n';
  ck.put_bytes("prior.obj", obj.str());
  ck.put_bytes("prior.landmarks", lm.str());
  ck.put_bytes("metrics.jsonl", log.str());
  return ck;
}

inline HeadMesh prior_from_checkpoint(const Checkpoint& ck) {
  HeadMesh h;
  std::istringstream obj(ck.get_bytes("prior.obj")), lm(ck.get_bytes("prior.landmarks"));
  h.mesh = parse_obj(obj);
  h.landmark_groups = parse_landmarks(lm);
  validate_head_mesh(h);
  return h;
}

inline RunState from_checkpoint(const Checkpoint& ck) {
  RunState st;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ck.get_bytes("meta"));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint metadata: ") + e.what());
  }
  st.stage = stage_from_string(meta.at("stage").get<std::string>());
  st.iteration = meta.at("iteration").get<std::int64_t>();
  st.skipped_nan = meta.at("skipped_nan").get<std::int64_t>();
  st.rng = Rng::deserialize(meta.at("rng").get<std::string>());
  const auto& jf = meta.at("field");
  FieldConfig fc;
  fc.levels = jf.at("levels");
  fc.features_per_level = jf.at("features_per_level");
  fc.table_size_log2 = jf.at("table_size_log2");
  fc.base_resolution = jf.at("base_resolution");
  fc.max_resolution = jf.at("max_resolution");
  fc.table_init = jf.at("table_init");
  fc.density_bias_init = jf.at("density_bias_init");
  const auto& jp = meta.at("prompts");
  st.prompts.base_prompt = jp.at("base");
  if (!jp.at("instruction").is_null()) st.prompts.edit_instruction = jp.at("instruction").get<std::string>();
  st.prompts.suffix_front = jp.at("suffix_front");
  st.prompts.suffix_side = jp.at("suffix_side");
  st.prompts.back_token = jp.at("back_token");

  auto load_into = [&](std::span<float> dst, const std::string& name) {
    const auto v = ck.get_f32(name);
    if (v.size() != dst.size()) throw ShapeError("checkpoint blob '" + name + "' has the wrong size");
    std::copy(v.begin(), v.end(), dst.begin());
  };
  st.field = FieldParams(fc);
  load_into(st.field.data(), "field.params");
  st.field_opt = AdamState(st.field.size());
  st.field_opt.step = meta.at("field_adam_step");
  load_into(st.field_opt.m, "field.adam.m");
  load_into(st.field_opt.v, "field.adam.v");
  if (meta.contains("grid")) {
    const auto& jg = meta.at("grid");
    TetGrid g(jg.at("resolution").get<int>(), jg.at("half_extent").get<double>());
    load_into(g.s, "grid.s");
    load_into(g.dv, "grid.dv");
    st.s_opt = AdamState(g.s.size());
    st.dv_opt = AdamState(g.dv.size());
    st.s_opt.step = jg.at("s_adam_step");
    st.dv_opt.step = jg.at("dv_adam_step");
    load_into(st.s_opt.m, "grid.s.adam.m");
    load_into(st.s_opt.v, "grid.s.adam.v");
    load_into(st.dv_opt.m, "grid.dv.adam.m");
    load_into(st.dv_opt.v, "grid.dv.adam.v");
    st.grid = std::move(g);
  }
  if (ck.has("reference.params")) {
    FieldParams ref(fc);
    load_into(ref.data(), "reference.params");
    st.reference = std::move(ref);
  }
  std::istringstream log(ck.get_bytes("metrics.jsonl"));
  std::string line;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    MetricRecord r;
    r.stage = stage_from_string(j.at("stage"));
    r.iteration = j.at("iteration");
    r.grad_norm = j.at("grad_norm");
    r.latency_ms = j.value("latency_ms", 0.0);
    r.skipped_nan = j.at("skipped_nan");
    r.timesteps = j.at("timesteps").get<std::vector<int>>();
    st.metrics.push_back(std::move(r));
  }
  return st;
}

inline void save_checkpoint(const RunState& st, const HeadMesh& prior_head, const std::filesystem::path& path) {
  to_checkpoint(st, prior_head).save(path);
}

inline RunState load_checkpoint(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

// ---- stages -----------------------------------------------------------------

inline RunState start_coarse(const PipelineConfig& cfg) {
  cfg.validate();
  cfg.prompts.validate(false);
  RunState st;
  st.stage = Stage::Coarse;
  st.prompts = cfg.prompts;
  st.rng = Rng(cfg.coarse.seed);
  st.field = FieldParams(cfg.field);
  st.field.initialize(st.rng);
  st.field_opt = AdamState(st.field.size());
  return st;
}

namespace detail {

inline void finish_iteration(RunState& st, const RunContext& ctx, MetricRecord rec) {
  const auto& sc = ctx.config->stage(st.stage);
  ++st.iteration;
  rec.iteration = st.iteration;
  if (!ctx.out_dir.empty()) {
    std::filesystem::create_directories(ctx.out_dir);
    std::ofstream log(ctx.out_dir / "metrics.jsonl", std::ios::app);
    log << rec.to_json().dump() << '\n';
    if (sc.checkpoint_every > 0 && st.iteration % sc.checkpoint_every == 0)
      save_checkpoint(st, ctx.prior->head(), checkpoint_path(ctx.out_dir, st.stage));
  }
  st.metrics.push_back(rec);
  if (ctx.on_iteration) ctx.on_iteration(st.metrics.back());
}

inline void require_context(const RunContext& ctx) {
  if (!ctx.prior || !ctx.config || !ctx.provider) throw ValidationError("run context is incomplete");
}

}  // namespace detail

/// One coarse iteration: batch of views rendered, scored, backpropagated, one
/// Adam step on the field.
inline void coarse_iteration(RunState& st, const RunContext& ctx, const DiffusionSchedule& schedule) {
  const auto& cfg = *ctx.config;
  const auto& sc = cfg.coarse;
  GuidanceConfig gc = cfg.guidance;
  gc.mode = GuidanceMode::Generate;
  std::vector<float> grad(st.field.size(), 0.0f);
  MetricRecord rec;
  rec.stage = Stage::Coarse;
  int used = 0;
  for (int b = 0; b < sc.batch_size; ++b) {
    const CameraPose pose = sample_pose(cfg.camera, st.rng);
    const Vec3 bg = detail::draw_background(cfg.background, st.rng);
    const std::uint64_t render_seed = st.rng.next_u64();
    const auto out = render_image(st.field, *ctx.prior, pose, sc.resolution, sc.resolution, cfg.render, bg, render_seed);
    const Image lm = render_landmark_map(ctx.prior->head(), ctx.prior->bvh(), pose, cfg.landmark, sc.resolution,
                                         sc.resolution);
    SdsContext sctx{&st.prompts, view_bucket(pose.azimuth), &lm, nullptr, pose};
    SdsResult r;
    try {
      r = sds_step(*ctx.provider, out.rgb, sctx, gc, schedule, st.rng);
    } catch (const PoisonedGradientError&) {
      ++rec.skipped_nan;
      continue;
    }
    rec.latency_ms += r.latency_ms;
    rec.timesteps.push_back(r.timestep);
    detail::scale(r.gradient, 1.0 / sc.batch_size);
    render_backward(st.field, *ctx.prior, pose, sc.resolution, sc.resolution, cfg.render, bg, render_seed, r.gradient,
                    grad);
    ++used;
  }
  rec.grad_norm = std::sqrt(detail::squared_norm(grad));
  if (used > 0) {
    try {
      adam_step(st.field.data(), grad, st.field_opt, sc.adam(detail::lr_at(sc, sc.lr_field, st.iteration)));
    } catch (const PoisonedGradientError&) {
      rec.skipped_nan += used;
    }
  }
  st.skipped_nan += rec.skipped_nan;
  detail::finish_iteration(st, ctx, std::move(rec));
}

/// Continues a coarse run until `st.iteration == until`.
inline void run_coarse(RunState& st, const RunContext& ctx, std::int64_t until) {
  detail::require_context(ctx);
  if (st.stage != Stage::Coarse) throw ValidationError("run_coarse needs a coarse run state");
  const auto schedule = ctx.config->schedule();
  while (st.iteration < until) coarse_iteration(st, ctx, schedule);
  if (!ctx.out_dir.empty()) save_checkpoint(st, ctx.prior->head(), detail::checkpoint_path(ctx.out_dir, Stage::Coarse));
}

inline RunState run_coarse(const RunContext& ctx) {
  detail::require_context(ctx);
  RunState st = start_coarse(*ctx.config);
  run_coarse(st, ctx, ctx.config->coarse.iterations);
  return st;
}

/// Fine or edit state seeded from a finished coarse state: tet grid from the
/// coarse density, color field copied from the coarse MLP.
inline RunState start_refinement(const RunState& coarse, const PriorField& prior, const PipelineConfig& cfg,
                                 Stage stage) {
  if (coarse.stage != Stage::Coarse) throw ValidationError("refinement must start from a coarse checkpoint");
  if (stage == Stage::Coarse) throw ValidationError("start_refinement: stage must be fine or edit");
  cfg.validate();
  RunState st;
  st.stage = stage;
  st.prompts = coarse.prompts;
  if (stage == Stage::Edit) {
    if (cfg.prompts.edit_instruction) st.prompts.edit_instruction = cfg.prompts.edit_instruction;
    st.prompts.validate(true);
    st.reference = coarse.field;
  }
  st.rng = Rng(cfg.stage(stage).seed);
  st.field = coarse.field;
  st.field_opt = AdamState(st.field.size());
  st.grid = init_grid(cfg.grid_resolution, coarse.field, prior, cfg.grid_iso);
  st.s_opt = AdamState(st.grid->s.size());
  st.dv_opt = AdamState(st.grid->dv.size());
  return st;
}

/// One fine/edit iteration: extract, rasterize each view, score, and step the
/// color field, s, and dv.
inline void refine_iteration(RunState& st, const RunContext& ctx, const DiffusionSchedule& schedule,
                             ReferenceRenderer* refs) {
  const auto& cfg = *ctx.config;
  const auto& sc = cfg.stage(st.stage);
  const bool edit = st.stage == Stage::Edit;
  GuidanceConfig gc = cfg.guidance;
  gc.mode = edit ? GuidanceMode::Edit : GuidanceMode::Generate;
  TetGrid& grid = *st.grid;
  MetricRecord rec;
  rec.stage = st.stage;
  const MarchResult march = marching_tets(grid);
  if (march.mesh.empty()) throw ValidationError("tet grid has no surface (all s_i share one sign)");
  std::vector<float> grad_color(st.field.size(), 0.0f), grad_s(grid.s.size(), 0.0f), grad_dv(grid.dv.size(), 0.0f);
  std::vector<Vec3> vgrad(march.mesh.vertices.size());
  int used = 0;
  for (int b = 0; b < sc.batch_size; ++b) {
    const CameraPose pose = sample_pose(cfg.camera, st.rng);
    const auto raster = rasterize(march.mesh, st.field, pose, sc.resolution, sc.resolution);
    const Image lm = render_landmark_map(ctx.prior->head(), ctx.prior->bvh(), pose, cfg.landmark, sc.resolution,
                                         sc.resolution);
    const Image* ref = edit ? &refs->render(pose, sc.resolution, sc.resolution) : nullptr;
    SdsContext sctx{&st.prompts, view_bucket(pose.azimuth), &lm, ref, pose};
    SdsResult r;
    try {
      r = sds_step(*ctx.provider, raster.rgb, sctx, gc, schedule, st.rng);
    } catch (const PoisonedGradientError&) {
      ++rec.skipped_nan;
      continue;
    }
    rec.latency_ms += r.latency_ms;
    rec.timesteps.push_back(r.timestep);
    detail::scale(r.gradient, 1.0 / sc.batch_size);
    const auto vg = rasterize_backward(march.mesh, raster, st.field, pose, r.gradient, grad_color);
    for (std::size_t i = 0; i < vg.size(); ++i) vgrad[i] += vg[i];
    ++used;
  }
  marching_tets_backward(grid, march, vgrad, grad_s, grad_dv);
  rec.grad_norm = std::sqrt(detail::squared_norm(grad_color) + detail::squared_norm(grad_s) +
                            detail::squared_norm(grad_dv));
  if (used > 0) {
    try {
      for (auto* g : {&grad_color, &grad_s, &grad_dv})
        for (float x : *g)
          if (!std::isfinite(x)) throw PoisonedGradientError("non-finite refinement gradient");
      adam_step(st.field.data(), grad_color, st.field_opt, sc.adam(detail::lr_at(sc, sc.lr_field, st.iteration)));
      const double lr_geo = detail::lr_at(sc, sc.lr_geometry, st.iteration);
      adam_step(grid.s, grad_s, st.s_opt, sc.adam(lr_geo));
      adam_step(grid.dv, grad_dv, st.dv_opt, sc.adam(lr_geo));
      grid.clamp_offsets();
    } catch (const PoisonedGradientError&) {
      rec.skipped_nan += used;
    }
  }
  st.skipped_nan += rec.skipped_nan;
  detail::finish_iteration(st, ctx, std::move(rec));
}

/// Continues a fine or edit run until `st.iteration == until`; writes the
/// final checkpoint and mesh when an output directory is set.
inline void run_refinement(RunState& st, const RunContext& ctx, std::int64_t until) {
  detail::require_context(ctx);
  if (st.stage == Stage::Coarse || !st.grid) throw ValidationError("run_refinement needs a fine or edit run state");
  if (st.stage == Stage::Edit && !st.reference) throw ValidationError("edit state lacks the frozen coarse field");
  const auto schedule = ctx.config->schedule();
  std::optional<ReferenceRenderer> refs;
  if (st.stage == Stage::Edit) refs.emplace(*st.reference, *ctx.prior, ctx.config->render);
  while (st.iteration < until) refine_iteration(st, ctx, schedule, refs ? &*refs : nullptr);
  if (!ctx.out_dir.empty()) {
    save_checkpoint(st, ctx.prior->head(), detail::checkpoint_path(ctx.out_dir, st.stage));
    auto march = marching_tets(*st.grid);
    colorize(march.mesh, st.field);
    export_obj(march.mesh, ctx.out_dir / (std::string(to_string(st.stage)) + ".obj"));
  }
}

inline RunState run_fine(const RunState& coarse, const RunContext& ctx) {
  detail::require_context(ctx);
  RunState st = start_refinement(coarse, *ctx.prior, *ctx.config, Stage::Fine);
  run_refinement(st, ctx, ctx.config->fine.iterations);
  return st;
}

inline RunState run_edit(const RunState& coarse, const RunContext& ctx) {
  detail::require_context(ctx);
  RunState st = start_refinement(coarse, *ctx.prior, *ctx.config, Stage::Edit);
  run_refinement(st, ctx, ctx.config->edit.iterations);
  return st;
}

// ---- outputs ----------------------------------------------------------------

/// Surface of a run: the tet grid for fine/edit, or a grid initialized from
/// the coarse density otherwise. Vertex colors come from the color field.
inline TriMesh extract_mesh(const RunState& st, const PriorField& prior, const PipelineConfig& cfg) {
  MarchResult march = st.grid ? marching_tets(*st.grid)
                              : marching_tets(init_grid(cfg.grid_resolution, st.field, prior, cfg.grid_iso));
  colorize(march.mesh, st.field);
  return std::move(march.mesh);
}

/// `frames` views equally spaced in azimuth at fixed polar angle and the
/// midpoint radius and fov.
inline std::vector<Image> render_turntable(const RunState& st, const PriorField& prior, const PipelineConfig& cfg,
                                           int frames, int resolution, double polar_theta = 90.0) {
  if (frames < 1) throw InvalidRangeError("turntable needs at least one frame");
  std::vector<Image> out;
  std::optional<MarchResult> march;
  if (st.grid) march = marching_tets(*st.grid);
  RenderSettings rs = cfg.render;
  rs.jitter = false;
  for (int i = 0; i < frames; ++i) {
    CameraPose pose = snapshot_pose(cfg);
    pose.azimuth = 360.0 * i / frames;
    pose.polar_theta = polar_theta;
    if (march)
      out.push_back(rasterize(march->mesh, st.field, pose, resolution, resolution).rgb);
    else
      out.push_back(render_image(st.field, prior, pose, resolution, resolution, rs, Vec3{1, 1, 1}, 0).rgb);
  }
  return out;
}

/// Mock target function: the textured stand-in head rasterized at the query's
/// pose; background pixels echo the request image so they carry no gradient.
inline MockPredictor::TargetFn standin_target(const HeadMesh& head) {
  return [mesh = head.mesh](const NoiseQuery& q) {
    const Image& img = *q.clean;
    const CameraPose pose = q.pose.value_or(CameraPose{});
    auto r = rasterize(mesh, standin::albedo, pose, img.width, img.height);
    for (int row = 0; row < img.height; ++row)
      for (int col = 0; col < img.width; ++col)
        if (r.mask.at(row, col) == 0.0f)
          for (int k = 0; k < 3; ++k) r.rgb.at(row, col, k) = img.at(row, col, k);
    return r.rgb;
  };
}

}  // namespace headforge
