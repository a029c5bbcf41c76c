// SPDX-License-Identifier: Apache-2.0
// headforge command-line front end.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "headforge/headforge.hpp"

namespace fs = std::filesystem;
using namespace headforge;

namespace {

struct Common {
  std::string config_path;
  std::string out_dir;
  int iterations = 0;  // 0: from config
  int progress_every = 50;
};

PipelineConfig load_config(const std::string& path) {
  PipelineConfig cfg;
  if (!path.empty()) apply_config(cfg, ConfigTable::load(path));
  return cfg;
}

/// Owns whichever provider the config selects.
struct ProviderHandle {
  std::unique_ptr<MockPredictor> predictor;
  std::unique_ptr<ScoreProvider> provider;
};

ProviderHandle make_provider(const PipelineConfig& cfg, const HeadMesh& head) {
  ProviderHandle h;
  if (cfg.provider == "remote") {
    auto remote = std::make_unique<RemoteScoreProvider>(resolve_endpoint(cfg.endpoint));
    remote->health();
    h.provider = std::move(remote);
  } else {
    h.predictor = std::make_unique<MockPredictor>(cfg.schedule(), standin_target(head));
    h.provider = std::make_unique<LocalScoreProvider>(*h.predictor, cfg.schedule());
  }
  return h;
}

std::function<void(const MetricRecord&)> progress(int every) {
  return [every](const MetricRecord& r) {
    if (every > 0 && r.iteration % every == 0)
      std::fprintf(stderr, "[%s] iter %lld  |grad| %.4g  skipped %lld\n", to_string(r.stage),
                   static_cast<long long>(r.iteration), r.grad_norm, static_cast<long long>(r.skipped_nan));
  };
}

void write_snapshot(const RunState& st, const PriorField& prior, const PipelineConfig& cfg, const fs::path& dir) {
  const auto frames = render_turntable(st, prior, cfg, 1, 128);
  write_png(dir / (std::string(to_string(st.stage)) + "_front.png"), frames.front());
}

int cmd_generate(const Common& c, const std::string& prompt, const std::string& prior_path,
                 const std::string& landmarks, std::optional<std::uint64_t> seed) {
  PipelineConfig cfg = load_config(c.config_path);
  cfg.prompts.base_prompt = prompt;
  if (c.iterations > 0) cfg.coarse.iterations = c.iterations;
  if (seed) cfg.coarse.seed = *seed;
  cfg.validate();
  HeadMesh head = prior_path.empty()
                      ? make_standin_head(3)
                      : load_mesh(prior_path, landmarks.empty() ? std::nullopt : std::optional<fs::path>(landmarks));
  const PriorField prior = make_prior(head, cfg);
  auto handle = make_provider(cfg, head);
  fs::create_directories(c.out_dir);
  RunContext ctx{&prior, &cfg, handle.provider.get(), c.out_dir, progress(c.progress_every)};
  const RunState st = run_coarse(ctx);
  write_snapshot(st, prior, cfg, c.out_dir);
  std::printf("coarse run finished: %lld iterations, checkpoint %s\n", static_cast<long long>(st.iteration),
              (fs::path(c.out_dir) / "coarse.hsck").c_str());
  return 0;
}

int cmd_refine(const Common& c, const std::string& from, Stage stage, const std::string& instruction,
               std::optional<double> edit_scale) {
  PipelineConfig cfg = load_config(c.config_path);
  if (!instruction.empty()) cfg.prompts.edit_instruction = instruction;
  if (edit_scale) cfg.guidance.edit_scale = *edit_scale;
  if (c.iterations > 0) cfg.stage(stage).iterations = c.iterations;
  const auto ck = Checkpoint::load(from);
  const RunState coarse = from_checkpoint(ck);
  HeadMesh head = prior_from_checkpoint(ck);
  cfg.field = coarse.field.config();
  cfg.prompts.base_prompt = coarse.prompts.base_prompt;
  cfg.validate();
  const PriorField prior = make_prior(head, cfg);
  auto handle = make_provider(cfg, head);
  fs::create_directories(c.out_dir);
  RunContext ctx{&prior, &cfg, handle.provider.get(), c.out_dir, progress(c.progress_every)};
  const RunState st = stage == Stage::Edit ? run_edit(coarse, ctx) : run_fine(coarse, ctx);
  write_snapshot(st, prior, cfg, c.out_dir);
  std::printf("%s run finished: %lld iterations, mesh %s\n", to_string(stage), static_cast<long long>(st.iteration),
              (fs::path(c.out_dir) / (std::string(to_string(stage)) + ".obj")).c_str());
  return 0;
}

int cmd_export(const std::string& config_path, const std::string& from, const std::string& out) {
  PipelineConfig cfg = load_config(config_path);
  const auto ck = Checkpoint::load(from);
  const RunState st = from_checkpoint(ck);
  cfg.field = st.field.config();
  const PriorField prior = make_prior(prior_from_checkpoint(ck), cfg);
  const TriMesh mesh = extract_mesh(st, prior, cfg);
  export_obj(mesh, out);
  std::printf("wrote %s (%zu vertices, %zu faces)\n", out.c_str(), mesh.vertices.size(), mesh.faces.size());
  return 0;
}

int cmd_turntable(const std::string& config_path, const std::string& from, const std::string& out, int frames,
                  int resolution, double theta) {
  PipelineConfig cfg = load_config(config_path);
  const auto ck = Checkpoint::load(from);
  const RunState st = from_checkpoint(ck);
  cfg.field = st.field.config();
  const PriorField prior = make_prior(prior_from_checkpoint(ck), cfg);
  fs::create_directories(out);
  const auto images = render_turntable(st, prior, cfg, frames, resolution, theta);
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.png", i);
    write_png(fs::path(out) / name, images[i]);
  }
  std::printf("wrote %zu frames to %s\n", images.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"headforge: score-distillation head avatar optimizer"};
  app.require_subcommand(1);

  Common common;
  std::string prompt, prior_path, landmarks, from, instruction, out;
  std::optional<std::uint64_t> seed;
  std::optional<double> edit_scale;
  int frames = 120, resolution = 256;
  double theta = 90.0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "TOML config file")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out_dir, "output directory")->required();
    sub->add_option("--iterations", common.iterations, "override the stage iteration count");
    sub->add_option("--progress-every", common.progress_every, "progress line interval (0: silent)");
  };

  auto* gen = app.add_subcommand("generate", "coarse stage from a text prompt");
  gen->add_option("--prompt", prompt, "text description")->required();
  gen->add_option("--prior", prior_path, "watertight head mesh (OBJ); default: built-in stand-in")
      ->check(CLI::ExistingFile);
  gen->add_option("--landmarks", landmarks, "landmark sidecar (default: <prior>.landmarks)");
  gen->add_option("--seed", seed, "random seed");
  add_common(gen);

  auto* refine = app.add_subcommand("refine", "fine stage on the extracted tet mesh");
  refine->add_option("--from", from, "coarse checkpoint")->required()->check(CLI::ExistingFile);
  add_common(refine);

  auto* edit = app.add_subcommand("edit", "instruction-driven edit of a coarse result");
  edit->add_option("--from", from, "coarse checkpoint")->required()->check(CLI::ExistingFile);
  edit->add_option("--instruction", instruction, "edit instruction")->required();
  edit->add_option("--edit-scale", edit_scale, "weight of the instruction branch in [0,1]");
  add_common(edit);

  auto* exp = app.add_subcommand("export-mesh", "write the current surface as OBJ");
  exp->add_option("--from", from, "checkpoint")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", out, "output OBJ path")->required();
  exp->add_option("--config", common.config_path, "TOML config file")->check(CLI::ExistingFile);

  auto* turn = app.add_subcommand("turntable", "render a 360 degree PNG sequence");
  turn->add_option("--from", from, "checkpoint")->required()->check(CLI::ExistingFile);
  turn->add_option("--out", out, "output directory")->required();
  turn->add_option("--frames", frames, "number of frames")->check(CLI::PositiveNumber);
  turn->add_option("--resolution", resolution, "square frame size")->check(CLI::PositiveNumber);
  turn->add_option("--theta", theta, "polar angle in degrees");
  turn->add_option("--config", common.config_path, "TOML config file")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(common, prompt, prior_path, landmarks, seed);
    if (*refine) return cmd_refine(common, from, Stage::Fine, "", std::nullopt);
    if (*edit) return cmd_refine(common, from, Stage::Edit, instruction, edit_scale);
    if (*exp) return cmd_export(common.config_path, from, out);
    if (*turn) return cmd_turntable(common.config_path, from, out, frames, resolution, theta);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
