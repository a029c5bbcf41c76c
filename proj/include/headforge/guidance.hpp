// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>

#include "headforge/camera.hpp"
#include "headforge/error.hpp"
#include "headforge/image.hpp"
#include "headforge/rng.hpp"
#include "headforge/schedule.hpp"

namespace headforge {

struct PromptSet {
  std::string base_prompt;
  std::optional<std::string> edit_instruction;
  std::string suffix_front = "front view";
  std::string suffix_side = "side view";
  std::string back_token = "<back-view>";  // opaque learned token, passed through verbatim

  void validate(bool edit_mode) const {
    if (base_prompt.empty()) throw ValidationError("base prompt must be non-empty");
    if (edit_mode && (!edit_instruction || edit_instruction->empty()))
      throw ValidationError("edit mode requires an edit instruction");
  }
};

/// "{base}, {suffix}" with the suffix chosen by view bucket; an empty suffix
/// leaves the base unchanged. The edit instruction never enters this text;
/// `use_instruction` only asserts that one is available for the request.
inline std::string assemble_prompt(const PromptSet& prompts, ViewBucket bucket, bool use_instruction = false) {
  prompts.validate(use_instruction);
  const std::string& suffix = bucket == ViewBucket::Front  ? prompts.suffix_front
                              : bucket == ViewBucket::Side ? prompts.suffix_side
                                                           : prompts.back_token;
  if (suffix.empty()) return prompts.base_prompt;
  return prompts.base_prompt + ", " + suffix;
}

enum class GuidanceMode { Generate, Edit };

inline const char* to_string(GuidanceMode m) { return m == GuidanceMode::Edit ? "edit" : "generate"; }

struct GuidanceConfig {
  double cfg_scale = 100.0;
  double edit_scale = 0.6;  // omega_e
  std::pair<double, double> t_range{0.02, 0.98};
  GuidanceMode mode = GuidanceMode::Generate;

  void validate() const {
    if (!(cfg_scale >= 1.0)) throw InvalidRangeError("cfg_scale must be >= 1");
    if (!(edit_scale >= 0.0 && edit_scale <= 1.0)) throw InvalidRangeError("edit_scale must be in [0, 1]");
    if (!(0.0 <= t_range.first && t_range.first < t_range.second && t_range.second <= 1.0))
      throw InvalidRangeError("t_range must satisfy 0 <= lo < hi <= 1");
  }
};

/// One score query. Empty landmark/reference images mean "absent".
struct ScoreRequest {
  GuidanceMode mode = GuidanceMode::Generate;
  Image image;  // H x W x 3 in [0,1]
  std::string prompt;
  std::optional<std::string> instruction;
  bool unconditional = false;
  int timestep = 0;
  std::uint64_t noise_seed = 0;
  double cfg_scale = 100.0;
  double edit_scale = 0.6;
  Image landmark_map;
  Image reference_image;
  std::optional<CameraPose> pose;  // local providers only; not part of the wire format

  void validate() const {
    if (image.channels != 3 || image.height < 1 || image.width < 1)
      throw ShapeError("score request image must be H x W x 3");
    if (!all_finite(image.data)) throw ValidationError("score request image is not finite");
    for (const Image* cond : {&landmark_map, &reference_image})
      if (!cond->data.empty() && (cond->height != image.height || cond->width != image.width))
        throw ShapeError("conditioning image resolution must match the render");
  }
};

struct ImageGradient {
  Image gradient;  // d(loss)/d(image), same shape as the request image
  double w_t = 0;
};

/// Seeded standard-normal noise with the given shape.
inline Image noise_image(int height, int width, int channels, std::uint64_t seed) {
  Image eps(height, width, channels);
  Rng rng(seed);
  for (auto& v : eps.data) v = static_cast<float>(rng.normal());
  return eps;
}

inline Image cfg_combine(const Image& eps_uncond, const Image& eps_cond, double scale) {
  require_same_shape(eps_uncond, eps_cond, "cfg_combine");
  Image out(eps_cond.height, eps_cond.width, eps_cond.channels);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = static_cast<float>(eps_uncond.data[i] + scale * (double(eps_cond.data[i]) - eps_uncond.data[i]));
  return out;
}

inline Image iesd_blend(const Image& eps_edit, const Image& eps_orig, double edit_scale) {
  require_same_shape(eps_edit, eps_orig, "iesd_blend");
  if (!(edit_scale >= 0.0 && edit_scale <= 1.0)) throw InvalidRangeError("edit_scale must be in [0, 1]");
  if (edit_scale == 1.0) return eps_edit;
  if (edit_scale == 0.0) return eps_orig;
  Image out(eps_edit.height, eps_edit.width, eps_edit.channels);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = static_cast<float>(edit_scale * eps_edit.data[i] + (1.0 - edit_scale) * eps_orig.data[i]);
  return out;
}

namespace detail {

/// (z_t - sqrt(ab) z*) / sqrt(1 - ab) with z_t = sqrt(ab) z + sqrt(1 - ab) eps,
/// evaluated as eps + sqrt(ab / (1 - ab)) (z - z*) so that z = z* gives eps
/// bit for bit.
inline Image analytic_eps(const Image& z, const Image& eps, const Image& target, double alpha_bar) {
  require_same_shape(target, z, "mock target");
  require_same_shape(eps, z, "mock noise");
  if (!(alpha_bar < 1.0)) throw InvalidRangeError("mock score: alpha_bar = 1 has no noise to predict");
  const double k = std::sqrt(alpha_bar) / std::sqrt(1.0 - alpha_bar);
  Image out(z.height, z.width, z.channels);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = static_cast<float>(eps.data[i] + k * (double(z.data[i]) - target.data[i]));
  return out;
}

}  // namespace detail

/// Analytic denoiser that "knows" the clean image z*: noises the request image
/// with its seeded eps and predicts the noise that maps z_t back onto z*.
inline Image mock_score(const Image& target, const ScoreRequest& request, const DiffusionSchedule& schedule) {
  const Image& z = request.image;
  const Image eps = noise_image(z.height, z.width, z.channels, request.noise_seed);
  return detail::analytic_eps(z, eps, target, schedule.alpha_bar(request.timestep));
}

/// Input to a noise predictor: the noised image plus its conditioning.
struct NoiseQuery {
  const Image* noised = nullptr;  // z_t
  const Image* clean = nullptr;   // z
  const Image* noise = nullptr;   // eps used to form z_t
  int timestep = 0;
  std::uint64_t noise_seed = 0;
  std::string prompt;                      // empty for the unconditional branch
  std::optional<std::string> instruction;  // edit branch only
  const Image* landmark_map = nullptr;
  const Image* reference_image = nullptr;
  std::optional<CameraPose> pose;
  bool unconditional() const { return prompt.empty() && !instruction; }
};

class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Image predict(const NoiseQuery& q) = 0;
};

/// Mock denoiser over a target image chosen per query. Branches fall back to
/// `target` when no dedicated target is set, so by default CFG is a no-op.
class MockPredictor : public NoisePredictor {
 public:
  using TargetFn = std::function<Image(const NoiseQuery&)>;

  MockPredictor(DiffusionSchedule schedule, TargetFn target) : schedule_(std::move(schedule)), target_(std::move(target)) {}
  MockPredictor(DiffusionSchedule schedule, Image target)
      : MockPredictor(std::move(schedule), [t = std::move(target)](const NoiseQuery&) { return t; }) {}

  void set_unconditional_target(TargetFn fn) { uncond_ = std::move(fn); }
  void set_unconditional_target(Image img) { uncond_ = [t = std::move(img)](const NoiseQuery&) { return t; }; }
  void set_edit_target(TargetFn fn) { edit_ = std::move(fn); }
  void set_edit_target(Image img) { edit_ = [t = std::move(img)](const NoiseQuery&) { return t; }; }

  Image target_for(const NoiseQuery& q) const {
    if (q.unconditional() && uncond_) return uncond_(q);
    if (q.instruction && edit_) return edit_(q);
    return target_(q);
  }

  Image predict(const NoiseQuery& q) override {
    if (!q.clean || !q.noise) throw ValidationError("mock predictor needs the clean image and its noise");
    return detail::analytic_eps(*q.clean, *q.noise, target_for(q), schedule_.alpha_bar(q.timestep));
  }

  const DiffusionSchedule& schedule() const { return schedule_; }

 private:
  DiffusionSchedule schedule_;
  TargetFn target_, uncond_, edit_;
};

/// Anything that turns a request into an image-space SDS gradient.
class ScoreProvider {
 public:
  virtual ~ScoreProvider() = default;
  virtual ImageGradient score(const ScoreRequest& request) = 0;
};

/// Runs the full score locally around a NoisePredictor, with identity encoder:
/// one shared unconditional call, CFG per conditioned branch, IESD blend in
/// edit mode, then G = w(t) (eps_hat - eps).
class LocalScoreProvider : public ScoreProvider {
 public:
  LocalScoreProvider(NoisePredictor& predictor, DiffusionSchedule schedule)
      : predictor_(&predictor), schedule_(std::move(schedule)) {}

  ImageGradient score(const ScoreRequest& r) override {
    r.validate();
    const Image& z = r.image;
    const Image eps = noise_image(z.height, z.width, z.channels, r.noise_seed);
    const Image zt = schedule_.add_noise(z, eps, r.timestep);
    NoiseQuery q;
    q.noised = &zt;
    q.clean = &z;
    q.noise = &eps;
    q.timestep = r.timestep;
    q.noise_seed = r.noise_seed;
    q.landmark_map = r.landmark_map.data.empty() ? nullptr : &r.landmark_map;
    q.reference_image = r.reference_image.data.empty() ? nullptr : &r.reference_image;
    q.pose = r.pose;

    const Image eps_u = predictor_->predict(q);
    auto conditioned = [&](std::optional<std::string> instruction) {
      NoiseQuery c = q;
      c.prompt = r.prompt;
      c.instruction = std::move(instruction);
      Image e = predictor_->predict(c);
      require_same_shape(e, z, "noise prediction");
      return cfg_combine(eps_u, e, r.cfg_scale);
    };
    Image eps_hat;
    if (r.mode == GuidanceMode::Edit) {
      if (!r.instruction) throw ValidationError("edit-mode request without instruction");
      eps_hat = iesd_blend(conditioned(r.instruction), conditioned(std::nullopt), r.edit_scale);
    } else {
      eps_hat = conditioned(std::nullopt);
    }
    ImageGradient g;
    g.w_t = schedule_.sds_weight(r.timestep);
    g.gradient = Image(z.height, z.width, z.channels);
    for (std::size_t i = 0; i < z.size(); ++i)
      g.gradient.data[i] = static_cast<float>(g.w_t * (double(eps_hat.data[i]) - eps.data[i]));
    return g;
  }

 private:
  NoisePredictor* predictor_;
  DiffusionSchedule schedule_;
};

/// Conditioning for one SDS step.
struct SdsContext {
  const PromptSet* prompts = nullptr;
  ViewBucket bucket = ViewBucket::Front;
  const Image* landmark_map = nullptr;
  const Image* reference_image = nullptr;
  std::optional<CameraPose> pose;
};

struct SdsResult {
  Image gradient;
  int timestep = 0;
  std::uint64_t noise_seed = 0;
  double w_t = 0;
  double latency_ms = 0;
};

/// Draws t and the noise seed from `rng` (in that order), queries the
/// provider, and checks the returned gradient.
inline SdsResult sds_step(ScoreProvider& provider, const Image& render, const SdsContext& ctx,
                          const GuidanceConfig& config, const DiffusionSchedule& schedule, Rng& rng) {
  config.validate();
  if (!ctx.prompts) throw ValidationError("sds_step: prompts are required");
  const bool edit = config.mode == GuidanceMode::Edit;
  ScoreRequest req;
  req.mode = config.mode;
  req.image = render;
  req.prompt = assemble_prompt(*ctx.prompts, ctx.bucket, edit);
  if (edit) req.instruction = ctx.prompts->edit_instruction;
  req.timestep = schedule.sample_timestep(config.t_range, rng);
  req.noise_seed = rng.next_u64();
  req.cfg_scale = config.cfg_scale;
  req.edit_scale = config.edit_scale;
  if (ctx.landmark_map) req.landmark_map = *ctx.landmark_map;
  if (ctx.reference_image) req.reference_image = *ctx.reference_image;
  req.pose = ctx.pose;

  const auto t0 = std::chrono::steady_clock::now();
  ImageGradient g = provider.score(req);
  const auto t1 = std::chrono::steady_clock::now();
  if (!g.gradient.same_shape(render)) throw ShapeError("provider gradient shape does not match the render");
  if (!all_finite(g.gradient.data)) throw PoisonedGradientError("provider returned a non-finite gradient");
  SdsResult out;
  out.gradient = std::move(g.gradient);
  out.timestep = req.timestep;
  out.noise_seed = req.noise_seed;
  out.w_t = g.w_t;
  out.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return out;
}

}  // namespace headforge
