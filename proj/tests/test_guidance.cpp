// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "headforge/guidance.hpp"
#include "headforge/optim.hpp"
#include "oracles.hpp"

using namespace headforge;

namespace {

Image filled(int h, int w, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Image img(h, w, 3);
  Rng rng(seed);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform(lo, hi));
  return img;
}

// Counts predictor calls by branch.
class CountingPredictor : public NoisePredictor {
 public:
  explicit CountingPredictor(MockPredictor& inner) : inner_(&inner) {}
  Image predict(const NoiseQuery& q) override {
    if (q.unconditional()) ++uncond;
    else if (q.instruction) ++edit;
    else ++cond;
    last_prompt = q.prompt;
    return inner_->predict(q);
  }
  int uncond = 0, cond = 0, edit = 0;
  std::string last_prompt;

 private:
  MockPredictor* inner_;
};

class ConstantProvider : public ScoreProvider {
 public:
  explicit ConstantProvider(Image g) : g_(std::move(g)) {}
  ImageGradient score(const ScoreRequest&) override { return {g_, 1.0}; }

 private:
  Image g_;
};

ScoreRequest request_at(const Image& z, int t, std::uint64_t seed) {
  ScoreRequest r;
  r.image = z;
  r.prompt = "a bust of a man";
  r.timestep = t;
  r.noise_seed = seed;
  r.cfg_scale = 1.0;
  return r;
}

PromptSet prompts() {
  PromptSet p;
  p.base_prompt = "a DSLR portrait of an old man";
  return p;
}

}  // namespace

TEST(Prompts, AssemblyPerBucket) {
  const PromptSet p = prompts();
  EXPECT_EQ(assemble_prompt(p, ViewBucket::Front), "a DSLR portrait of an old man, front view");
  EXPECT_EQ(assemble_prompt(p, ViewBucket::Side), "a DSLR portrait of an old man, side view");
  EXPECT_EQ(assemble_prompt(p, ViewBucket::Back), "a DSLR portrait of an old man, <back-view>");
  PromptSet bare = p;
  bare.suffix_side = "";
  EXPECT_EQ(assemble_prompt(bare, ViewBucket::Side), "a DSLR portrait of an old man");
}

TEST(Prompts, Validation) {
  PromptSet p;
  EXPECT_THROW(assemble_prompt(p, ViewBucket::Front), ValidationError);
  p = prompts();
  EXPECT_THROW(assemble_prompt(p, ViewBucket::Front, true), ValidationError);
  p.edit_instruction = "make him smile";
  EXPECT_EQ(assemble_prompt(p, ViewBucket::Front, true), "a DSLR portrait of an old man, front view");
}

TEST(GuidanceConfig, Ranges) {
  GuidanceConfig c;
  EXPECT_NO_THROW(c.validate());
  c.cfg_scale = 0.5;
  EXPECT_THROW(c.validate(), InvalidRangeError);
  c = {};
  c.edit_scale = 1.2;
  EXPECT_THROW(c.validate(), InvalidRangeError);
  c = {};
  c.t_range = {0.5, 0.4};
  EXPECT_THROW(c.validate(), InvalidRangeError);
}

TEST(Noise, SeededAndStandardNormal) {
  const Image a = noise_image(64, 64, 3, 5), b = noise_image(64, 64, 3, 5), c = noise_image(64, 64, 3, 6);
  EXPECT_EQ(a.data, b.data);
  EXPECT_NE(a.data, c.data);
  double m = 0, v = 0;
  for (float x : a.data) m += x;
  m /= a.size();
  for (float x : a.data) v += (x - m) * (x - m);
  v /= a.size();
  EXPECT_NEAR(m, 0.0, 0.05);
  EXPECT_NEAR(v, 1.0, 0.05);
}

TEST(MockScore, FixedPointReturnsNoise) {
  const auto s = DiffusionSchedule::scaled_linear();
  const Image z = filled(4, 4, 1);
  const auto req = request_at(z, 300, 77);
  const Image eps_hat = mock_score(z, req, s);
  EXPECT_EQ(eps_hat.data, noise_image(4, 4, 3, 77).data);
}

TEST(MockScore, WorkedResidual) {
  const auto s = DiffusionSchedule::from_alpha_bar({0.25});
  Image z(1, 1, 3, 1.0f), target(1, 1, 3, 0.0f);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Image e = mock_score(target, request_at(z, 0, seed), s);
    const Image eps = noise_image(1, 1, 3, seed);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(e.data[k] - eps.data[k], oracle::kMockResidual, 1e-6);
  }
  EXPECT_THROW(mock_score(Image(2, 2, 3), request_at(z, 0, 1), s), ShapeError);
}

TEST(Cfg, Algebra) {
  Image u(1, 1, 3, 1.0f), c(1, 1, 3, 3.0f);
  EXPECT_EQ(cfg_combine(u, c, 1.0).data, c.data);
  EXPECT_EQ(cfg_combine(u, u, 100.0).data, u.data);
  EXPECT_NEAR(cfg_combine(u, c, 100.0).data[0], 201.0f, 1e-4);
  EXPECT_THROW(cfg_combine(u, Image(1, 2, 3), 2.0), ShapeError);
}

TEST(Iesd, EndpointsAreExact) {
  const Image a = filled(5, 5, 3, -2, 2), b = filled(5, 5, 4, -2, 2);
  EXPECT_EQ(iesd_blend(a, b, 1.0).data, a.data);
  EXPECT_EQ(iesd_blend(a, b, 0.0).data, b.data);
  EXPECT_EQ(iesd_blend(a, a, 0.6).data, a.data);
  EXPECT_THROW(iesd_blend(a, b, 1.5), InvalidRangeError);
  EXPECT_THROW(iesd_blend(a, b, -0.1), InvalidRangeError);
}

TEST(Iesd, WorkedBlend) {
  Image one(1, 1, 3, 1.0f), zero(1, 1, 3, 0.0f);
  EXPECT_EQ(iesd_blend(one, zero, 0.6).data[0], 0.6f);
}

TEST(Iesd, LinearityOnRepresentableInputs) {
  // Dyadic weights and values keep every intermediate exact, so linearity
  // must hold bit for bit.
  Rng rng(9);
  Image a(4, 4, 3), b(4, 4, 3), c(4, 4, 3), apc(4, 4, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.data[i] = float(rng.uniform_int(-1024, 1024)) / 1024.0f;
    b.data[i] = float(rng.uniform_int(-1024, 1024)) / 1024.0f;
    c.data[i] = float(rng.uniform_int(-1024, 1024)) / 1024.0f;
    apc.data[i] = a.data[i] + c.data[i];
  }
  for (double w : {0.25, 0.375, 0.5, 0.75}) {
    const Image ab = iesd_blend(a, b, w), ba = iesd_blend(b, a, w);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(ab.data[i] + ba.data[i], a.data[i] + b.data[i]);
    // additive in the first argument with the second at zero
    const Image zero(4, 4, 3, 0.0f);
    const Image l = iesd_blend(apc, zero, w), r1 = iesd_blend(a, zero, w), r2 = iesd_blend(c, zero, w);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(l.data[i], r1.data[i] + r2.data[i]);
  }
  // arbitrary weights and values agree to float rounding
  const Image x = filled(4, 4, 10, -3, 3), y = filled(4, 4, 11, -3, 3);
  const Image xy = iesd_blend(x, y, 0.6), yx = iesd_blend(y, x, 0.6);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(xy.data[i] + yx.data[i], x.data[i] + y.data[i], 1e-6);
}

TEST(LocalProvider, CallCountsPerMode) {
  const auto s = DiffusionSchedule::scaled_linear();
  MockPredictor mock(s, filled(4, 4, 2));
  CountingPredictor counter(mock);
  LocalScoreProvider provider(counter, s);
  auto req = request_at(filled(4, 4, 1), 500, 3);
  provider.score(req);
  EXPECT_EQ(counter.uncond, 1);
  EXPECT_EQ(counter.cond, 1);
  EXPECT_EQ(counter.edit, 0);
  req.mode = GuidanceMode::Edit;
  req.instruction = "give him a beard";
  provider.score(req);
  EXPECT_EQ(counter.uncond, 2);
  EXPECT_EQ(counter.cond, 2);
  EXPECT_EQ(counter.edit, 1);
  req.instruction.reset();
  EXPECT_THROW(provider.score(req), ValidationError);
}

TEST(LocalProvider, FixedPointGivesZeroGradient) {
  const auto s = DiffusionSchedule::scaled_linear();
  const Image z = filled(8, 8, 5);
  MockPredictor mock(s, z);
  LocalScoreProvider provider(mock, s);
  auto req = request_at(z, 640, 12);
  req.cfg_scale = 100;
  for (float v : provider.score(req).gradient.data) EXPECT_EQ(v, 0.0f);
  req.mode = GuidanceMode::Edit;
  req.instruction = "x";
  for (float v : provider.score(req).gradient.data) EXPECT_EQ(v, 0.0f);
}

TEST(LocalProvider, EditEndpointsSelectBranches) {
  const auto s = DiffusionSchedule::scaled_linear();
  const Image z = filled(4, 4, 1), orig = filled(4, 4, 2), edited = filled(4, 4, 3);
  MockPredictor mock(s, orig);
  mock.set_edit_target(edited);
  MockPredictor only_orig(s, orig), only_edit(s, edited);
  LocalScoreProvider both(mock, s), po(only_orig, s), pe(only_edit, s);
  auto req = request_at(z, 200, 4);
  req.mode = GuidanceMode::Edit;
  req.instruction = "make it blue";
  req.edit_scale = 0.0;
  EXPECT_EQ(both.score(req).gradient.data, po.score(req).gradient.data);
  req.edit_scale = 1.0;
  EXPECT_EQ(both.score(req).gradient.data, pe.score(req).gradient.data);
}

TEST(SdsStep, ExpectedGradientAtQuarterAlphaBar) {
  const auto s = DiffusionSchedule::from_alpha_bar(std::vector<double>(1000, 0.25));
  Image z(2, 2, 3, 1.0f), target(2, 2, 3, 0.0f);
  MockPredictor mock(s, target);
  LocalScoreProvider provider(mock, s);
  const PromptSet p = prompts();
  SdsContext ctx{&p, ViewBucket::Front, nullptr, nullptr, std::nullopt};
  GuidanceConfig gc;
  gc.cfg_scale = 1.0;
  Rng rng(2);
  std::vector<double> mean(z.size(), 0.0);
  const int draws = 1000;
  for (int i = 0; i < draws; ++i) {
    const auto r = sds_step(provider, z, ctx, gc, s, rng);
    for (std::size_t k = 0; k < z.size(); ++k) mean[k] += r.gradient.data[k] / double(draws);
  }
  for (double m : mean) EXPECT_NEAR(m, oracle::kExpectedGradient * 1.0, 1e-4);
}

TEST(SdsStep, RecordsTimestepAndSeed) {
  const auto s = DiffusionSchedule::scaled_linear();
  MockPredictor mock(s, filled(4, 4, 9));
  LocalScoreProvider provider(mock, s);
  const PromptSet p = prompts();
  SdsContext ctx{&p, ViewBucket::Side, nullptr, nullptr, std::nullopt};
  Rng a(5), b(5);
  const auto r1 = sds_step(provider, filled(4, 4, 1), ctx, {}, s, a);
  const auto r2 = sds_step(provider, filled(4, 4, 1), ctx, {}, s, b);
  EXPECT_EQ(r1.timestep, r2.timestep);
  EXPECT_EQ(r1.noise_seed, r2.noise_seed);
  EXPECT_EQ(r1.gradient.data, r2.gradient.data);
  EXPECT_GE(r1.timestep, 20);
  EXPECT_LE(r1.timestep, 979);
  EXPECT_NEAR(r1.w_t, s.sds_weight(r1.timestep), 1e-15);
  EXPECT_GE(r1.latency_ms, 0.0);
}

TEST(SdsStep, PromptCarriesViewSuffix) {
  const auto s = DiffusionSchedule::scaled_linear();
  MockPredictor mock(s, filled(2, 2, 9));
  CountingPredictor counter(mock);
  LocalScoreProvider provider(counter, s);
  const PromptSet p = prompts();
  Rng rng(1);
  sds_step(provider, filled(2, 2, 1), {&p, ViewBucket::Back, nullptr, nullptr, std::nullopt}, {}, s, rng);
  EXPECT_EQ(counter.last_prompt, "a DSLR portrait of an old man, <back-view>");
}

TEST(SdsStep, RejectsBadProviderOutput) {
  const auto s = DiffusionSchedule::scaled_linear();
  const PromptSet p = prompts();
  SdsContext ctx{&p, ViewBucket::Front, nullptr, nullptr, std::nullopt};
  Rng rng(1);
  ConstantProvider wrong_shape(Image(3, 3, 3));
  EXPECT_THROW(sds_step(wrong_shape, Image(4, 4, 3), ctx, {}, s, rng), ShapeError);
  Image nan(4, 4, 3);
  nan.data[5] = std::numeric_limits<float>::quiet_NaN();
  ConstantProvider poisoned(nan);
  EXPECT_THROW(sds_step(poisoned, Image(4, 4, 3), ctx, {}, s, rng), PoisonedGradientError);
  EXPECT_THROW(sds_step(poisoned, Image(4, 4, 3), SdsContext{}, {}, s, rng), ValidationError);
}

TEST(SdsStep, ConditioningResolutionMustMatch) {
  const auto s = DiffusionSchedule::scaled_linear();
  MockPredictor mock(s, filled(4, 4, 9));
  LocalScoreProvider provider(mock, s);
  const PromptSet p = prompts();
  const Image lm(8, 8, 3);
  Rng rng(1);
  EXPECT_THROW(sds_step(provider, filled(4, 4, 1), {&p, ViewBucket::Front, &lm, nullptr, std::nullopt}, {}, s, rng),
               ShapeError);
}

TEST(SdsStep, DescendsTowardTarget) {
  const auto s = DiffusionSchedule::scaled_linear();
  const Image target = filled(32, 32, 100);
  Image z(32, 32, 3, 0.5f);
  MockPredictor mock(s, target);
  LocalScoreProvider provider(mock, s);
  const PromptSet p = prompts();
  SdsContext ctx{&p, ViewBucket::Front, nullptr, nullptr, std::nullopt};
  GuidanceConfig gc;
  gc.cfg_scale = 1.0;
  AdamState opt(z.size());
  Rng rng(4);
  const double start = mean_abs_error(z, target);
  std::vector<double> trace;
  for (int step = 0; step < 200; ++step) {
    const auto r = sds_step(provider, z, ctx, gc, s, rng);
    // with cfg 1 the gradient is a positive multiple of z - z*
    for (std::size_t i = 0; i < z.size(); ++i)
      if (z.data[i] != target.data[i]) ASSERT_GE(r.gradient.data[i] * (z.data[i] - target.data[i]), 0.0f);
    adam_step(z.data, r.gradient.data, opt, {0.1, 0.9, 0.99, 1e-8});
    trace.push_back(mean_abs_error(z, target));
  }
  EXPECT_LE(trace.back(), 0.1 * start);
  // 10-step window means fall until Adam reaches its noise floor
  for (std::size_t w = 10; w + 10 <= trace.size(); w += 10) {
    double prev = 0, cur = 0;
    for (std::size_t k = 0; k < 10; ++k) prev += trace[w - 10 + k], cur += trace[w + k];
    if (prev / 10 < 0.2 * start) break;
    EXPECT_LT(cur, prev) << "window at " << w;
  }
}
