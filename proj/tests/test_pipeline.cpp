#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"
#include "fontctl/sampler.hpp"
#include "fontctl/trainer.hpp"

using namespace fontctl;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.image_size = 16;
  c.latent_size = 4;
  c.latent_channels = 2;
  c.width1 = 8;
  c.width2 = 16;
  c.norm_groups = 4;
  c.text_dim = 8;
  c.text_len = 8;
  c.timesteps = 50;
  c.batch_size = 2;
  c.codec_steps = 3;
  c.base_steps = 3;
  c.codec_psnr_floor = 0.0;
  c.ocr_patch_height = 8;
  c.ocr_patch_max_width = 64;
  c.hint_kind = HintKind::kGlyph;
  c.use_ocr_loss = false;
  c.freeze_base = true;
  c.learning_rate = 1e-3;
  c.checkpoint_every = 0;
  return c;
}

Tensor rnd(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng);
}

std::vector<TrainingExample> tiny_examples(int n, bool with_regions = true) {
  Rng rng(7);
  std::vector<TrainingExample> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& e = out[static_cast<std::size_t>(i)];
    e.id = "ex" + std::to_string(i);
    e.image = Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
    e.hint = Tensor::uniform({1, 1, 16, 16}, rng, 0.0, 1.0);
    e.caption = i % 2 ? "a card" : "a sign";
    if (with_regions) e.regions.push_back({"AB", {1, 4, 14, 8}, "sans", 8});
  }
  return out;
}

std::vector<const TrainingExample*> ptrs(const std::vector<TrainingExample>& ex) {
  std::vector<const TrainingExample*> p;
  for (const auto& e : ex) p.push_back(&e);
  return p;
}

std::shared_ptr<const Recognizer> tiny_recognizer(int height = 8) {
  RecognizerConfig rc;
  rc.height = height;
  rc.max_width = 64;
  rc.hidden = 8;
  auto r = std::make_shared<Recognizer>(rc, 3);
  r->freeze();
  return r;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fontctl_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_tensors_with_prefix(const TensorArchive& a, const TensorArchive& b, const std::string& prefix) {
  int seen = 0;
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    const Tensor* u = b.find(name);
    if (u == nullptr || u->shape() != t.shape()) return false;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (t[i] != (*u)[i]) return false;
    ++seen;
  }
  return seen > 0;
}

}  // namespace

// ------------------------------------------------------------------ DDIM

TEST(Ddim, SameTimestepIsIdentity) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  const Tensor z = rnd({1, 2, 3, 3}, 1), e = rnd({1, 2, 3, 3}, 2);
  const Tensor out = ddim_step(z, 40, 40, e, s);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(out[i], z[i]);
}

TEST(Ddim, MatchesScalarUpdate) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  const Tensor z = rnd({2, 1, 2, 2}, 3), e = rnd({2, 1, 2, 2}, 4);
  const Tensor out = ddim_step(z, 70, 35, e, s);
  double ab = 1.0, ab_prev = 1.0;
  for (int k = 1; k <= 70; ++k) {
    ab *= 1.0 - s.beta[static_cast<std::size_t>(k)];
    if (k == 35) ab_prev = ab;
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x0 = (z[i] - std::sqrt(1 - ab) * e[i]) / std::sqrt(ab);
    EXPECT_NEAR(out[i], std::sqrt(ab_prev) * x0 + std::sqrt(1 - ab_prev) * e[i], 1e-12);
  }
}

TEST(Ddim, TrueNoiseRecoversCleanLatent) {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  const Tensor z0 = rnd({1, 2, 4, 4}, 5), e = rnd({1, 2, 4, 4}, 6);
  const Tensor zt = add_noise(z0, {600}, e, s);
  const Tensor back = ddim_step(zt, 600, 0, e, s);
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_NEAR(back[i], z0[i], 1e-10);
}

TEST(Ddim, RejectsForwardStep) {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  const Tensor z = rnd({1, 1, 2, 2}, 7);
  EXPECT_THROW(ddim_step(z, 10, 11, z, s), InputError);
}

TEST(Ddim, TimestepsAreStridedAndDecreasing) {
  const auto ts = ddim_timesteps(1000, 20);
  ASSERT_EQ(ts.size(), 20u);
  EXPECT_EQ(ts.front(), 1000);
  EXPECT_EQ(ts.back(), 50);
  for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
  const auto all = ddim_timesteps(50, 50);
  EXPECT_EQ(all.back(), 1);
  EXPECT_THROW(ddim_timesteps(10, 0), InputError);
  EXPECT_THROW(ddim_timesteps(10, 11), InputError);
}

// ------------------------------------------------------------------ sampling

TEST(Sampler, SameSeedSameImages) {
  const DiffusionModel model(tiny_config());
  SampleRequest req;
  req.caption = "a card";
  req.steps = 3;
  req.batch = 2;
  req.seed = 11;
  const HintImage hint(HintKind::kGlyph, 16, 16);
  const SampleResult a = sample_with_hint(req, hint, model);
  const SampleResult b = sample_with_hint(req, hint, model);
  ASSERT_EQ(a.images.size(), 2u);
  EXPECT_EQ(a.images[0].height, 16);
  EXPECT_EQ(a.images, b.images);
  req.seed = 12;
  EXPECT_NE(sample_with_hint(req, hint, model).images, a.images);
}

TEST(Sampler, CountsOneEvaluationPerImagePerStep) {
  const DiffusionModel model(tiny_config());
  SampleRequest req;
  req.caption = "a card";
  req.steps = 3;
  req.batch = 2;
  const HintImage hint(HintKind::kGlyph, 16, 16);
  EXPECT_EQ(sample_with_hint(req, hint, model).denoiser_evaluations, 6);
  req.guidance = 2.5;
  EXPECT_EQ(sample_with_hint(req, hint, model).denoiser_evaluations, 6);
}

TEST(Sampler, FreshControlBranchIgnoresHint) {
  const DiffusionModel model(tiny_config());
  SampleRequest req;
  req.caption = "a card";
  req.steps = 2;
  req.batch = 1;
  HintImage blank(HintKind::kGlyph, 16, 16), full(HintKind::kGlyph, 16, 16);
  for (auto& p : full.pixels) p = 1.0;
  EXPECT_EQ(sample_with_hint(req, blank, model).images, sample_with_hint(req, full, model).images);
}

TEST(Sampler, RequestRoundTripAndRelativeReference) {
  const fs::path dir = temp_dir("request");
  SampleRequest req;
  req.caption = "a card";
  req.regions.push_back({"AB", {1, 2, 10, 8}, "serif", 8});
  req.hint_kind = HintKind::kCanny;
  req.steps = 7;
  req.guidance = 3.0;
  req.seed = 99;
  nlohmann::json j = req.to_json();
  j["reference_image"] = "ref.png";
  std::ofstream(dir / "req.json") << j.dump();
  const SampleRequest back = SampleRequest::load(dir / "req.json");
  EXPECT_EQ(back.caption, req.caption);
  EXPECT_EQ(back.regions.size(), 1u);
  EXPECT_EQ(back.regions[0].font_id, "serif");
  EXPECT_EQ(back.hint_kind, HintKind::kCanny);
  EXPECT_EQ(back.steps, 7);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.reference_image, dir / "ref.png");
  fs::remove_all(dir);
}

TEST(Sampler, BadRegionsNameTheRegion) {
  const TrainConfig cfg = tiny_config();
  const FontRegistry fonts = FontRegistry::load_default();
  SampleRequest req;
  req.regions.push_back({"A", {0, 0, 8, 8}, "sans", 8});
  req.regions.push_back({"B", {20, 20, 4, 4}, "sans", 8});
  try {
    build_request_hint(req, cfg, fonts);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("'B'"), std::string::npos) << e.what();
  }
  req.regions.pop_back();
  req.hint_kind = HintKind::kFont;
  req.regions[0].font_id = "no-such-font";
  EXPECT_THROW(build_request_hint(req, cfg, fonts), InputError);
}

// ------------------------------------------------------------------ trainer

TEST(Trainer, WithoutOcrTotalIsDiffusionLoss) {
  Trainer tr(std::make_unique<DiffusionModel>(tiny_config()), nullptr);
  const auto ex = tiny_examples(2);
  const LossRecord r = tr.train_step(ptrs(ex));
  EXPECT_EQ(r.step, 1);
  EXPECT_FALSE(r.l_ocr.has_value());
  EXPECT_EQ(r.total, r.l_ldm);
  EXPECT_GT(r.l_ldm, 0.0);
}

TEST(Trainer, OcrTermIsWeightedByLambda) {
  TrainConfig cfg = tiny_config();
  cfg.use_ocr_loss = true;
  cfg.lambda_ocr = 0.5;
  Trainer tr(std::make_unique<DiffusionModel>(cfg), tiny_recognizer());
  const auto ex = tiny_examples(2);
  const LossRecord r = tr.train_step(ptrs(ex));
  ASSERT_TRUE(r.l_ocr.has_value());
  EXPECT_EQ(r.ocr_pairs, 2);
  EXPECT_NEAR(r.total, r.l_ldm + 0.5 * *r.l_ocr, 1e-12);
  EXPECT_EQ(tr.ocr_fallbacks(), 0);
}

TEST(Trainer, NoRegionsFallsBackToDiffusionLoss) {
  TrainConfig cfg = tiny_config();
  cfg.use_ocr_loss = true;
  Trainer tr(std::make_unique<DiffusionModel>(cfg), tiny_recognizer());
  const auto ex = tiny_examples(2, false);
  const LossRecord r = tr.train_step(ptrs(ex));
  EXPECT_FALSE(r.l_ocr.has_value());
  EXPECT_EQ(r.total, r.l_ldm);
  EXPECT_EQ(tr.ocr_fallbacks(), 1);
}

TEST(Trainer, RejectsMissingOrMismatchedRecognizer) {
  TrainConfig cfg = tiny_config();
  cfg.use_ocr_loss = true;
  EXPECT_THROW(Trainer(std::make_unique<DiffusionModel>(cfg), nullptr), InputError);
  EXPECT_THROW(Trainer(std::make_unique<DiffusionModel>(cfg), tiny_recognizer(16)), InputError);
}

TEST(Trainer, StepsAreDeterministic) {
  const auto ex = tiny_examples(2);
  Trainer a(std::make_unique<DiffusionModel>(tiny_config()), nullptr);
  Trainer b(std::make_unique<DiffusionModel>(tiny_config()), nullptr);
  for (int i = 0; i < 3; ++i) {
    const LossRecord ra = a.train_step(ptrs(ex)), rb = b.train_step(ptrs(ex));
    EXPECT_EQ(ra.t_mean, rb.t_mean);
    EXPECT_EQ(ra.l_ldm, rb.l_ldm);
    EXPECT_EQ(ra.grad_norm, rb.grad_norm);
  }
  EXPECT_EQ(a.checkpoint().serialize(), b.checkpoint().serialize());
}

TEST(Trainer, RestoreContinuesBitIdentically) {
  const auto ex = tiny_examples(2);
  Trainer straight(std::make_unique<DiffusionModel>(tiny_config()), nullptr);
  for (int i = 0; i < 4; ++i) straight.train_step(ptrs(ex));

  Trainer first(std::make_unique<DiffusionModel>(tiny_config()), nullptr);
  for (int i = 0; i < 2; ++i) first.train_step(ptrs(ex));
  const TensorArchive mid = TensorArchive::deserialize(first.checkpoint().serialize());
  Trainer second(std::make_unique<DiffusionModel>(tiny_config()), nullptr);
  second.restore(mid);
  EXPECT_EQ(second.step(), 2);
  for (int i = 0; i < 2; ++i) second.train_step(ptrs(ex));
  EXPECT_EQ(straight.checkpoint().serialize(), second.checkpoint().serialize());
}

TEST(Trainer, FrozenGroupsStayFixed) {
  const auto ex = tiny_examples(2);
  Trainer tr(std::make_unique<DiffusionModel>(tiny_config()), nullptr);
  const TensorArchive before = tr.checkpoint();
  for (int i = 0; i < 2; ++i) tr.train_step(ptrs(ex));
  const TensorArchive after = tr.checkpoint();
  EXPECT_TRUE(same_tensors_with_prefix(before, after, "base/"));
  EXPECT_TRUE(same_tensors_with_prefix(before, after, "text/"));
  EXPECT_TRUE(same_tensors_with_prefix(before, after, "codec/"));
  EXPECT_FALSE(same_tensors_with_prefix(before, after, "control/"));
}

TEST(Trainer, UnfrozenBaseMoves) {
  TrainConfig cfg = tiny_config();
  cfg.freeze_base = false;
  const auto ex = tiny_examples(2);
  Trainer tr(std::make_unique<DiffusionModel>(cfg), nullptr);
  const TensorArchive before = tr.checkpoint();
  tr.train_step(ptrs(ex));
  const TensorArchive after = tr.checkpoint();
  EXPECT_FALSE(same_tensors_with_prefix(before, after, "base/"));
  EXPECT_TRUE(same_tensors_with_prefix(before, after, "codec/"));
}

TEST(Trainer, BatchOrderIsAPermutationPerEpoch) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  std::multiset<int> seen;
  for (long long s = 0; s < 3; ++s)
    for (int i : batch_indices(cfg, 5, s)) seen.insert(i);
  EXPECT_EQ(seen, (std::multiset<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(batch_indices(cfg, 5, 2).size(), 1u);
  EXPECT_EQ(total_steps(cfg, 5), 9);
  cfg.max_steps = 4;
  EXPECT_EQ(total_steps(cfg, 5), 4);
  cfg.epochs = 0;
  EXPECT_EQ(total_steps(cfg, 5), 0);
}

TEST(Trainer, LossRecordJsonRoundTrip) {
  LossRecord r;
  r.step = 3;
  r.t_mean = 12.5;
  r.l_ldm = 0.25;
  r.total = 0.25;
  r.grad_norm = 1.5;
  const LossRecord back = LossRecord::from_json(r.to_json());
  EXPECT_EQ(back.step, 3);
  EXPECT_FALSE(back.l_ocr.has_value());
  r.l_ocr = 0.125;
  EXPECT_EQ(*LossRecord::from_json(r.to_json()).l_ocr, 0.125);
}

// ------------------------------------------------------------------ full runs

namespace {

std::vector<AnnotatedImage> tiny_images(int n) {
  Rng rng(21);
  std::vector<AnnotatedImage> out;
  for (int i = 0; i < n; ++i) {
    AnnotatedImage a;
    a.id = "img" + std::to_string(i);
    a.image = Image8(16, 16, 3, 240);
    for (auto& p : a.image.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(150, 255));
    a.caption = "a card";
    a.regions.push_back({"A", {2, 3, 10, 10}, "sans", 9});
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace

TEST(Train, ZeroEpochsLeavesInitialWeights) {
  const fs::path dir = temp_dir("zero_epochs");
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  TrainOptions o;
  o.out_dir = dir;
  const TrainOutcome res = train(cfg, tiny_images(4), FontRegistry::load_default(), o);
  EXPECT_EQ(res.steps, 0);
  EXPECT_EQ(TensorArchive::load(dir / "init.ckpt").serialize(), TensorArchive::load(dir / "final.ckpt").serialize());
  EXPECT_TRUE(read_metrics(dir / "metrics.jsonl").empty());
  fs::remove_all(dir);
}

TEST(Train, StopAndResumeMatchesUninterruptedRun) {
  const fs::path a = temp_dir("run_a"), b = temp_dir("run_b");
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;
  cfg.checkpoint_every = 1;
  const auto data = tiny_images(4);
  const FontRegistry fonts = FontRegistry::load_default();

  TrainOptions oa;
  oa.out_dir = a;
  train(cfg, data, fonts, oa);

  TrainOptions ob;
  ob.out_dir = b;
  ob.stop_after = 2;
  const TrainOutcome part = train(cfg, data, fonts, ob);
  EXPECT_EQ(part.steps, 2);
  EXPECT_FALSE(fs::exists(b / "final.ckpt"));
  ob.stop_after = -1;
  ob.resume = true;
  const TrainOutcome rest = train(cfg, data, fonts, ob);
  EXPECT_EQ(rest.steps, 4);

  EXPECT_EQ(TensorArchive::load(a / "final.ckpt").serialize(), TensorArchive::load(b / "final.ckpt").serialize());
  EXPECT_TRUE(fs::exists(b / "step_000003.ckpt"));
  const auto la = read_metrics(a / "metrics.jsonl"), lb = read_metrics(b / "metrics.jsonl");
  ASSERT_EQ(la.size(), 4u);
  ASSERT_EQ(lb.size(), 4u);
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].step, lb[i].step);
    EXPECT_EQ(la[i].l_ldm, lb[i].l_ldm);
    EXPECT_EQ(la[i].total, lb[i].total);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Train, BaseCheckpointGeometryIsChecked) {
  const fs::path dir = temp_dir("base_geom");
  TrainConfig other = tiny_config();
  other.width1 = 4;
  other.norm_groups = 2;
  DiffusionModel m(other);
  TensorArchive ar;
  m.put(ar);
  ar.save(dir / "base.ckpt");
  TrainOptions o;
  o.out_dir = dir / "run";
  o.base_checkpoint = dir / "base.ckpt";
  EXPECT_THROW(train(tiny_config(), tiny_images(2), FontRegistry::load_default(), o), InputError);
  fs::remove_all(dir);
}
