#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fontctl/archive.hpp"
#include "fontctl/codec.hpp"
#include "fontctl/diffusion.hpp"
#include "fontctl/error.hpp"
#include "fontctl/models.hpp"
#include "grad_check.hpp"

using namespace fontctl;
using ag::Var;

namespace {

ModelDims tiny_dims() {
  ModelDims d;
  d.image_size = 16;
  d.latent_channels = 2;
  d.latent_size = 4;
  d.width1 = 8;
  d.width2 = 16;
  d.groups = 4;
  d.text_dim = 8;
  d.text_len = 8;
  return d;
}

Tensor rnd(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng);
}

}  // namespace

TEST(Schedule, LinearBetaTables) {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  ASSERT_EQ(s.alpha_bar.size(), 1001u);
  EXPECT_EQ(s.alpha_bar[0], 1.0);
  EXPECT_NEAR(s.beta[1], 1e-4, 1e-15);
  EXPECT_NEAR(s.beta[1000], 0.02, 1e-15);
  double ab = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    ab *= 1.0 - s.beta[t];
    EXPECT_NEAR(s.alpha_bar[t], ab, 1e-14);
    if (t > 1) {
      EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    }
  }
  EXPECT_THROW(s.check_t(0), Error);
  EXPECT_THROW(s.check_t(1001), Error);
  EXPECT_THROW(make_schedule(0, 1e-4, 0.02), InputError);
  EXPECT_THROW(make_schedule(10, 0.02, 1e-4), InputError);
}

TEST(Schedule, EstimateInvertsNoising) {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z0 = Tensor::randn({2, 2, 3, 3}, rng), eps = Tensor::randn({2, 2, 3, 3}, rng);
    const std::vector<int> t{rng.uniform_int(1, 1000), rng.uniform_int(1, 1000)};
    const Tensor zt = add_noise(z0, t, eps, s);
    const Tensor back = estimate_z0(zt, t, ag::constant(eps), s).value();
    for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_NEAR(back[i], z0[i], 1e-8);
  }
}

TEST(Schedule, LdmLossGradientMatchesFiniteDifferences) {
  const Tensor eps = rnd({2, 2, 4, 4}, 1), hat = rnd({2, 2, 4, 4}, 2);
  for (auto red : {LossReduction::kMean, LossReduction::kSum}) {
    const double err = testutil::max_grad_error(
        [&](const std::vector<Var>& v) { return ldm_loss(ag::constant(eps), v[0], red); }, {hat});
    EXPECT_LT(err, 1e-6);
  }
  const double mean = ldm_loss(ag::constant(eps), ag::constant(hat)).item();
  const double sum = ldm_loss(ag::constant(eps), ag::constant(hat), LossReduction::kSum).item();
  EXPECT_NEAR(sum, mean * 32.0, 1e-10);
}

TEST(Denoiser, OutputShapeMatchesLatent) {
  const ModelDims d = tiny_dims();
  Rng rng(1);
  Denoiser den(d, rng);
  TextEncoder te(d, rng);
  const TextEmbedding c = te({"a card", "another card with a longer prompt"});
  const Var out = den.predict_eps(ag::constant(rnd({2, 2, 4, 4}, 3)), {10, 900}, c);
  EXPECT_EQ(out.shape(), (Shape{2, 2, 4, 4}));
}

TEST(ControlNet, ZeroInitLeavesPredictionBitIdentical) {
  const ModelDims d = tiny_dims();
  Rng rng(2);
  Denoiser den(d, rng);
  ControlNet cn(d, rng);
  cn.init_trunk_from(den);
  TextEncoder te(d, rng);
  const TextEmbedding c = te({"x"});
  const Var zt = ag::constant(rnd({1, 2, 4, 4}, 4));
  const Tensor plain = den.predict_eps(zt, {500}, c).value();
  for (std::uint64_t k = 0; k < 3; ++k) {
    Tensor hint({1, 1, 16, 16});
    Rng hr(100 + k);
    for (std::size_t i = 0; i < hint.size(); ++i) hint[i] = hr.uniform() < 0.3 ? 1.0 : 0.0;
    const ControlFeatures f = cn.encode_hint(ag::constant(hint), zt, {500}, c);
    ASSERT_EQ(f.z_f.size(), 4u);
    const Tensor with = den.predict_eps(zt, {500}, c, &f).value();
    for (std::size_t i = 0; i < plain.size(); ++i) ASSERT_EQ(with[i], plain[i]);
  }
}

TEST(ControlNet, InjectionShapesAndMismatch) {
  const ModelDims d = tiny_dims();
  const auto shapes = injection_shapes(d, 3);
  ASSERT_EQ(shapes.size(), 4u);
  EXPECT_EQ(shapes[0], (Shape{3, 2, 4, 4}));
  EXPECT_EQ(shapes[1], (Shape{3, 8, 4, 4}));
  EXPECT_EQ(shapes[2], (Shape{3, 16, 2, 2}));
  EXPECT_EQ(shapes[3], (Shape{3, 16, 2, 2}));
  EXPECT_THROW(inject(ag::constant(Tensor({1, 2, 4, 4})), ag::constant(Tensor({1, 2, 2, 2}))), ShapeError);
  const Var a = ag::constant(rnd({1, 2, 4, 4}, 9));
  EXPECT_EQ(inject(a, Var()).node(), a.node());
}

TEST(ControlNet, GradientReachesOnlyZeroProjectionsAtInit) {
  // At init every projection is zero, so only the projections themselves
  // receive gradient; everything upstream sees a zero upstream signal.
  const ModelDims d = tiny_dims();
  Rng rng(3);
  Denoiser den(d, rng);
  den.params().set_trainable(false);
  ControlNet cn(d, rng);
  TextEncoder te(d, rng);
  te.params().set_trainable(false);
  const TextEmbedding c = te({"ab"});
  Tensor hint({1, 1, 16, 16});
  hint[17] = 1.0;
  const Var zt = ag::constant(rnd({1, 2, 4, 4}, 5));
  const ControlFeatures f = cn.encode_hint(ag::constant(hint), zt, {300}, c);
  const Var eps = den.predict_eps(zt, {300}, c, &f);
  ag::backward(ldm_loss(ag::constant(rnd({1, 2, 4, 4}, 6)), eps));
  double proj = 0.0, rest = 0.0;
  for (const auto& [name, v] : cn.params().items()) {
    if (!v.has_grad()) continue;
    double n = 0.0;
    const Tensor g = v.grad();
    for (std::size_t i = 0; i < g.size(); ++i) n += g[i] * g[i];
    (name.rfind("zp", 0) == 0 ? proj : rest) += n;
  }
  EXPECT_GT(proj, 0.0);
  EXPECT_EQ(rest, 0.0);
}

TEST(Denoiser, GradientWrtLatentMatchesFiniteDifferences) {
  const ModelDims d = tiny_dims();
  Rng rng(4);
  Denoiser den(d, rng);
  TextEncoder te(d, rng);
  const TextEmbedding c = te({"q"});
  const Tensor target = rnd({1, 2, 4, 4}, 7);
  const double err = testutil::max_grad_error(
      [&](const std::vector<Var>& v) { return ldm_loss(ag::constant(target), den.predict_eps(v[0], {250}, c)); },
      {rnd({1, 2, 4, 4}, 8)}, 1e-5);
  EXPECT_LT(err, 1e-5);
}

TEST(TextEncoder, TokenizerPadsAndTruncates) {
  std::vector<int> ids;
  const auto len = Tokenizer::encode({"AB", std::string(40, 'x'), "\x01"}, 8, ids);
  ASSERT_EQ(ids.size(), 24u);
  EXPECT_EQ(len, (std::vector<int>{3, 8, 2}));
  EXPECT_EQ(ids[0], Tokenizer::kBos);
  EXPECT_EQ(ids[1], 'A' - 30);
  EXPECT_EQ(ids[3], Tokenizer::kPad);
  EXPECT_EQ(ids[17], Tokenizer::kUnk);
}

TEST(Codec, AnalyticRoundTripOnBlockImage) {
  ModelDims d = tiny_dims();
  d.latent_channels = 4;
  Rng rng(1);
  Codec codec(CodecKind::kAnalytic, d, rng);
  Tensor img({1, 3, 16, 16}, 0.25);
  const Tensor z = codec.encode(ag::constant(img)).value();
  EXPECT_EQ(z.shape(), (Shape{1, 4, 4, 4}));
  EXPECT_NEAR(z[0], -0.5, 1e-12);
  const Tensor back = codec.decode(ag::constant(z)).value();
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], 0.25, 1e-12);
}

TEST(Codec, LearnedShapesAndPsnr) {
  const ModelDims d = tiny_dims();
  Rng rng(2);
  Codec codec(CodecKind::kLearned, d, rng);
  const Tensor img = Tensor::uniform({2, 3, 16, 16}, rng, 0.0, 1.0);
  const Var z = codec.encode(ag::constant(img));
  EXPECT_EQ(z.shape(), (Shape{2, 2, 4, 4}));
  EXPECT_EQ(codec.decode(z).shape(), (Shape{2, 3, 16, 16}));
  Tensor a({1, 3, 2, 2}, 0.5), b = a;
  b[0] = 0.6;
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(12.0 / 0.01), 1e-9);
}

TEST(Archive, RoundTripAndCorruption) {
  const ModelDims d = tiny_dims();
  Rng rng(3);
  Denoiser den(d, rng);
  TensorArchive ar;
  ar.meta["kind"] = "test";
  ar.put_params("base/", den.params());
  const std::string bytes = ar.serialize();
  const TensorArchive back = TensorArchive::deserialize(bytes);
  EXPECT_EQ(back.meta["kind"], "test");
  Rng other(99);
  Denoiser den2(d, other);
  back.get_params("base/", den2.params());
  for (std::size_t i = 0; i < den.params().items().size(); ++i) {
    const auto& a = den.params().items()[i].second.value();
    const auto& b = den2.params().items()[i].second.value();
    ASSERT_EQ(a.storage(), b.storage());
  }
  EXPECT_THROW(TensorArchive::deserialize(bytes.substr(0, bytes.size() / 2)), InputError);
  EXPECT_THROW(TensorArchive::deserialize("not a checkpoint"), InputError);
  ModelDims wider = d;
  wider.width1 = 12;
  wider.groups = 4;
  Denoiser mismatch(wider, other);
  EXPECT_THROW(back.get_params("base/", mismatch.params()), InputError);

  const auto path = std::filesystem::temp_directory_path() / "fontctl_archive_test.ckpt";
  ar.save(path);
  EXPECT_EQ(TensorArchive::load(path).tensors.size(), ar.tensors.size());
  std::filesystem::remove(path);
}
