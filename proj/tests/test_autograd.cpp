#include <gtest/gtest.h>

#include "fontctl/autograd.hpp"
#include "fontctl/nn.hpp"
#include "grad_check.hpp"

using namespace fontctl;
using ag::Var;
using testutil::max_grad_error;
using testutil::weighted_sum;

namespace {

Tensor rnd(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(s), rng);
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Autograd, ElementwiseOps) {
  auto a = rnd({2, 3}, 1), b = rnd({2, 3}, 2);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::add(v[0], v[1])); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::sub(v[0], v[1])); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::mul(v[0], v[1])); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::silu(v[0])); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::sigmoid(v[0])); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::tanh(v[0])); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::clamp(v[0], -0.5, 0.5)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ag::mse(v[0], v[1]); }, {a, b}), kTol);
}

TEST(Autograd, ConvStridedAndPointwise) {
  auto x = rnd({2, 3, 5, 6}, 3);
  auto w = rnd({4, 3, 3, 3}, 4), b = rnd({4}, 5);
  auto w1 = rnd({4, 3, 1, 1}, 6);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::conv2d(v[0], v[1], v[2], 1, 1)); }, {x, w, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::conv2d(v[0], v[1], v[2], 2, 1)); }, {x, w, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::conv2d(v[0], v[1], Var(), 1, 0)); }, {x, w1}), kTol);
}

TEST(Autograd, Resampling) {
  auto x = rnd({1, 2, 4, 4}, 7);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::upsample_nearest(v[0], 2)); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::avg_pool(v[0], 2)); }, {x}), kTol);
  const auto plan = ag::bilinear_crop_plan(4, 4, 1, 0, 2, 3, 5, 7);
  EXPECT_LT(max_grad_error([&](auto& v) { return weighted_sum(ag::resample(v[0], 0, plan)); }, {x}), kTol);
}

TEST(Autograd, Normalization) {
  auto x = rnd({2, 4, 3, 3}, 8), g = rnd({4}, 9), b = rnd({4}, 10);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::group_norm(v[0], v[1], v[2], 2)); }, {x, g, b}), 1e-5);
  auto t = rnd({2, 3, 4}, 11), lg = rnd({4}, 12), lb = rnd({4}, 13);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::layer_norm(v[0], v[1], v[2])); }, {t, lg, lb}), 1e-5);
}

TEST(Autograd, DenseAndAttention) {
  auto x = rnd({2, 3, 4}, 14), w = rnd({5, 4}, 15), b = rnd({5}, 16);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::linear(v[0], v[1], v[2])); }, {x, w, b}), kTol);
  auto q = rnd({2, 3, 4}, 17), k = rnd({2, 5, 4}, 18);
  Tensor mask({2, 5}, 1.0);
  mask[3] = 0.0;
  mask[4] = 0.0;
  EXPECT_LT(max_grad_error(
                [&](auto& v) { return weighted_sum(ag::softmax_last(ag::bmm(v[0], ag::transpose_last2(v[1])), &mask)); },
                {q, k}),
            kTol);
  auto table = rnd({6, 3}, 19);
  EXPECT_LT(max_grad_error([](auto& v) { return weighted_sum(ag::embedding(v[0], {1, 2, 2, 5}, 2, 2)); }, {table}), kTol);
}

TEST(Autograd, ShapeOps) {
  auto a = rnd({2, 2, 3, 3}, 20), b = rnd({2, 1, 3, 3}, 21), v = rnd({2, 2}, 22);
  EXPECT_LT(max_grad_error([](auto& p) { return weighted_sum(ag::concat_channels(p[0], p[1])); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& p) { return weighted_sum(ag::repeat_channels(p[0], 3)); }, {b}), kTol);
  EXPECT_LT(max_grad_error([](auto& p) { return weighted_sum(ag::add_channel_vector(p[0], p[1])); }, {a, v}), kTol);
  EXPECT_LT(max_grad_error([](auto& p) { return weighted_sum(ag::from_tokens(ag::to_tokens(p[0]), 3, 3)); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& p) { return weighted_sum(ag::slice_batch(p[0], 1, 1)); }, {a}), kTol);
  auto s = rnd({2, 4, 3}, 23);
  EXPECT_LT(max_grad_error(
                [](auto& p) {
                  std::vector<Var> steps{ag::select_time(p[0], 2), ag::select_time(p[0], 0)};
                  return weighted_sum(ag::concat_last(ag::stack_time(steps), ag::slice_last(ag::stack_time(steps), 1, 2)));
                },
                {s}),
            kTol);
  auto c = rnd({2, 3, 2, 4}, 24);
  EXPECT_LT(max_grad_error([](auto& p) { return weighted_sum(ag::slice_channels(p[0], 1, 2)); }, {c}), kTol);
  EXPECT_LT(max_grad_error([](auto& p) { return weighted_sum(ag::columns(p[0])); }, {c}), kTol);
}

TEST(Autograd, ColumnsLayout) {
  Tensor x({1, 2, 2, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  const Tensor y = ag::columns(ag::constant(x)).value();
  ASSERT_EQ(y.shape(), (Shape{1, 3, 4}));
  // column w holds (c0 h0, c0 h1, c1 h0, c1 h1)
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 3.0);
  EXPECT_EQ(y[2], 6.0);
  EXPECT_EQ(y[3], 9.0);
  EXPECT_EQ(y[4], 1.0);
}

TEST(Autograd, CtcLossMatchesFiniteDifferences) {
  auto logits = rnd({2, 6, 4}, 24);
  const std::vector<std::vector<int>> labels{{1, 2}, {3, 3}};
  EXPECT_LT(max_grad_error([&](auto& p) { return ag::ctc_loss(p[0], labels, {6, 5}); }, {logits}), 1e-6);
}

TEST(Autograd, CtcSingleFrameIsNegLogSoftmax) {
  // One frame, one label: only path is the label itself.
  Tensor logits({1, 1, 3}, std::vector<double>{0.5, 1.5, -1.0});
  const double z = std::log(std::exp(0.5) + std::exp(1.5) + std::exp(-1.0));
  EXPECT_NEAR(ag::ctc_loss(ag::constant(logits), {{1}}, {1}).item(), z - 1.5, 1e-12);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  Var p = ag::parameter(rnd({2}, 25));
  ag::NoGradGuard guard;
  Var y = ag::mul(p, p);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Nn, ClipGradNormScalesToBound) {
  nn::ParamStore store;
  Var a = store.add("a", Tensor({2}, std::vector<double>{1, 1}));
  ag::backward(ag::sum(ag::scale(a, 3.0)));
  const double before = nn::clip_grad_norm(store, 1.0);
  EXPECT_NEAR(before, 3.0 * std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(nn::grad_norm(store), 1.0, 1e-12);
}

TEST(Nn, AdamWFirstStepMovesByLr) {
  nn::ParamStore store;
  Var a = store.add("a", Tensor({1}, 2.0));
  ag::backward(ag::sum(ag::scale(a, 5.0)));
  nn::AdamW opt({.lr = 0.1, .weight_decay = 0.0});
  opt.step(store);
  // Bias-corrected first step is lr * sign(g).
  EXPECT_NEAR(a.value()[0], 1.9, 1e-6);
}
