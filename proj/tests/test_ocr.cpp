#include <gtest/gtest.h>

#include <cmath>

#include "fontctl/error.hpp"
#include "fontctl/ocr.hpp"
#include "grad_check.hpp"

using namespace fontctl;
using ag::Var;

namespace {

// Direct loop evaluation of the layer-summed, pair-averaged loss.
double loop_loss(const std::vector<Tensor>& gt, const std::vector<Tensor>& pred,
                 const std::vector<std::vector<int>>& widths) {
  const int pairs = gt[0].dim(0);
  double total = 0.0;
  for (int i = 0; i < pairs; ++i) {
    for (std::size_t l = 0; l < gt.size(); ++l) {
      const int C = gt[l].dim(1), H = gt[l].dim(2), W = gt[l].dim(3);
      const int V = widths[l][static_cast<std::size_t>(i)];
      double acc = 0.0;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < V; ++w) {
          double d2 = 0.0;
          for (int c = 0; c < C; ++c) {
            const std::size_t k = ((static_cast<std::size_t>(i) * C + c) * H + h) * W + w;
            d2 += (gt[l][k] - pred[l][k]) * (gt[l][k] - pred[l][k]);
          }
          acc += d2;
        }
      total += acc / (static_cast<double>(H) * V);
    }
  }
  return total / pairs;
}

RecognizerConfig small_cfg() {
  RecognizerConfig cfg;
  cfg.height = 16;
  return cfg;
}

}  // namespace

TEST(OcrLoss, MatchesLoopOracleOnRandomStacks) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int R = rng.uniform_int(1, 4);
    std::vector<Tensor> gt, pred;
    std::vector<std::vector<int>> widths(3);
    for (int l = 0; l < 3; ++l) {
      const int C = rng.uniform_int(1, 5), H = rng.uniform_int(1, 6), W = rng.uniform_int(2, 9);
      gt.push_back(Tensor::randn({R, C, H, W}, rng));
      pred.push_back(Tensor::randn({R, C, H, W}, rng));
      for (int i = 0; i < R; ++i) widths[l].push_back(rng.uniform_int(1, W));
    }
    std::vector<Var> g, p;
    for (int l = 0; l < 3; ++l) {
      g.push_back(ag::constant(gt[l]));
      p.push_back(ag::constant(pred[l]));
    }
    const OcrLossResult r = ocr_loss_from_features(g, p, widths);
    EXPECT_FALSE(r.empty);
    EXPECT_NEAR(r.loss.item(), loop_loss(gt, pred, widths), 1e-9);
  }
}

TEST(OcrLoss, HandComputedSingleLayer) {
  // One pair, one layer 1x1x2 with both columns valid: (1 + 4) / 2.
  Tensor a({1, 1, 1, 2}), b({1, 1, 1, 2});
  b[0] = 1.0;
  b[1] = 2.0;
  const auto r = ocr_loss_from_features({ag::constant(a)}, {ag::constant(b)}, {{2}});
  EXPECT_DOUBLE_EQ(r.loss.item(), 2.5);
  // Padding columns do not count.
  const auto masked = ocr_loss_from_features({ag::constant(a)}, {ag::constant(b)}, {{1}});
  EXPECT_DOUBLE_EQ(masked.loss.item(), 1.0);
}

TEST(OcrLoss, IdenticalInputsGiveZeroAndEmptyIsFlagged) {
  Rng rng(3);
  const Tensor f = Tensor::randn({2, 3, 4, 5}, rng);
  const auto r = ocr_loss_from_features({ag::constant(f)}, {ag::constant(f)}, {{5, 3}});
  EXPECT_EQ(r.loss.item(), 0.0);
  const auto e = ocr_loss_from_features({ag::constant(Tensor({0, 3, 4, 5}))}, {ag::constant(Tensor({0, 3, 4, 5}))}, {{}});
  EXPECT_TRUE(e.empty);
  EXPECT_EQ(e.loss.item(), 0.0);
}

TEST(OcrLoss, TotalLossCombination) {
  EXPECT_DOUBLE_EQ(total_loss(0.5, 0.3, 0.1), 0.5 + 0.1 * 0.3);
  EXPECT_THROW(total_loss(-1.0, 0.3, 0.1), Error);
  const Var v = total_loss(ag::constant(Tensor({1}, 0.5)), ag::constant(Tensor({1}, 0.3)), 0.1);
  EXPECT_DOUBLE_EQ(v.item(), 0.5 + 0.1 * 0.3);
}

TEST(CropRegions, ConstantImageGivesConstantPatch) {
  Tensor img({1, 3, 20, 40}, 0.25);
  TextRegion r;
  r.text = "AB";
  r.bbox = {3, 2, 21, 10};
  r.font_px = 10;
  const PatchBatch pb = crop_regions(ag::constant(img), 0, {r}, 16, 256);
  ASSERT_EQ(pb.size(), 1);
  const int w = static_cast<int>(std::lround(21.0 * 16 / 10));
  EXPECT_EQ(pb.widths[0], w);
  const Tensor& p = pb.patches.value();
  EXPECT_EQ(p.dim(3), (w + 3) / 4 * 4);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < p.dim(3); ++x) {
      const double v = p[static_cast<std::size_t>(y) * p.dim(3) + x];
      if (x < w) {
        EXPECT_NEAR(v, 0.75, 1e-12);
      } else {
        EXPECT_EQ(v, 0.0);
      }
    }
}

TEST(CropRegions, SkipsZeroAreaRegions) {
  Tensor img({1, 3, 8, 8}, 1.0);
  TextRegion a, b;
  a.bbox = {0, 0, 0, 4};
  b.bbox = {1, 1, 4, 4};
  const PatchBatch pb = crop_regions(ag::constant(img), 0, {a, b}, 16, 256);
  ASSERT_EQ(pb.size(), 1);
  EXPECT_EQ(pb.source[0], 1);
}

TEST(OcrLoss, GradientWrtPredictedPixelsMatchesFiniteDifferences) {
  const Recognizer rec(small_cfg(), 4);
  Rng rng(8);
  const Tensor gt_img = Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
  TextRegion r;
  r.bbox = {2, 3, 12, 8};
  r.font_px = 8;
  const PatchBatch gt = crop_regions(ag::constant(gt_img), 0, {r}, 16, 256);
  const double err = testutil::max_grad_error(
      [&](const std::vector<Var>& v) { return ocr_loss(gt, crop_regions(v[0], 0, {r}, 16, 256), rec).loss; },
      {Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0)}, 1e-6);
  EXPECT_LT(err, 1e-3);
}

TEST(Recognizer, LayerShapesAndLogits) {
  const Recognizer rec(small_cfg(), 1);
  const auto shapes = rec.layer_shapes(40);
  ASSERT_EQ(shapes.size(), 3u);
  EXPECT_EQ(shapes[0], (Shape{16, 16, 40}));
  EXPECT_EQ(shapes[1], (Shape{32, 8, 20}));
  EXPECT_EQ(shapes[2], (Shape{48, 8, 20}));
  const Var lg = rec.logits(ag::constant(Tensor({2, 1, 16, 40})));
  EXPECT_EQ(lg.shape(), (Shape{2, 10, 11}));
  EXPECT_EQ(rec.encode_label("AZB"), (std::vector<int>{1, 2}));
}

TEST(Recognizer, SaveLoadKeepsWeightsAndFreezes) {
  Recognizer rec(small_cfg(), 2);
  const auto path = std::filesystem::temp_directory_path() / "fontctl_rec_test.ckpt";
  rec.save(path);
  const Recognizer back = Recognizer::load(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.config().height, 16);
  for (std::size_t i = 0; i < rec.params().items().size(); ++i)
    ASSERT_EQ(rec.params().items()[i].second.value().storage(), back.params().items()[i].second.value().storage());
}

TEST(Recognizer, CorpusIsDeterministic) {
  const FontRegistry fonts = FontRegistry::load_default();
  RecognizerCorpusParams p;
  p.count = 6;
  p.seed = 3;
  const auto a = make_recognizer_corpus(p, "ABC", fonts);
  const auto b = make_recognizer_corpus(p, "ABC", fonts);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].region, b[i].region);
    for (char c : a[i].region.text) EXPECT_NE(std::string("ABC").find(c), std::string::npos);
  }
}
