#include <gtest/gtest.h>

#include <cmath>
#include <deque>
#include <filesystem>

#include "fontctl/benchmark.hpp"
#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"
#include "fontctl/hints.hpp"

using namespace fontctl;

namespace {

const FontRegistry& fonts() {
  static const FontRegistry reg = FontRegistry::load_default();
  return reg;
}

AnnotatedImage typographic(std::vector<TextRegion> regions, int size = 64) {
  AnnotatedImage a;
  a.id = "t";
  a.image = render_typographic_image(regions, size, size, fonts());
  a.regions = std::move(regions);
  return a;
}

bool zero_outside(const HintImage& h, const std::vector<TextRegion>& regions) {
  for (int y = 0; y < h.height; ++y)
    for (int x = 0; x < h.width; ++x) {
      bool inside = false;
      for (const auto& r : regions) inside = inside || r.bbox.contains(x, y);
      if (!inside && h.at(y, x) != 0.0) return false;
    }
  return true;
}

}  // namespace

TEST(Typographic, EmptyIsWhite) {
  const Image8 img = render_typographic_image({}, 16, 24, fonts());
  for (auto v : img.pixels) ASSERT_EQ(v, 255);
}

TEST(Typographic, InkMatchesRasterizerCoverage) {
  const TextRegion r{"A", {0, 0, 32, 32}, "sans", 32};
  const Image8 img = render_typographic_image({r}, 32, 32, fonts());
  Coverage cov(32, 32);
  fonts().get("sans").draw(cov, "A", 0, 0, 32, r.bbox);
  int inked = 0, covered = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const bool ink = img.at(y, x, 0) != 255;
      const bool c = std::lround(255.0 * (1.0 - cov.at(y, x))) != 255;
      EXPECT_EQ(ink, c) << y << "," << x;
      inked += ink;
      covered += cov.at(y, x) > 0.0;
    }
  EXPECT_GT(inked, 20);
  EXPECT_GE(covered, inked);
}

TEST(Typographic, DeterministicBytes) {
  const std::vector<TextRegion> rs{{"HELLO", {2, 4, 50, 14}, "serif", 12}};
  EXPECT_EQ(encode_png(render_typographic_image(rs, 64, 64, fonts())),
            encode_png(render_typographic_image(rs, 64, 64, fonts())));
}

TEST(Typographic, Errors) {
  EXPECT_THROW(render_typographic_image({{"A", {0, 0, 20, 10}, "sans", 12}}, 32, 32, fonts()), InputError);
  EXPECT_THROW(render_typographic_image({{"A", {0, 0, 20, 20}, "nope", 12}}, 32, 32, fonts()), InputError);
}

TEST(Canny, ZeroRegionsGivesBlackCanvas) {
  const auto res = make_canny_hint(typographic({}), {});
  for (double v : res.hint.pixels) ASSERT_EQ(v, 0.0);
  EXPECT_EQ(res.hint.kind, HintKind::kCanny);
}

TEST(Canny, UniformCropHasNoEdges) {
  AnnotatedImage a;
  a.image = Image8(32, 32, 3, 128);
  a.regions = {{"X", {4, 4, 20, 20}, "sans", 10}};
  for (double v : make_canny_hint(a, {}).hint.pixels) ASSERT_EQ(v, 0.0);
}

TEST(Canny, SquareGivesClosedThinContourInsideGradientBand) {
  const int n = 24, s0 = 8, s1 = 16;  // black square [8,16)^2
  std::vector<double> gray(n * n, 1.0);
  for (int y = s0; y < s1; ++y)
    for (int x = s0; x < s1; ++x) gray[y * n + x] = 0.0;
  const auto edges = canny_edges(gray, n, n, {});

  // Brute-force oracle: pixels with any raw Sobel response.
  auto g = [&](int y, int x) { return gray[std::clamp(y, 0, n - 1) * n + std::clamp(x, 0, n - 1)]; };
  std::vector<bool> band(n * n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double gx = 0, gy = 0;
      for (int d = -1; d <= 1; ++d) {
        const double wgt = d == 0 ? 2 : 1;
        gx += wgt * (g(y + d, x + 1) - g(y + d, x - 1));
        gy += wgt * (g(y + 1, x + d) - g(y - 1, x + d));
      }
      band[y * n + x] = std::hypot(gx, gy) / 4.0 > 0.1;
    }
  int count = 0;
  for (int i = 0; i < n * n; ++i) {
    if (edges[i] != 0.0) {
      EXPECT_TRUE(band[i]) << "edge outside gradient band at " << i / n << "," << i % n;
      ++count;
    }
  }
  EXPECT_GT(count, 4 * (s1 - s0 - 2));

  // Closed: 4-connected flood from the centre never reaches the border.
  std::vector<bool> seen(n * n, false);
  std::deque<int> q{(n / 2) * n + n / 2};
  seen[q.front()] = true;
  bool escaped = false;
  while (!q.empty()) {
    const int i = q.front();
    q.pop_front();
    const int y = i / n, x = i % n;
    if (y == 0 || x == 0 || y == n - 1 || x == n - 1) escaped = true;
    const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (auto& d : nb) {
      const int j = (y + d[0]) * n + (x + d[1]);
      if (y + d[0] < 0 || y + d[0] >= n || x + d[1] < 0 || x + d[1] >= n || seen[j] || edges[j] != 0.0) continue;
      seen[j] = true;
      q.push_back(j);
    }
  }
  EXPECT_FALSE(escaped);

  // One pixel thick along the middle row and column.
  int row_hits = 0, col_hits = 0;
  for (int x = 0; x < n; ++x) row_hits += edges[(n / 2) * n + x] != 0.0;
  for (int y = 0; y < n; ++y) col_hits += edges[y * n + n / 2] != 0.0;
  EXPECT_EQ(row_hits, 2);
  EXPECT_EQ(col_hits, 2);
}

TEST(Canny, InvalidParams) {
  EXPECT_THROW(canny_edges({0.0}, 1, 1, {.low_threshold = 0.3, .high_threshold = 0.1}), InputError);
}

TEST(FontHint, ThresholdMaskWithinBox) {
  const TextRegion r{"AB", {4, 4, 40, 20}, "sans-bold", 18};
  const auto a = typographic({r});
  const auto res = make_font_hint(a, threshold_segmenter());
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const double want = r.bbox.contains(x, y) && luma(a.image, y, x) < 128 ? 1.0 : 0.0;
      ASSERT_EQ(res.hint.at(y, x), want);
    }
}

TEST(FontHint, SegmenterFailureSkipsRegion) {
  const auto a = typographic({{"A", {0, 0, 20, 20}, "sans", 16}});
  const auto res = make_font_hint(a, [](const Image8&) { return std::optional<std::vector<double>>(); });
  EXPECT_EQ(res.skipped_regions, 1);
  EXPECT_EQ(res.warnings.size(), 1u);
}

TEST(Composition, DisjointRegionsComposeByMax) {
  const TextRegion a{"HE", {2, 2, 30, 16}, "serif", 14}, b{"LO", {30, 36, 30, 20}, "mono-bold", 18};
  const auto both = typographic({a, b});
  AnnotatedImage only_a = both, only_b = both;
  only_a.regions = {a};
  only_b.regions = {b};
  auto check = [](const HintImage& ab, const HintImage& ha, const HintImage& hb) {
    for (std::size_t i = 0; i < ab.pixels.size(); ++i) ASSERT_EQ(ab.pixels[i], std::max(ha.pixels[i], hb.pixels[i]));
  };
  check(make_canny_hint(both, {}).hint, make_canny_hint(only_a, {}).hint, make_canny_hint(only_b, {}).hint);
  const auto seg = threshold_segmenter();
  check(make_font_hint(both, seg).hint, make_font_hint(only_a, seg).hint, make_font_hint(only_b, seg).hint);
  check(make_glyph_hint({a, b}, 64, 64, "sans", fonts()).hint, make_glyph_hint({a}, 64, 64, "sans", fonts()).hint,
        make_glyph_hint({b}, 64, 64, "sans", fonts()).hint);
}

TEST(GlyphHint, IgnoresRegionFont) {
  const TextRegion fancy{"KJ", {3, 5, 40, 22}, "serif-bold", 20};
  TextRegion plain = fancy;
  plain.font_id = "sans";
  const auto h = make_glyph_hint({fancy}, 48, 48, "sans", fonts()).hint;
  Coverage cov(48, 48);
  fonts().get("sans").draw(cov, plain.text, plain.bbox.x, plain.bbox.y, plain.font_px, plain.bbox);
  EXPECT_EQ(h.pixels, cov.values);
}

TEST(GlyphHint, SameTextTranslates) {
  const TextRegion a{"ABC", {1, 2, 30, 14}, "serif", 12}, b{"ABC", {20, 40, 30, 14}, "mono", 12};
  const auto h = make_glyph_hint({a, b}, 64, 64, "sans", fonts()).hint;
  for (int y = 0; y < 14; ++y)
    for (int x = 0; x < 30; ++x) ASSERT_EQ(h.at(a.bbox.y + y, a.bbox.x + x), h.at(b.bbox.y + y, b.bbox.x + x));
}

TEST(Hints, ZeroOutsideBoxesForAllKinds) {
  const std::vector<TextRegion> rs{{"GHJ", {5, 5, 36, 16}, "sans", 14}, {"K", {40, 30, 20, 24}, "serif", 22}};
  const auto a = typographic(rs);
  EXPECT_TRUE(zero_outside(make_canny_hint(a, {}).hint, rs));
  EXPECT_TRUE(zero_outside(make_font_hint(a, threshold_segmenter()).hint, rs));
  EXPECT_TRUE(zero_outside(make_glyph_hint(rs, 64, 64, "mono", fonts()).hint, rs));
}

TEST(Benchmark, ZeroCountIsEmpty) {
  BenchmarkParams p;
  p.count = 0;
  EXPECT_TRUE(generate_tiny_benchmark(p, fonts()).images.empty());
  const auto dir = std::filesystem::temp_directory_path() / "fontctl_bench_empty";
  std::filesystem::remove_all(dir);
  const auto manifest = write_benchmark(generate_tiny_benchmark(p, fonts()), dir);
  EXPECT_TRUE(load_dataset(manifest).images.empty());
}

TEST(Benchmark, GeometryAndDeterminism) {
  BenchmarkParams p{.count = 12, .canvas = 96, .max_lines = 6, .max_char_px = 16, .seed = 3};
  const auto a = generate_tiny_benchmark(p, fonts());
  const auto b = generate_tiny_benchmark(p, fonts());
  ASSERT_EQ(a.images.size(), 12u);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    const auto& img = a.images[i];
    EXPECT_EQ(img.image, b.images[i].image);
    ASSERT_GE(img.regions.size(), 1u);
    ASSERT_LE(img.regions.size(), 6u);
    for (std::size_t j = 0; j < img.regions.size(); ++j) {
      const auto& r = img.regions[j];
      EXPECT_LT(r.font_px, 16);
      EXPECT_LE(r.font_px, r.bbox.h);
      EXPECT_EQ(clamp_bbox(r.bbox, 96, 96), r.bbox);
      for (std::size_t k = j + 1; k < img.regions.size(); ++k) EXPECT_FALSE(r.bbox.intersects(img.regions[k].bbox));
    }
  }
}
