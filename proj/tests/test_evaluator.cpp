#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "fontctl/error.hpp"
#include "fontctl/evaluator.hpp"
#include "fontctl/trainer.hpp"

using namespace fontctl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fontctl_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Two lines per image; the fake engine reads a region by its position.
std::vector<AnnotatedImage> two_line_bench() {
  std::vector<AnnotatedImage> out;
  for (int i = 0; i < 3; ++i) {
    AnnotatedImage a;
    a.id = "b" + std::to_string(i);
    a.image = Image8(32, 32, 3, 255);
    a.caption = "a card";
    a.regions.push_back({"AB" + std::to_string(i), {0, 0, 16, 8}, "sans", 8});
    a.regions.push_back({"CD", {0, 16, 16, 8}, "sans", 8});
    out.push_back(a);
  }
  return out;
}

}  // namespace

TEST(Metrics, EditDistanceCountsCodePoints) {
  EXPECT_EQ(edit_distance("kitten", "sitting"), 3);
  EXPECT_EQ(edit_distance("", "abc"), 3);
  EXPECT_EQ(edit_distance("caf\xc3\xa9", "cafe"), 1);
  EXPECT_EQ(edit_distance("\xc3\xa9\xc3\xa9", "\xc3\xa9"), 1);
}

TEST(Metrics, NormalizedEditDistance) {
  EXPECT_DOUBLE_EQ(normalized_edit_distance("", ""), 1.0);
  EXPECT_DOUBLE_EQ(normalized_edit_distance("abc", "abd"), 1.0 - 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(normalized_edit_distance("", "abcd"), 0.0);
  EXPECT_DOUBLE_EQ(normalized_edit_distance("ab", "abcd"), 0.5);
}

TEST(Metrics, SentenceAccuracyNormalizesWhitespaceOnly) {
  EXPECT_DOUBLE_EQ(sentence_accuracy({{"  HELLO   WORLD ", "HELLO WORLD"}, {"hello", "HELLO"}}), 0.5);
  EXPECT_DOUBLE_EQ(sentence_accuracy({{"A", "A"}}), 1.0);
  EXPECT_THROW(sentence_accuracy({}), InputError);
}

TEST(Metrics, FrechetOneDimensionalClosedForm) {
  const std::vector<std::vector<double>> a{{1.0}, {2.0}, {4.0}, {5.0}};
  const std::vector<std::vector<double>> b{{0.0}, {3.0}, {9.0}};
  auto stats = [](const std::vector<std::vector<double>>& x) {
    double m = 0.0, v = 0.0;
    for (const auto& r : x) m += r[0];
    m /= static_cast<double>(x.size());
    for (const auto& r : x) v += (r[0] - m) * (r[0] - m);
    return std::pair{m, v / static_cast<double>(x.size() - 1)};
  };
  const auto [ma, va] = stats(a);
  const auto [mb, vb] = stats(b);
  const double want = (ma - mb) * (ma - mb) + std::pow(std::sqrt(va) - std::sqrt(vb), 2);
  EXPECT_NEAR(frechet_distance(a, b, 0.0), want, 1e-9);
}

TEST(Metrics, FrechetDiagonalAndSymmetry) {
  Rng rng(3);
  std::vector<std::vector<double>> a, b;
  for (int i = 0; i < 40; ++i) {
    a.push_back({rng.normal(), 2.0 * rng.normal(), rng.normal() + 0.5 * rng.normal()});
    b.push_back({1.0 + rng.normal(), rng.normal(), 3.0 * rng.normal()});
  }
  const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
  EXPECT_GT(ab, 0.0);
  EXPECT_NEAR(ab, ba, 1e-8);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
  EXPECT_THROW(frechet_distance({{1.0, 2.0}}, {{1.0}, {2.0}}), InputError);
}

TEST(Evaluate, PassThroughWithPerfectReader) {
  const auto bench = two_line_bench();
  int calls = 0;
  const OcrEngine perfect = [&calls](const Image8&, const BBox& box) {
    ++calls;
    return box.y == 0 ? "AB" + std::to_string((calls - 1) / 2) : std::string("CD");
  };
  EvalOptions o;
  o.generate = false;
  const EvalReport r = evaluate_benchmark(nullptr, bench, perfect, FontRegistry::load_default(), o);
  EXPECT_EQ(r.images, 3);
  EXPECT_EQ(r.lines, 6);
  EXPECT_DOUBLE_EQ(r.acc, 1.0);
  EXPECT_DOUBLE_EQ(r.ned, 1.0);
  EXPECT_FALSE(r.fid.has_value());
}

TEST(Evaluate, OcrFailuresCountAsEmptyReads) {
  const auto bench = two_line_bench();
  const OcrEngine flaky = [](const Image8&, const BBox& box) -> std::string {
    if (box.y == 0) throw Error("engine crashed");
    return "CD";
  };
  EvalOptions o;
  o.generate = false;
  const EvalReport r = evaluate_benchmark(nullptr, bench, flaky, FontRegistry::load_default(), o);
  EXPECT_EQ(r.ocr_failures, 3);
  EXPECT_DOUBLE_EQ(r.acc, 0.5);
  EXPECT_DOUBLE_EQ(r.ned, 0.5);
  ASSERT_EQ(r.records.size(), 6u);
  EXPECT_TRUE(r.records[0].ocr_failed);
  EXPECT_EQ(r.records[0].pred, "");
}

TEST(Evaluate, GenerationNeedsModel) {
  EvalOptions o;
  EXPECT_THROW(evaluate_benchmark(nullptr, two_line_bench(), [](const Image8&, const BBox&) { return std::string(); },
                                  FontRegistry::load_default(), o),
               InputError);
}

TEST(Evaluate, ExternalCommandFirstLineAndStatus) {
  const OcrEngine ok = external_ocr("printf ' AB \\nsecond\\n'; :");
  const Image8 img(8, 8, 3, 200);
  EXPECT_EQ(ok(img, {0, 0, 4, 4}), "AB");
  const OcrEngine bad = external_ocr("exit 3; :");
  EXPECT_THROW(bad(img, {0, 0, 4, 4}), Error);
  EXPECT_THROW(external_ocr("  "), InputError);
}

TEST(Evaluate, ReportJsonRoundTrip) {
  EvalReport r;
  r.label = "ocr";
  r.acc = 0.25;
  r.ned = 0.5;
  r.fid = 3.0;
  r.lines = 4;
  r.records.push_back({"img", 1, 0, "AB", "A", 0.5, false});
  const EvalReport back = EvalReport::from_json(r.to_json());
  EXPECT_EQ(back.label, "ocr");
  EXPECT_EQ(back.acc, 0.25);
  EXPECT_EQ(*back.fid, 3.0);
  ASSERT_EQ(back.records.size(), 1u);
  EXPECT_EQ(back.records[0].pred, "A");
  r.fid.reset();
  EXPECT_FALSE(EvalReport::from_json(r.to_json()).fid.has_value());
}

TEST(Plots, SameInputsSameBytes) {
  const fs::path dir = temp_dir("plots");
  EvalReport a, b;
  a.label = "ocr";
  a.acc = 0.4;
  a.ned = 0.7;
  a.fid = 12.0;
  b.label = "plain";
  b.acc = 0.3;
  b.ned = 0.6;
  b.fid = 15.0;
  std::string log;
  for (int s = 1; s <= 30; ++s) {
    LossRecord r;
    r.step = s;
    r.l_ldm = 1.0 / s;
    r.l_ocr = 0.5 / s;
    r.total = r.l_ldm + 0.1 * *r.l_ocr;
    log += r.to_json().dump() + "\n";
  }
  std::ofstream(dir / "metrics.jsonl") << log;

  const PlotOutput p1 = emit_plots({a, b}, {dir / "metrics.jsonl"}, dir / "one");
  const PlotOutput p2 = emit_plots({a, b}, {dir / "metrics.jsonl"}, dir / "two");
  ASSERT_EQ(p1.files.size(), 3u);
  for (const char* f : {"acc_ned.png", "fid.png", "loss_curves.png"}) {
    const std::string x = slurp(dir / "one" / f);
    EXPECT_FALSE(x.empty()) << f;
    EXPECT_EQ(x, slurp(dir / "two" / f)) << f;
  }

  a.fid.reset();
  b.fid.reset();
  const PlotOutput p3 = emit_plots({a, b}, {}, dir / "three");
  EXPECT_FALSE(fs::exists(dir / "three" / "fid.png"));
  EXPECT_FALSE(p3.notes.empty());
  fs::remove_all(dir);
}
