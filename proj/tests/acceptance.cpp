// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.
//
//   fontctl_acceptance [--work DIR] [--only id,id,...] [--keep]
//
// --keep reuses trained artifacts (recognizer, toy runs) already in DIR;
// without it DIR is wiped first.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fontctl/benchmark.hpp"
#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"
#include "fontctl/evaluator.hpp"
#include "fontctl/hints.hpp"
#include "fontctl/ocr.hpp"
#include "fontctl/sampler.hpp"
#include "fontctl/trainer.hpp"

using namespace fontctl;
namespace fs = std::filesystem;
using ag::Var;

namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ------------------------------------------------------------------ toy setup

constexpr int kToySteps = 2000;
const std::vector<std::uint64_t> kAblationSeeds{1, 2, 3};

TrainConfig toy_config(std::uint64_t seed, bool ocr) {
  TrainConfig c;
  c.image_size = 64;
  c.latent_size = 16;
  c.latent_channels = 4;
  c.hint_kind = HintKind::kGlyph;
  c.ocr_patch_height = 16;
  c.learning_rate = 1e-3;
  c.batch_size = 8;
  c.epochs = 1000;
  c.max_steps = kToySteps;
  c.codec_steps = 600;
  c.base_steps = 1500;
  c.checkpoint_every = 500;
  c.seed = seed;
  c.use_ocr_loss = ocr;
  return c;
}

BenchmarkParams toy_corpus_params(std::uint64_t seed) {
  BenchmarkParams p;
  p.count = 200;
  p.canvas = 64;
  p.max_lines = 3;
  p.min_char_px = 10;
  p.max_char_px = 17;
  p.max_chars = 4;
  p.background = Background::kTinted;
  p.seed = 1000 + seed;
  return p;
}

BenchmarkParams toy_heldout_params(std::uint64_t seed) {
  BenchmarkParams p = toy_corpus_params(seed);
  p.count = 24;
  p.background = Background::kWhite;
  p.seed = 5000 + seed;
  return p;
}

struct Ctx {
  fs::path work;
  fs::path cli;
  FontRegistry fonts = FontRegistry::load_default();

  fs::path recognizer_path() {
    const fs::path p = work / "recognizer" / "recognizer.ckpt";
    if (fs::exists(p)) return p;
    RecognizerConfig rc;
    rc.height = 16;
    Recognizer rec(rc, 1);
    RecognizerCorpusParams cp;
    cp.count = 5000;
    cp.min_px = 9;
    cp.max_px = 20;
    RecognizerTrainParams tp;
    tp.epochs = 16;
    const RecognizerTrainReport r = pretrain_recognizer(rec, make_recognizer_corpus(cp, rc.alphabet, fonts), tp);
    std::cerr << "  recognizer held-out accuracy " << r.holdout_accuracy << "\n";
    fs::create_directories(p.parent_path());
    rec.save(p, {{"holdout_accuracy", r.holdout_accuracy}});
    return p;
  }

  std::shared_ptr<const Recognizer> recognizer() {
    if (!rec_) rec_ = std::make_shared<const Recognizer>(Recognizer::load(recognizer_path()));
    return rec_;
  }

  // Trains (or reuses) the toy run for one seed. Both modes of a seed start
  // from the same initialization; the OCR run writes it first.
  fs::path toy_run(std::uint64_t seed, bool ocr) {
    const fs::path root = work / "toy" / ("seed_" + std::to_string(seed));
    const fs::path dir = root / (ocr ? "ocr" : "plain");
    if (fs::exists(dir / "final.ckpt")) return dir;
    const Benchmark corpus = generate_tiny_benchmark(toy_corpus_params(seed), fonts);
    TrainOptions o;
    o.out_dir = dir;
    o.recognizer = recognizer_path();
    if (!ocr) o.base_checkpoint = toy_run(seed, true) / "init.ckpt";
    o.resume = true;
    o.log = [](const std::string& s) { std::cerr << "  " << s << "\n"; };
    train(toy_config(seed, ocr), corpus.images, fonts, o);
    return dir;
  }

 private:
  std::shared_ptr<const Recognizer> rec_;
};

// ------------------------------------------------------------------ criteria

// The OCR loss evaluated straight from its definition: per pair, per layer,
// 1/(H_l W_l) times the sum over positions of the squared channel-vector
// distance, with W_l the unpadded width; summed over layers, averaged over
// pairs.
double ocr_loss_by_loops(const std::vector<Tensor>& gt, const std::vector<Tensor>& pred,
                    const std::vector<std::vector<int>>& widths) {
  const int pairs = gt[0].dim(0);
  double total = 0.0;
  for (int i = 0; i < pairs; ++i) {
    for (std::size_t l = 0; l < gt.size(); ++l) {
      const int C = gt[l].dim(1), H = gt[l].dim(2);
      const int V = widths[l][static_cast<std::size_t>(i)];
      double s = 0.0;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < V; ++w)
          for (int c = 0; c < C; ++c) {
            const double d = pred[l].at(i, c, h, w) - gt[l].at(i, c, h, w);
            s += d * d;
          }
      total += s / (static_cast<double>(H) * V);
    }
  }
  return total / pairs;
}

Result ocr_loss_oracle(Ctx&) {
  Rng rng(2);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int R = rng.uniform_int(1, 4);
    std::vector<Tensor> gt, pred;
    std::vector<std::vector<int>> widths(3);
    std::vector<Var> g, p;
    for (int l = 0; l < 3; ++l) {
      const int C = rng.uniform_int(1, 8), H = rng.uniform_int(1, 8), W = rng.uniform_int(2, 12);
      gt.push_back(Tensor::randn({R, C, H, W}, rng));
      pred.push_back(Tensor::randn({R, C, H, W}, rng));
      for (int i = 0; i < R; ++i) widths[l].push_back(rng.uniform_int(1, W));
      g.push_back(ag::constant(gt.back()));
      p.push_back(ag::constant(pred.back()));
    }
    const double got = ocr_loss_from_features(g, p, widths).loss.item();
    worst = std::max(worst, std::abs(got - ocr_loss_by_loops(gt, pred, widths)));
  }
  return {worst <= 1e-9, "max |loss - loops| = " + fmt(worst) + " over 100 trials"};
}

Result loss_combination(Ctx&) {
  Rng rng(3);
  int exact = 0;
  for (int i = 0; i < 1000; ++i) {
    const double l = rng.uniform(0.0, 5.0), o = rng.uniform(0.0, 200.0);
    if (total_loss(l, o, 0.1) == l + 0.1 * o) ++exact;
  }
  const double lambda = TrainConfig{}.lambda_ocr;
  return {exact == 1000 && lambda == 0.1,
          std::to_string(exact) + "/1000 exact, default lambda_ocr = " + fmt(lambda)};
}

Result noising_inversion(Ctx&) {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(4);
  double e_est = 0.0, e_ddim = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor z0 = Tensor::randn({1, 4, 8, 8}, rng), eps = Tensor::randn({1, 4, 8, 8}, rng);
    const int t = rng.uniform_int(1, 1000);
    const Tensor zt = add_noise(z0, {t}, eps, s);
    const Tensor a = estimate_z0(zt, {t}, ag::constant(eps), s).value();
    const Tensor b = ddim_step(zt, t, 0, eps, s);
    for (std::size_t i = 0; i < z0.size(); ++i) {
      e_est = std::max(e_est, std::abs(a[i] - z0[i]));
      e_ddim = std::max(e_ddim, std::abs(b[i] - z0[i]));
    }
  }
  return {e_est < 1e-8 && e_ddim < 1e-8, "max error estimate " + fmt(e_est) + ", DDIM step " + fmt(e_ddim)};
}

// Relative error ||analytic - central FD|| / ||central FD||.
double fd_relative_error(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                         double h) {
  double num = 0.0, den = 0.0;
  Tensor probe = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + h;
    const double up = f(probe);
    probe[k] = x[k] - h;
    const double dn = f(probe);
    probe[k] = x[k];
    const double fd = (up - dn) / (2 * h);
    num += (analytic[k] - fd) * (analytic[k] - fd);
    den += fd * fd;
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

Result gradients(Ctx&) {
  Rng rng(5);
  RecognizerConfig rc;
  rc.height = 16;
  Recognizer rec(rc, 5);
  rec.freeze();
  const Tensor gt = Tensor::uniform({1, 1, 16, 16}, rng, 0.0, 1.0);
  const Tensor pr = Tensor::uniform({1, 1, 16, 16}, rng, 0.0, 1.0);
  const std::vector<int> widths{16}, source{0};
  auto ocr_at = [&](const Tensor& p) {
    ag::NoGradGuard guard;
    return ocr_loss({ag::constant(gt), widths, source}, {ag::constant(p), widths, source}, rec).loss.item();
  };
  Var pv = ag::parameter(pr);
  ag::backward(ocr_loss({ag::constant(gt), widths, source}, {pv, widths, source}, rec).loss);
  const double e_ocr = fd_relative_error(ocr_at, pr, pv.grad(), 1e-5);

  const Tensor eps = Tensor::randn({1, 4, 16, 16}, rng), eh = Tensor::randn({1, 4, 16, 16}, rng);
  double e_ldm = 0.0;
  for (LossReduction red : {LossReduction::kMean, LossReduction::kSum}) {
    auto ldm_at = [&](const Tensor& e) {
      ag::NoGradGuard guard;
      return ldm_loss(ag::constant(eps), ag::constant(e), red).item();
    };
    Var ev = ag::parameter(eh);
    ag::backward(ldm_loss(ag::constant(eps), ev, red));
    e_ldm = std::max(e_ldm, fd_relative_error(ldm_at, eh, ev.grad(), 1e-5));
  }
  return {e_ocr < 1e-3 && e_ldm < 1e-3,
          "relative error L_OCR wrt pixels " + fmt(e_ocr) + ", L_LDM wrt eps_hat " + fmt(e_ldm)};
}

Result zero_init(Ctx&) {
  const DiffusionModel model(toy_config(11, false));
  Rng rng(6);
  int eps_same = 0, img_same = 0;
  for (int pair = 0; pair < 10; ++pair) {
    HintImage h1(HintKind::kGlyph, 64, 64), h2(HintKind::kGlyph, 64, 64);
    for (auto& v : h1.pixels) v = rng.uniform();
    for (auto& v : h2.pixels) v = rng.uniform();
    const Tensor zt = Tensor::randn({1, 4, 16, 16}, rng);
    const std::vector<int> t{rng.uniform_int(1, model.schedule.T)};
    Tensor out[2];
    {
      ag::NoGradGuard guard;
      const TextEmbedding c = model.text({"a card with text"});
      for (int k = 0; k < 2; ++k) {
        const ControlFeatures f =
            model.control.encode_hint(ag::constant(hint_to_tensor(k ? h2 : h1)), ag::constant(zt), t, c);
        out[k] = model.base.predict_eps(ag::constant(zt), t, c, &f).value();
      }
    }
    if (out[0] == out[1]) ++eps_same;
    SampleRequest req;
    req.caption = "a card with text";
    req.batch = 1;
    req.seed = 100 + static_cast<std::uint64_t>(pair);
    if (sample_with_hint(req, h1, model).images == sample_with_hint(req, h2, model).images) ++img_same;
  }
  return {eps_same == 10 && img_same == 10, "bit-identical eps " + std::to_string(eps_same) + "/10, images " +
                                                std::to_string(img_same) + "/10 (20 DDIM steps)"};
}

std::vector<HintImage> all_hints(const AnnotatedImage& img, const FontRegistry& fonts) {
  return {make_glyph_hint(img.regions, img.image.height, img.image.width, "sans", fonts).hint,
          make_canny_hint(img, CannyParams{}).hint, make_font_hint(img, threshold_segmenter()).hint};
}

Result hint_invariants(Ctx& ctx) {
  BenchmarkParams p;
  p.count = 50;
  p.canvas = 128;
  p.max_lines = 8;
  p.max_char_px = 16;
  p.seed = 8;
  const Benchmark bench = generate_tiny_benchmark(p, ctx.fonts);
  int outside = 0, compositions = 0, composition_fail = 0, nondet = 0;
  std::string blank_kinds;
  for (const auto& img : bench.images) {
    const auto h = all_hints(img, ctx.fonts);
    const auto again = all_hints(img, ctx.fonts);
    std::vector<char> inside(static_cast<std::size_t>(img.image.height) * img.image.width, 0);
    for (const auto& r : img.regions) {
      const BBox b = clamp_bbox(r.bbox, img.image.width, img.image.height);
      for (int y = b.y; y < b.y + b.h; ++y)
        for (int x = b.x; x < b.x + b.w; ++x) inside[static_cast<std::size_t>(y) * img.image.width + x] = 1;
    }
    for (std::size_t k = 0; k < h.size(); ++k) {
      if (encode_png(hint_to_image(h[k])) != encode_png(hint_to_image(again[k])) || h[k].pixels != again[k].pixels)
        ++nondet;
      double mass = 0.0;
      for (std::size_t i = 0; i < h[k].pixels.size(); ++i) {
        if (!inside[i] && h[k].pixels[i] != 0.0) ++outside;
        mass += h[k].pixels[i];
      }
      if (mass == 0.0) blank_kinds += " " + std::to_string(k) + "@" + img.id;
    }
    if (img.regions.size() < 2) continue;
    AnnotatedImage a = img, b = img;
    a.regions.assign(img.regions.begin(), img.regions.begin() + 1);
    b.regions.assign(img.regions.begin() + 1, img.regions.end());
    const auto ha = all_hints(a, ctx.fonts), hb = all_hints(b, ctx.fonts);
    for (std::size_t k = 0; k < h.size(); ++k) {
      ++compositions;
      for (std::size_t i = 0; i < h[k].pixels.size(); ++i) {
        if (h[k].pixels[i] != std::max(ha[k].pixels[i], hb[k].pixels[i])) {
          ++composition_fail;
          break;
        }
      }
    }
  }
  const bool pass = outside == 0 && composition_fail == 0 && nondet == 0 && compositions > 0;
  return {pass, std::to_string(bench.images.size()) + " images x 3 kinds: " + std::to_string(outside) +
                    " nonzero pixels outside boxes, " + std::to_string(composition_fail) + "/" +
                    std::to_string(compositions) + " composition mismatches, " + std::to_string(nondet) +
                    " non-deterministic" +
                    (blank_kinds.empty() ? "" : "; all-zero hints (kind@image):" + blank_kinds)};
}

int dp_edit_distance(const std::vector<char32_t>& a, const std::vector<char32_t>& b) {
  std::vector<std::vector<int>> d(a.size() + 1, std::vector<int>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
  return d[a.size()][b.size()];
}

Result metric_oracles(Ctx&) {
  Rng rng(7);
  const std::vector<char32_t> pool{U'A', U'B', U'C', U'D', U' ', U'é', U'字'};
  auto random_text = [&] {
    std::vector<char32_t> s(static_cast<std::size_t>(rng.uniform_int(0, 12)));
    for (auto& c : s) c = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
    return s;
  };
  int ned_exact = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_text(), b = random_text();
    const std::size_t n = std::max(a.size(), b.size());
    const double want = n == 0 ? 1.0 : 1.0 - static_cast<double>(dp_edit_distance(a, b)) / static_cast<double>(n);
    if (normalized_edit_distance(utf8_encode(a), utf8_encode(b)) == want) ++ned_exact;
  }

  const int n = 50000;
  const double mu_a = 1.0, sd_a = 2.0, mu_b = -0.5, sd_b = 1.0;
  std::vector<std::vector<double>> a(n), b(n);
  for (int i = 0; i < n; ++i) {
    a[static_cast<std::size_t>(i)] = {mu_a + sd_a * rng.normal()};
    b[static_cast<std::size_t>(i)] = {mu_b + sd_b * rng.normal()};
  }
  const double closed = (mu_a - mu_b) * (mu_a - mu_b) + (sd_a - sd_b) * (sd_a - sd_b);
  const double fd = frechet_distance(a, b);
  const double rel = std::abs(fd - closed) / closed;
  const double self = frechet_distance(a, a);
  return {ned_exact == 1000 && rel < 0.02 && std::abs(self) < 1e-6,
          "NED exact " + std::to_string(ned_exact) + "/1000; FD " + fmt(fd) + " vs closed form " + fmt(closed) +
              " (" + fmt(100 * rel, 3) + "%); FD(a,a) = " + fmt(self)};
}

Result tiny_benchmark(Ctx& ctx) {
  BenchmarkParams p;
  p.count = 50;
  p.canvas = 128;
  p.max_lines = 8;
  p.max_char_px = 16;
  p.seed = 9;
  const Benchmark bench = generate_tiny_benchmark(p, ctx.fonts);
  std::vector<std::string> bad;
  auto fail = [&](const std::string& id, const std::string& what) {
    if (bad.size() < 5) bad.push_back(id + ": " + what);
  };
  if (static_cast<int>(bench.images.size()) != p.count) fail("set", "image count " + std::to_string(bench.images.size()));
  int lines = 0;
  for (const auto& img : bench.images) {
    if (img.image.height != p.canvas || img.image.width != p.canvas) fail(img.id, "canvas size");
    const int n = static_cast<int>(img.regions.size());
    lines += n;
    if (n < 1 || n > p.max_lines) fail(img.id, std::to_string(n) + " lines");
    std::vector<char> inside(static_cast<std::size_t>(p.canvas) * p.canvas, 0);
    for (int i = 0; i < n; ++i) {
      const TextRegion& r = img.regions[static_cast<std::size_t>(i)];
      if (r.font_px >= p.max_char_px || r.font_px < p.min_char_px) fail(img.id, "font_px " + std::to_string(r.font_px));
      if (r.bbox.h >= p.max_char_px) fail(img.id, "box height " + std::to_string(r.bbox.h));
      if (r.bbox.x < 0 || r.bbox.y < 0 || r.bbox.x + r.bbox.w > p.canvas || r.bbox.y + r.bbox.h > p.canvas)
        fail(img.id, "box outside canvas");
      const int len = static_cast<int>(r.text.size());
      if (len < p.min_chars || len > p.max_chars) fail(img.id, "text length " + std::to_string(len));
      if (r.text.find_first_not_of(p.char_pool) != std::string::npos) fail(img.id, "character outside pool");
      if (!ctx.fonts.contains(r.font_id)) fail(img.id, "unknown font " + r.font_id);
      for (int j = 0; j < i; ++j) {
        const BBox& a = r.bbox;
        const BBox& b = img.regions[static_cast<std::size_t>(j)].bbox;
        if (a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h) fail(img.id, "overlapping lines");
      }
      bool ink = false;
      for (int y = r.bbox.y; y < r.bbox.y + r.bbox.h; ++y)
        for (int x = r.bbox.x; x < r.bbox.x + r.bbox.w; ++x) {
          inside[static_cast<std::size_t>(y) * p.canvas + x] = 1;
          ink = ink || img.image.at(y, x, 0) != 255;
        }
      if (!ink) fail(img.id, "no ink in box of '" + r.text + "'");
    }
    for (int y = 0; y < p.canvas; ++y)
      for (int x = 0; x < p.canvas; ++x)
        if (!inside[static_cast<std::size_t>(y) * p.canvas + x])
          for (int c = 0; c < 3; ++c)
            if (img.image.at(y, x, c) != 255) {
              fail(img.id, "non-white background");
              y = p.canvas;
              x = p.canvas;
              break;
            }
  }
  // manifest round trip, determinism, empty set
  const fs::path dir = ctx.work / "tiny_benchmark";
  fs::remove_all(dir);
  const fs::path manifest = write_benchmark(bench, dir);
  const DatasetLoad back = load_dataset(manifest);
  if (back.images.size() != bench.images.size()) fail("manifest", "reload count");
  for (std::size_t i = 0; i < std::min(back.images.size(), bench.images.size()); ++i) {
    if (back.images[i].image != bench.images[i].image || back.images[i].regions.size() != bench.images[i].regions.size())
      fail(bench.images[i].id, "manifest round trip");
  }
  const Benchmark again = generate_tiny_benchmark(p, ctx.fonts);
  for (std::size_t i = 0; i < bench.images.size(); ++i)
    if (again.images[i].image != bench.images[i].image) fail(bench.images[i].id, "not deterministic");
  BenchmarkParams empty = p;
  empty.count = 0;
  const fs::path m0 = write_benchmark(generate_tiny_benchmark(empty, ctx.fonts), dir / "empty");
  if (!load_dataset(m0).images.empty()) fail("count=0", "not empty");

  std::string detail = std::to_string(bench.images.size()) + " images, " + std::to_string(lines) + " lines, " +
                       std::to_string(bench.notes.size()) + " placement notes";
  for (const auto& b : bad) detail += "; " + b;
  return {bad.empty(), detail};
}

Result ocr_ablation(Ctx& ctx) {
  const auto rec = ctx.recognizer();
  double ned_on = 0.0, ned_off = 0.0, acc_on = 0.0, acc_off = 0.0;
  std::string per_seed;
  for (const std::uint64_t seed : kAblationSeeds) {
    const Benchmark held = generate_tiny_benchmark(toy_heldout_params(seed), ctx.fonts);
    EvalReport rep[2];
    for (int mode = 0; mode < 2; ++mode) {
      const fs::path dir = ctx.toy_run(seed, mode == 0);
      const fs::path report = dir / "report.json";
      if (fs::exists(report)) {
        rep[mode] = EvalReport::load(report);
        continue;
      }
      const auto model = DiffusionModel::load(dir / "final.ckpt");
      EvalOptions eo;
      eo.seed = 77 + seed;
      eo.label = mode == 0 ? "ocr" : "plain";
      rep[mode] = evaluate_benchmark(model.get(), held.images, builtin_ocr(rec), ctx.fonts, eo);
      rep[mode].save(report);
    }
    ned_on += rep[0].ned;
    ned_off += rep[1].ned;
    acc_on += rep[0].acc;
    acc_off += rep[1].acc;
    per_seed += " seed " + std::to_string(seed) + ": " + fmt(rep[0].ned) + " vs " + fmt(rep[1].ned) + ";";
  }
  const double k = static_cast<double>(kAblationSeeds.size());
  ned_on /= k;
  ned_off /= k;
  acc_on /= k;
  acc_off /= k;
  return {ned_on >= ned_off, "mean NED with OCR loss " + fmt(ned_on) + " vs without " + fmt(ned_off) + " (ACC " +
                                 fmt(acc_on) + " vs " + fmt(acc_off) + ");" + per_seed};
}

Result training_smoke(Ctx& ctx) {
  const fs::path run = ctx.toy_run(kAblationSeeds.front(), true);
  const auto log = read_metrics(run / "metrics.jsonl");
  if (static_cast<int>(log.size()) < kToySteps) return {false, "metrics log has " + std::to_string(log.size()) + " records"};
  auto window_mean = [&](long long end) {
    double s = 0.0;
    for (long long i = end - 100; i < end; ++i) s += log[static_cast<std::size_t>(i)].total;
    return s / 100.0;
  };
  const double early = window_mean(100), late = window_mean(kToySteps);

  // Resume check: 200 steps straight vs 100 + resume, from the same base.
  const Benchmark corpus = generate_tiny_benchmark(toy_corpus_params(kAblationSeeds.front()), ctx.fonts);
  TrainConfig cfg = toy_config(kAblationSeeds.front(), true);
  cfg.max_steps = 200;
  cfg.checkpoint_every = 50;
  const fs::path a = ctx.work / "resume" / "straight", b = ctx.work / "resume" / "interrupted";
  fs::remove_all(ctx.work / "resume");
  TrainOptions o;
  o.recognizer = ctx.recognizer_path();
  o.base_checkpoint = run / "init.ckpt";
  o.out_dir = a;
  train(cfg, corpus.images, ctx.fonts, o);
  o.out_dir = b;
  o.stop_after = 100;
  train(cfg, corpus.images, ctx.fonts, o);
  o.stop_after = -1;
  o.resume = true;
  train(cfg, corpus.images, ctx.fonts, o);
  const bool same_ckpt = slurp(a / "final.ckpt") == slurp(b / "final.ckpt");
  const auto la = read_metrics(a / "metrics.jsonl"), lb = read_metrics(b / "metrics.jsonl");
  bool same_log = la.size() == lb.size() && la.size() == 200;
  for (std::size_t i = 0; same_log && i < la.size(); ++i) {
    same_log = la[i].step == lb[i].step && la[i].t_mean == lb[i].t_mean && la[i].l_ldm == lb[i].l_ldm &&
               la[i].l_ocr == lb[i].l_ocr && la[i].total == lb[i].total && la[i].grad_norm == lb[i].grad_norm;
  }
  return {late < early && same_ckpt && same_log,
          "mean total over steps 1-100 " + fmt(early) + ", steps " + std::to_string(kToySteps - 99) + "-" +
              std::to_string(kToySteps) + " " + fmt(late) + "; resumed checkpoint " +
              (same_ckpt ? "bit-identical" : "DIFFERS") + ", loss log " + (same_log ? "identical" : "DIFFERS")};
}

int run_cli(const Ctx& ctx, const std::string& args, const fs::path& log) {
  const std::string cmd = "'" + ctx.cli.string() + "' " + args + " > '" + log.string() + "' 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

Result end_to_end(Ctx& ctx) {
  if (ctx.cli.empty() || !fs::exists(ctx.cli)) return {false, "fontctl binary not built"};
  const fs::path w = ctx.work / "e2e";
  fs::remove_all(w);
  fs::create_directories(w / "logs");
  const std::string W = w.string();

  std::ofstream(w / "train.cfg") << "image_size = 64\nlatent_size = 16\nhint_kind = glyph\nocr_patch_height = 16\n"
                                    "learning_rate = 1e-3\nbatch_size = 8\nepochs = 100\nmax_steps = 150\n"
                                    "codec_steps = 600\nbase_steps = 300\ncheckpoint_every = 50\n";
  nlohmann::json req{{"caption", "a card with the text \"HEAD\""},
                     {"regions", {{{"text", "HEAD"}, {"bbox", {8, 20, 44, 15}}, {"font_id", "sans"}, {"font_px", 15}}}},
                     {"hint_kind", "glyph"},
                     {"steps", 20},
                     {"batch", 4},
                     {"seed", 3}};
  std::ofstream(w / "request.json") << req.dump(2);

  const std::vector<std::pair<std::string, std::string>> script{
      {"make-benchmark", "make-benchmark --out " + W + "/data --count 60 --canvas 64 --max-lines 3 --min-char-px 10 "
                         "--max-char-px 17 --max-chars 4 --background tinted --seed 31"},
      {"make-benchmark (held-out)", "make-benchmark --out " + W + "/bench --count 8 --canvas 64 --max-lines 3 "
                                    "--min-char-px 10 --max-char-px 17 --max-chars 4 --seed 32"},
      {"pretrain-recognizer", "pretrain-recognizer --out " + W + "/rec --height 16 --count 5000 --min-px 9 "
                              "--max-px 20 --epochs 16"},
      {"train", "train --config " + W + "/train.cfg --data " + W + "/data/manifest.jsonl --out " + W +
                    "/run --recognizer " + W + "/rec/recognizer.ckpt"},
      {"sample", "sample --checkpoint " + W + "/run/final.ckpt --request " + W + "/request.json --out " + W +
                     "/samples"},
      {"evaluate", "evaluate --checkpoint " + W + "/run/final.ckpt --benchmark " + W +
                       "/bench/manifest.jsonl --recognizer " + W + "/rec/recognizer.ckpt --out " + W +
                       "/eval/report.json --batch 2"},
      {"plot", "plot --reports " + W + "/eval/report.json --logs " + W + "/run/metrics.jsonl --out " + W + "/plots"},
  };
  std::string detail;
  int k = 0;
  for (const auto& [name, args] : script) {
    const fs::path log = w / "logs" / (std::to_string(k++) + ".log");
    const int code = run_cli(ctx, args, log);
    if (code != 0) return {false, name + " exited " + std::to_string(code) + " (log " + log.string() + ")"};
  }
  std::vector<std::string> problems;
  try {
    const EvalReport r = EvalReport::load(w / "eval" / "report.json");
    if (r.lines <= 0 || r.images != 16) problems.push_back("report counts");
    if (r.acc < 0 || r.acc > 1 || r.ned < 0 || r.ned > 1) problems.push_back("ACC/NED out of range");
    if (!r.fid || !std::isfinite(*r.fid)) problems.push_back("FID missing");
    detail = "report ACC " + fmt(r.acc) + " NED " + fmt(r.ned) + " FID " + (r.fid ? fmt(*r.fid) : "-") + " over " +
             std::to_string(r.lines) + " lines";
  } catch (const std::exception& e) {
    problems.push_back(std::string("report unreadable: ") + e.what());
  }
  for (const char* f : {"acc_ned.png", "fid.png", "loss_curves.png"}) {
    try {
      if (read_png(w / "plots" / f).empty()) problems.push_back(std::string("empty ") + f);
    } catch (const std::exception&) {
      problems.push_back(std::string("missing ") + f);
    }
  }
  for (int i = 0; i < 4; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%02d.png", i);
    if (!fs::exists(w / "samples" / name)) problems.push_back(std::string("missing ") + name);
  }
  if (!fs::exists(w / "samples" / "manifest.jsonl")) problems.push_back("missing sample manifest");
  for (const char* d : {"data", "rec", "run", "samples", "plots"})
    if (!fs::exists(w / d / "effective_config.json")) problems.push_back(std::string("no config snapshot in ") + d);
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

struct Criterion {
  std::string id;
  double budget_s;
  std::function<Result(Ctx&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  Ctx ctx;
  ctx.work = fs::current_path() / "acceptance_work";
#ifdef FONTCTL_CLI
  ctx.cli = FONTCTL_CLI;
#endif
  std::set<std::string> only;
  bool keep = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      ctx.work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string id; std::getline(ss, id, ',');) only.insert(id);
    } else if (a == "--keep") {
      keep = true;
    } else if (a == "--cli" && i + 1 < argc) {
      ctx.cli = argv[++i];
    } else {
      std::cerr << "usage: fontctl_acceptance [--work DIR] [--only id,...] [--keep] [--cli PATH]\n";
      return 1;
    }
  }
  if (!keep) fs::remove_all(ctx.work);
  fs::create_directories(ctx.work);

  // Order: the training smoke test reuses the first ablation run.
  const std::vector<Criterion> criteria{
      {"ocr-loss-oracle", 5, ocr_loss_oracle},
      {"loss-combination", 1, loss_combination},
      {"noising-inversion", 5, noising_inversion},
      {"gradient-check", 120, gradients},
      {"zero-init-identity", 60, zero_init},
      {"hint-invariants", 60, hint_invariants},
      {"metric-oracles", 30, metric_oracles},
      {"tiny-benchmark", 30, tiny_benchmark},
      {"ocr-loss-ablation", 6 * 3600, ocr_ablation},
      {"training-smoke", 30 * 60, training_smoke},
      {"end-to-end-cli", 3600, end_to_end},
  };
  int failed = 0, ran = 0;
  std::ofstream summary(ctx.work / "summary.txt");
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    try {
      r = c.run(ctx);
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (dt > c.budget_s) {
      r.pass = false;
      r.detail += "; over the " + fmt(c.budget_s) + " s budget";
    }
    std::ostringstream line;
    line << (r.pass ? "PASS " : "FAIL ") << c.id << " (" << std::fixed << std::setprecision(1) << dt
         << " s): " << r.detail;
    std::cout << line.str() << std::endl;
    summary << line.str() << "\n";
    summary.flush();
    if (!r.pass) ++failed;
  }
  std::cout << (failed == 0 ? "all " : "") << ran - failed << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
