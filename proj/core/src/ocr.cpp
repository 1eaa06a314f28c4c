#include "fontctl/ocr.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "fontctl/archive.hpp"
#include "fontctl/error.hpp"
#include "fontctl/hints.hpp"

namespace fontctl {

namespace {

int round_up4(int v) { return (v + 3) / 4 * 4; }

// 1 - luma as a 1x1 convolution over RGB.
Var inverted_luma(const Var& rgb) {
  Tensor w({1, 3, 1, 1}, std::vector<double>{-0.299, -0.587, -0.114});
  return ag::conv2d(rgb, ag::constant(w), ag::constant(Tensor({1}, 1.0)), 1, 0);
}

ag::ResamplePlan padded_plan(const ag::ResamplePlan& p, int out_w) {
  ag::ResamplePlan q = p;
  q.out_w = out_w;
  q.taps.assign(static_cast<std::size_t>(p.out_h) * out_w * p.taps_per_output, {});
  for (int y = 0; y < p.out_h; ++y)
    for (int x = 0; x < p.out_w; ++x)
      for (int k = 0; k < p.taps_per_output; ++k)
        q.taps[(static_cast<std::size_t>(y) * out_w + x) * p.taps_per_output + k] =
            p.taps[(static_cast<std::size_t>(y) * p.out_w + x) * p.taps_per_output + k];
  return q;
}

}  // namespace

PatchBatch crop_regions(const Var& images, int n, const std::vector<TextRegion>& regions, int height, int max_width) {
  if (images.value().rank() != 4 || images.dim(1) != 3) throw ShapeError("crop_regions: expected [N,3,H,W] images");
  if (height < 4 || max_width < 4) throw InputError("crop_regions: patch geometry too small");
  const int H = images.dim(2), W = images.dim(3);
  max_width = max_width / 4 * 4;

  PatchBatch out;
  std::vector<BBox> boxes;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const BBox b = clamp_bbox(regions[i].bbox, W, H);
    if (b.area() == 0) continue;
    const int wv = std::clamp(static_cast<int>(std::lround(static_cast<double>(b.w) * height / b.h)), 1, max_width);
    boxes.push_back(b);
    out.widths.push_back(wv);
    out.source.push_back(static_cast<int>(i));
  }
  if (boxes.empty()) return out;
  const int padded = std::min(max_width, round_up4(*std::max_element(out.widths.begin(), out.widths.end())));

  const Var inv = inverted_luma(ag::slice_batch(images, n, 1));
  std::vector<Var> parts;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const BBox& b = boxes[i];
    const auto plan = ag::bilinear_crop_plan(H, W, b.y, b.x, b.h, b.w, height, out.widths[i]);
    parts.push_back(ag::resample(inv, 0, padded_plan(plan, padded)));
  }
  out.patches = ag::stack_batch(parts);
  return out;
}

PatchBatch crop_regions(const Image8& image, const std::vector<TextRegion>& regions, int height, int max_width) {
  ag::NoGradGuard guard;
  return crop_regions(ag::constant(image_to_tensor(image)), 0, regions, height, max_width);
}

nlohmann::json RecognizerConfig::to_json() const {
  return {{"alphabet", alphabet}, {"height", height}, {"max_width", max_width}, {"hidden", hidden}};
}

RecognizerConfig RecognizerConfig::from_json(const nlohmann::json& j) {
  RecognizerConfig c;
  c.alphabet = j.at("alphabet").get<std::string>();
  c.height = j.at("height").get<int>();
  c.max_width = j.at("max_width").get<int>();
  c.hidden = j.at("hidden").get<int>();
  return c;
}

Recognizer::Recognizer(RecognizerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.height % 4 != 0 || cfg_.height < 8) throw InputError("recognizer height must be a multiple of 4, >= 8");
  if (cfg_.alphabet.empty()) throw InputError("recognizer alphabet is empty");
  Rng rng(mix_seed(seed, "recognizer"));
  const int K = static_cast<int>(cfg_.alphabet.size()) + 1, Hd = cfg_.hidden;
  c1_ = nn::Conv2d(params_, "ocr.conv1", 1, 16, 3, 1, 1, rng, false);
  c2_ = nn::Conv2d(params_, "ocr.conv2", 16, 32, 3, 2, 1, rng);
  c3_ = nn::Conv2d(params_, "ocr.conv3", 32, 48, 3, 1, 1, rng);
  c4_ = nn::Conv2d(params_, "ocr.conv4", 48, 64, 3, 2, 1, rng);
  proj_ = nn::Linear(params_, "ocr.proj", 64 * (cfg_.height / 4), 64, rng);
  fw_x_ = nn::Linear(params_, "ocr.fw_x", 64, 4 * Hd, rng);
  fw_h_ = nn::Linear(params_, "ocr.fw_h", Hd, 4 * Hd, rng, false);
  bw_x_ = nn::Linear(params_, "ocr.bw_x", 64, 4 * Hd, rng);
  bw_h_ = nn::Linear(params_, "ocr.bw_h", Hd, 4 * Hd, rng, false);
  cls_ = nn::Linear(params_, "ocr.cls", 2 * Hd + 64, K, rng);
  for (const char* name : {"ocr.fw_x.b", "ocr.bw_x.b"}) {
    Var b = params_.get(name);
    for (int k = Hd; k < 2 * Hd; ++k) b.mutable_value()[k] = 1.0;  // forget-gate bias
  }
}

std::vector<Var> Recognizer::features(const Var& patches) const {
  if (patches.value().rank() != 4 || patches.dim(1) != 1 || patches.dim(2) != cfg_.height || patches.dim(3) % 4 != 0) {
    throw ShapeError("recognizer: expected [R,1," + std::to_string(cfg_.height) + ",4k] patches, got " +
                     shape_str(patches.shape()));
  }
  Var f1 = ag::relu(c1_(patches));
  Var f2 = ag::relu(c2_(f1));
  Var f3 = ag::relu(c3_(f2));
  return {f1, f2, f3};
}

std::vector<Shape> Recognizer::layer_shapes(int width) const {
  const int h = cfg_.height, w = round_up4(width);
  return {{16, h, w}, {32, h / 2, w / 2}, {48, h / 2, w / 2}};
}

Var Recognizer::logits(const Var& patches, const std::vector<int>* frames) const {
  const Var f3 = features(patches)[2];
  const Var seq = ag::relu(proj_(ag::columns(ag::relu(c4_(f3)))));  // [R,T,64]
  const int R = seq.dim(0), T = seq.dim(1), Hd = cfg_.hidden;

  auto run = [&](const nn::Linear& wx, const nn::Linear& wh, bool reverse) {
    const Var xs = wx(seq);
    Var h = ag::constant(Tensor({R, Hd})), c = ag::constant(Tensor({R, Hd}));
    std::vector<Var> out(static_cast<std::size_t>(T));
    for (int s = 0; s < T; ++s) {
      const int t = reverse ? T - 1 - s : s;
      const Var g = ag::add(ag::select_time(xs, t), wh(h));
      const Var i = ag::sigmoid(ag::slice_last(g, 0, Hd));
      const Var f = ag::sigmoid(ag::slice_last(g, Hd, Hd));
      const Var u = ag::tanh(ag::slice_last(g, 2 * Hd, Hd));
      const Var o = ag::sigmoid(ag::slice_last(g, 3 * Hd, Hd));
      c = ag::add(ag::mul(f, c), ag::mul(i, u));
      h = ag::mul(o, ag::tanh(c));
      if (reverse && frames) {
        Tensor keep({R, Hd});
        for (int r = 0; r < R; ++r)
          if (t < (*frames)[static_cast<std::size_t>(r)]) std::fill_n(keep.data() + static_cast<std::size_t>(r) * Hd, Hd, 1.0);
        const Var k = ag::constant(std::move(keep));
        h = ag::mul(h, k);
        c = ag::mul(c, k);
      }
      out[static_cast<std::size_t>(t)] = h;
    }
    return out;
  };
  const auto fw = run(fw_x_, fw_h_, false);
  const auto bw = run(bw_x_, bw_h_, true);
  std::vector<Var> steps;
  for (int t = 0; t < T; ++t) steps.push_back(ag::concat_last(fw[static_cast<std::size_t>(t)], bw[static_cast<std::size_t>(t)]));
  // The classifier also sees the column features directly, which shortens
  // the CTC warm-up considerably.
  return cls_(ag::concat_last(ag::stack_time(steps), seq));
}

std::vector<std::string> Recognizer::decode(const PatchBatch& batch) const {
  std::vector<std::string> out;
  if (batch.size() == 0) return out;
  ag::NoGradGuard guard;
  // One patch at a time so results never depend on batch padding.
  for (int r = 0; r < batch.size(); ++r) {
    const int w = round_up4(batch.widths[static_cast<std::size_t>(r)]);
    const Var p = ag::slice_batch(batch.patches, r, 1);
    const Var cut = p.dim(3) == w ? p : ag::slice_last(p, 0, w);
    const Tensor lg = logits(cut).value();
    const int T = lg.dim(1), K = lg.dim(2);
    std::string text;
    int prev = 0;
    for (int t = 0; t < T; ++t) {
      const double* row = lg.data() + static_cast<std::size_t>(t) * K;
      const int best = static_cast<int>(std::max_element(row, row + K) - row);
      if (best != 0 && best != prev) text += cfg_.alphabet[static_cast<std::size_t>(best - 1)];
      prev = best;
    }
    out.push_back(text);
  }
  return out;
}

std::string Recognizer::recognize(const Image8& image, const BBox& box) const {
  TextRegion r;
  r.bbox = box;
  const PatchBatch b = crop_regions(image, {r}, cfg_.height, cfg_.max_width);
  if (b.size() == 0) return "";
  return decode(b)[0];
}

void Recognizer::freeze() {
  params_.set_trainable(false);
  params_.zero_grad();
  frozen_ = true;
}

std::vector<int> Recognizer::encode_label(const std::string& text) const {
  std::vector<int> out;
  for (char ch : text) {
    const auto pos = cfg_.alphabet.find(ch);
    if (pos != std::string::npos) out.push_back(static_cast<int>(pos) + 1);
  }
  return out;
}

void Recognizer::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  TensorArchive a;
  a.meta = {{"kind", "recognizer"}, {"config", cfg_.to_json()}, {"strides", strides()}};
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& s : layer_shapes(cfg_.max_width)) shapes.push_back(s);
  a.meta["layer_shapes_at_max_width"] = shapes;
  if (!extra.is_null()) a.meta["train"] = extra;
  a.put_params("", params_);
  a.save(path);
}

Recognizer Recognizer::load(const std::filesystem::path& path) {
  const TensorArchive a = TensorArchive::load(path);
  if (a.meta.value("kind", "") != "recognizer") throw InputError(path.string() + " is not a recognizer checkpoint");
  Recognizer r(RecognizerConfig::from_json(a.meta.at("config")));
  a.get_params("", r.params_);
  r.freeze();
  return r;
}

namespace {

void blur_image(Image8& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double z = 0.0;
  for (int i = -radius; i <= radius; ++i) z += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= z;
  const int H = img.height, W = img.width, C = img.channels;
  std::vector<double> tmp(img.pixels.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img.at(y, std::clamp(x + i, 0, W - 1), c);
        tmp[(static_cast<std::size_t>(y) * W + x) * C + c] = acc;
      }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[(static_cast<std::size_t>(std::clamp(y + i, 0, H - 1)) * W + x) * C + c];
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(acc, 0.0, 255.0)));
      }
}

}  // namespace

std::vector<RecognizerSample> make_recognizer_corpus(const RecognizerCorpusParams& p, const std::string& alphabet,
                                                     const FontRegistry& fonts) {
  if (p.min_px < 4 || p.max_px < p.min_px) throw InputError("recognizer corpus: bad pixel range");
  const std::vector<std::string> ids = p.font_ids.empty() ? fonts.ids() : p.font_ids;
  const Rng root = seeded_rng(p.seed);
  std::vector<RecognizerSample> out;
  out.reserve(static_cast<std::size_t>(p.count));
  for (int i = 0; i < p.count; ++i) {
    Rng rng = root.split("sample" + std::to_string(i));
    TextRegion r;
    const int len = rng.uniform_int(p.min_chars, p.max_chars);
    for (int k = 0; k < len; ++k) r.text += alphabet[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(alphabet.size()) - 1))];
    r.font_id = ids[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ids.size()) - 1))];
    r.font_px = rng.uniform_int(p.min_px, p.max_px);
    const int tw = fonts.get(r.font_id).text_width(r.text, r.font_px) + 1;
    const int margin = 3;
    r.bbox = BBox{margin, margin, tw, r.font_px};
    const int H = r.font_px + 2 * margin, W = tw + 2 * margin;

    const Coverage cov = render_region_coverage(r, H, W, fonts.get(r.font_id));
    const int bg[3] = {rng.uniform_int(170, 255), rng.uniform_int(170, 255), rng.uniform_int(170, 255)};
    const int fg[3] = {rng.uniform_int(0, 100), rng.uniform_int(0, 100), rng.uniform_int(0, 100)};
    Image8 img(H, W, 3);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) {
          const double a = cov.at(y, x);
          img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(bg[c] * (1 - a) + fg[c] * a));
        }
    if (rng.uniform() < 0.6) blur_image(img, rng.uniform(0.4, 1.2));
    if (rng.uniform() < 0.5) {
      const double sd = rng.uniform(2.0, 10.0);
      for (auto& v : img.pixels) v = static_cast<std::uint8_t>(std::clamp(std::lround(v + sd * rng.normal()), 0L, 255L));
    }
    // Annotation noise of about a pixel, as in real boxes.
    r.bbox.x += rng.uniform_int(-1, 1);
    r.bbox.y += rng.uniform_int(-1, 1);
    r.bbox.w += rng.uniform_int(-1, 2);
    r.bbox.h += rng.uniform_int(0, 2);
    out.push_back({std::move(img), std::move(r)});
  }
  return out;
}

namespace {

struct Prepared {
  Tensor patch;  // [1,1,h,w4]
  int width = 0;
  std::vector<int> label;
};

Prepared prepare(const Recognizer& model, const RecognizerSample& s) {
  const auto& cfg = model.config();
  const PatchBatch b = crop_regions(s.image, {s.region}, cfg.height, cfg.max_width);
  if (b.size() == 0) throw InputError("recognizer sample has an empty box");
  return {b.patches.value(), b.widths[0], model.encode_label(s.region.text)};
}

Tensor pad_stack(const std::vector<const Prepared*>& items) {
  int W = 0;
  for (const auto* p : items) W = std::max(W, p->patch.dim(3));
  const int h = items[0]->patch.dim(2);
  Tensor out({static_cast<int>(items.size()), 1, h, W});
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Tensor& t = items[i]->patch;
    const int w = t.dim(3);
    for (int y = 0; y < h; ++y) std::copy_n(t.data() + static_cast<std::size_t>(y) * w, w, out.data() + (i * h + y) * W);
  }
  return out;
}

}  // namespace

double recognizer_accuracy(const Recognizer& model, const std::vector<RecognizerSample>& samples) {
  if (samples.empty()) return 0.0;
  int hits = 0;
  for (const auto& s : samples) {
    const PatchBatch b = crop_regions(s.image, {s.region}, model.config().height, model.config().max_width);
    std::string want;
    for (int k : model.encode_label(s.region.text)) want += model.config().alphabet[static_cast<std::size_t>(k - 1)];
    hits += b.size() > 0 && model.decode(b)[0] == want;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

RecognizerTrainReport pretrain_recognizer(Recognizer& model, const std::vector<RecognizerSample>& corpus,
                                          const RecognizerTrainParams& params) {
  if (model.frozen()) throw Error("recognizer is frozen");
  const int n_hold = std::clamp(static_cast<int>(std::lround(corpus.size() * params.holdout_fraction)), 1,
                                static_cast<int>(corpus.size()) - 1);
  if (corpus.size() < 2) throw InputError("recognizer corpus too small");
  const std::vector<RecognizerSample> holdout(corpus.end() - n_hold, corpus.end());
  std::vector<Prepared> train;
  for (auto it = corpus.begin(); it != corpus.end() - n_hold; ++it) train.push_back(prepare(model, *it));

  Rng rng(mix_seed(params.seed, "recognizer-train"));
  nn::AdamW opt({.lr = params.lr, .weight_decay = 1e-4});
  model.params().set_trainable(true);
  RecognizerTrainReport report;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    opt.set_lr(epoch >= (3 * params.epochs) / 4 ? params.lr * 0.2 : params.lr);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(params.batch)) {
      std::vector<const Prepared*> items;
      for (std::size_t k = b; k < std::min(order.size(), b + params.batch); ++k) items.push_back(&train[order[k]]);
      std::vector<std::vector<int>> labels;
      std::vector<int> lengths;
      for (const auto* p : items) {
        labels.push_back(p->label);
        lengths.push_back(Recognizer::frames(p->width));
      }
      model.params().zero_grad();
      int infeasible = 0;
      Var loss = ag::ctc_loss(model.logits(ag::constant(pad_stack(items)), &lengths), labels, lengths, &infeasible);
      report.infeasible += infeasible;
      ag::backward(loss);
      nn::clip_grad_norm(model.params(), 5.0);
      opt.step(model.params());
      epoch_loss += loss.item();
      ++batches;
    }
    report.final_loss = epoch_loss / std::max(1, batches);
    if (params.verbose) std::cerr << "recognizer epoch " << epoch + 1 << "/" << params.epochs << " ctc " << report.final_loss << '\n';
  }
  model.freeze();
  report.holdout_size = n_hold;
  report.holdout_accuracy = recognizer_accuracy(model, holdout);
  if (report.holdout_accuracy < params.accuracy_floor) {
    throw Error("recognizer held-out accuracy " + std::to_string(report.holdout_accuracy) + " is below the floor " +
                std::to_string(params.accuracy_floor) + "; increase the corpus size or epochs");
  }
  return report;
}

OcrLossResult ocr_loss_from_features(const std::vector<Var>& gt, const std::vector<Var>& pred,
                                     const std::vector<std::vector<int>>& valid_widths) {
  if (gt.size() != pred.size() || gt.size() != valid_widths.size()) throw ShapeError("ocr_loss: layer count mismatch");
  OcrLossResult out;
  if (gt.empty() || gt[0].dim(0) == 0) {
    out.loss = ag::constant(Tensor({1}, 0.0));
    out.empty = true;
    return out;
  }
  const int R = gt[0].dim(0);
  Var total;
  for (std::size_t l = 0; l < gt.size(); ++l) {
    if (gt[l].shape() != pred[l].shape()) {
      throw ShapeError("ocr_loss: layer " + std::to_string(l + 1) + " shapes " + shape_str(gt[l].shape()) + " vs " +
                       shape_str(pred[l].shape()));
    }
    if (static_cast<int>(valid_widths[l].size()) != R) throw ShapeError("ocr_loss: valid width count mismatch");
    const int C = gt[l].dim(1), H = gt[l].dim(2), W = gt[l].dim(3);
    Tensor weight(gt[l].shape());
    for (int i = 0; i < R; ++i) {
      const int v = std::min(W, valid_widths[l][static_cast<std::size_t>(i)]);
      const double s = 1.0 / (static_cast<double>(H) * v * R);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < v; ++x) weight.at(i, c, y, x) = s;
    }
    const Var d = ag::sub(pred[l], gt[l]);
    const Var term = ag::sum(ag::mul(ag::mul(d, d), ag::constant(std::move(weight))));
    total = total ? ag::add(total, term) : term;
  }
  out.loss = total;
  return out;
}

OcrLossResult ocr_loss(const PatchBatch& gt, const PatchBatch& pred, const FeatureExtractor& extractor) {
  if (gt.widths != pred.widths) throw ShapeError("ocr_loss: patch lists are not aligned");
  if (gt.size() == 0) return ocr_loss_from_features({}, {}, {});
  std::vector<Var> fg;
  {
    ag::NoGradGuard guard;
    fg = extractor.features(gt.patches);
  }
  const std::vector<Var> fp = extractor.features(pred.patches);
  std::vector<std::vector<int>> valid;
  for (int s : extractor.strides()) {
    std::vector<int> v;
    for (int w : gt.widths) v.push_back((w + s - 1) / s);
    valid.push_back(std::move(v));
  }
  return ocr_loss_from_features(fg, fp, valid);
}

double total_loss(double l_ldm, double l_ocr, double lambda) {
  if (!(l_ldm >= 0.0) || !(l_ocr >= 0.0) || !(lambda >= 0.0)) throw Error("total_loss: inputs must be non-negative");
  return l_ldm + lambda * l_ocr;
}

Var total_loss(const Var& l_ldm, const Var& l_ocr, double lambda) {
  if (lambda < 0.0) throw Error("total_loss: lambda must be non-negative");
  if (!l_ocr || lambda == 0.0) return l_ldm;
  return ag::add(l_ldm, ag::scale(l_ocr, lambda));
}

}  // namespace fontctl
