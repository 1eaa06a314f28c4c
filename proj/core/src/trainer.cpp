#include "fontctl/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"
#include "fontctl/hints.hpp"

namespace fs = std::filesystem;

namespace fontctl {

PreparedData prepare_examples(const std::vector<AnnotatedImage>& images, const TrainConfig& cfg,
                              const FontRegistry& fonts) {
  PreparedData out;
  const int size = cfg.image_size;
  const CannyParams canny{cfg.canny_low, cfg.canny_high, cfg.canny_sigma};
  for (const auto& img : images) {
    if (img.image.height != size || img.image.width != size) {
      throw InputError("image " + img.id + " is " + std::to_string(img.image.height) + "x" +
                       std::to_string(img.image.width) + ", config expects " + std::to_string(size));
    }
    HintResult h;
    switch (cfg.hint_kind) {
      case HintKind::kGlyph: h = make_glyph_hint(img.regions, size, size, cfg.uniform_font, fonts); break;
      case HintKind::kCanny: h = make_canny_hint(img, canny); break;
      case HintKind::kFont: h = make_font_hint(img, threshold_segmenter()); break;
    }
    for (auto& w : h.warnings) out.warnings.push_back(img.id + ": " + w);
    TrainingExample ex;
    ex.id = img.id;
    ex.image = image_to_tensor(img.image);
    ex.hint = hint_to_tensor(h.hint);
    ex.caption = img.caption_for(cfg.caption_source);
    ex.regions = img.regions;
    out.examples.push_back(std::move(ex));
  }
  return out;
}

nlohmann::json LossRecord::to_json() const {
  nlohmann::json j{{"step", step},           {"t_mean", t_mean},       {"l_ldm", l_ldm},
                   {"total", total},         {"grad_norm", grad_norm}, {"wallclock", wallclock},
                   {"ocr_pairs", ocr_pairs}};
  j["l_ocr"] = l_ocr ? nlohmann::json(*l_ocr) : nlohmann::json(nullptr);
  return j;
}

LossRecord LossRecord::from_json(const nlohmann::json& j) {
  LossRecord r;
  r.step = j.at("step").get<long long>();
  r.t_mean = j.value("t_mean", 0.0);
  r.l_ldm = j.at("l_ldm").get<double>();
  if (j.contains("l_ocr") && !j["l_ocr"].is_null()) r.l_ocr = j["l_ocr"].get<double>();
  r.total = j.at("total").get<double>();
  r.grad_norm = j.value("grad_norm", 0.0);
  r.wallclock = j.value("wallclock", 0.0);
  r.ocr_pairs = j.value("ocr_pairs", 0);
  return r;
}

namespace {

Var stack_tensors(const std::vector<const TrainingExample*>& batch, Tensor TrainingExample::*field) {
  std::vector<Var> parts;
  parts.reserve(batch.size());
  for (const auto* ex : batch) parts.push_back(ag::constant(ex->*field));
  return ag::stack_batch(parts);
}

double store_sq_norm(const nn::ParamStore& s) {
  const double n = nn::grad_norm(s);
  return n * n;
}

void scale_grads(const nn::ParamStore& s, double k) {
  for (const auto& [name, v] : s.items()) {
    if (!v.requires_grad() || !v.has_grad()) continue;
    for (double& g : v.node()->grad.storage()) g *= k;
  }
}

void put_moments(TensorArchive& ar, const std::string& prefix, const nn::AdamW& opt) {
  // Sorted so the archive bytes do not depend on hash order.
  std::map<std::string, const Tensor*> m, v;
  for (const auto& [k, t] : opt.first_moments()) m[k] = &t;
  for (const auto& [k, t] : opt.second_moments()) v[k] = &t;
  for (const auto& [k, t] : m) ar.put(prefix + "m/" + k, *t);
  for (const auto& [k, t] : v) ar.put(prefix + "v/" + k, *t);
}

void get_moments(const TensorArchive& ar, const std::string& prefix, nn::AdamW& opt) {
  opt.first_moments().clear();
  opt.second_moments().clear();
  for (const auto& [name, t] : ar.tensors) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    const std::string rest = name.substr(prefix.size());
    if (rest.compare(0, 2, "m/") == 0) opt.first_moments()[rest.substr(2)] = t;
    if (rest.compare(0, 2, "v/") == 0) opt.second_moments()[rest.substr(2)] = t;
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

Trainer::Trainer(std::unique_ptr<DiffusionModel> model, std::shared_ptr<const Recognizer> recognizer)
    : model_(std::move(model)), recognizer_(std::move(recognizer)) {
  const TrainConfig& cfg = model_->config;
  if (cfg.use_ocr_loss) {
    if (!recognizer_) throw InputError("use_ocr_loss is on but no recognizer was supplied");
    if (recognizer_->config().height != cfg.ocr_patch_height) {
      throw InputError("recognizer patch height " + std::to_string(recognizer_->config().height) +
                       " differs from ocr_patch_height " + std::to_string(cfg.ocr_patch_height));
    }
  }
  const nn::AdamWConfig oc{.lr = cfg.learning_rate, .weight_decay = cfg.weight_decay};
  opt_control_ = nn::AdamW(oc);
  opt_base_ = nn::AdamW(oc);
  opt_text_ = nn::AdamW(oc);
  configure_trainable();
}

void Trainer::configure_trainable() {
  const bool base = !model_->config.freeze_base;
  model_->control.params().set_trainable(true);
  model_->base.params().set_trainable(base);
  model_->text.params().set_trainable(base);
  model_->codec.params().set_trainable(false);
}

std::vector<nn::ParamStore*> Trainer::trainable() {
  std::vector<nn::ParamStore*> out{&model_->control.params()};
  if (!model_->config.freeze_base) {
    out.push_back(&model_->base.params());
    out.push_back(&model_->text.params());
  }
  return out;
}

LossRecord Trainer::train_step(const std::vector<const TrainingExample*>& batch) {
  if (batch.empty()) throw InputError("train_step needs a nonempty batch");
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& cfg = model_->config;
  DiffusionModel& m = *model_;
  const int B = static_cast<int>(batch.size());

  Rng rng = seeded_rng(cfg.seed).split("step/" + std::to_string(step_));
  std::vector<int> t(static_cast<std::size_t>(B));
  for (int& v : t) v = rng.uniform_int(1, m.schedule.T);

  const Var images = stack_tensors(batch, &TrainingExample::image);
  const Var hints = stack_tensors(batch, &TrainingExample::hint);
  Tensor z0;
  {
    ag::NoGradGuard guard;
    z0 = m.codec.encode(images).value();
  }
  const Tensor eps = Tensor::randn(z0.shape(), rng);
  const Tensor zt = add_noise(z0, t, eps, m.schedule);
  const Var zt_v = ag::constant(zt);

  std::vector<std::string> captions;
  for (const auto* ex : batch) captions.push_back(ex->caption);
  const TextEmbedding c_t = m.text(captions);
  const ControlFeatures f = m.control.encode_hint(hints, zt_v, t, c_t);
  const Var eps_hat = m.base.predict_eps(zt_v, t, c_t, &f);
  const Var l_ldm = ldm_loss(ag::constant(eps), eps_hat, cfg.loss_reduction);

  LossRecord rec;
  rec.t_mean = std::accumulate(t.begin(), t.end(), 0.0) / B;
  rec.l_ldm = l_ldm.item();
  Var total = l_ldm;
  if (cfg.use_ocr_loss) {
    // Clamped to the pixel range: at large t the estimate is far outside it and
    // carries no usable glyph signal.
    const Var x_hat = ag::clamp(m.codec.decode(estimate_z0(zt, t, eps_hat, m.schedule)), 0.0, 1.0);
    const int h = recognizer_->config().height, maxw = recognizer_->config().max_width;
    Var sum;
    int pairs = 0;
    for (int b = 0; b < B; ++b) {
      const PatchBatch gt = crop_regions(images, b, batch[static_cast<std::size_t>(b)]->regions, h, maxw);
      if (gt.size() == 0) continue;
      const PatchBatch pred = crop_regions(x_hat, b, batch[static_cast<std::size_t>(b)]->regions, h, maxw);
      const OcrLossResult r = ocr_loss(gt, pred, *recognizer_);
      const Var weighted = ag::scale(r.loss, gt.size());
      sum = sum ? ag::add(sum, weighted) : weighted;
      pairs += gt.size();
    }
    rec.ocr_pairs = pairs;
    if (pairs > 0) {
      const Var l_ocr = ag::scale(sum, 1.0 / pairs);
      rec.l_ocr = l_ocr.item();
      total = total_loss(l_ldm, l_ocr, cfg.lambda_ocr);
    } else {
      ++ocr_fallbacks_;
    }
  }
  rec.total = total.item();

  const auto stores = trainable();
  for (auto* s : stores) s->zero_grad();
  ag::backward(total);
  double sq = 0.0;
  for (auto* s : stores) sq += store_sq_norm(*s);
  rec.grad_norm = std::sqrt(sq);

  if (!std::isfinite(rec.total) || !std::isfinite(rec.grad_norm)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step_ + 1 << ": t = [";
    for (std::size_t i = 0; i < t.size(); ++i) os << (i ? ", " : "") << t[i];
    os << "], l_ldm = " << rec.l_ldm << ", l_ocr = " << (rec.l_ocr ? fmt(*rec.l_ocr) : "n/a")
       << ", total = " << rec.total << ", grad norms:";
    for (auto* s : stores) {
      for (const auto& [name, v] : s->items())
        if (v.has_grad()) {
          const double n = nn::grad_norm(*s);
          os << " " << name.substr(0, name.find('.')) << "=" << n;
          break;
        }
    }
    throw Error(os.str());
  }

  if (rec.grad_norm > cfg.grad_clip) {
    for (auto* s : stores) scale_grads(*s, cfg.grad_clip / rec.grad_norm);
  }
  opt_control_.step(m.control.params());
  if (!cfg.freeze_base) {
    opt_base_.step(m.base.params());
    opt_text_.step(m.text.params());
  }
  for (auto* s : stores) s->zero_grad();

  ++step_;
  rec.step = step_;
  const double k = step_ == 1 ? 0.0 : 0.98;
  avg_[0] = k * avg_[0] + (1 - k) * rec.l_ldm;
  if (rec.l_ocr) avg_[1] = (avg_[1] == 0.0 ? 0.0 : 0.98) * avg_[1] + (avg_[1] == 0.0 ? 1.0 : 0.02) * *rec.l_ocr;
  avg_[2] = k * avg_[2] + (1 - k) * rec.total;
  rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

TensorArchive Trainer::checkpoint() const {
  TensorArchive ar;
  ar.meta["kind"] = "fontctl-diffusion";
  model_->put(ar);
  ar.meta["step"] = step_;
  ar.meta["ocr_fallbacks"] = ocr_fallbacks_;
  ar.meta["adam_steps"] = {opt_control_.steps(), opt_base_.steps(), opt_text_.steps()};
  ar.meta["rng"] = seeded_rng(model_->config.seed).serialize();
  ar.put("state/avg", Tensor({3}, std::vector<double>(avg_, avg_ + 3)));
  put_moments(ar, "optim/control/", opt_control_);
  put_moments(ar, "optim/base/", opt_base_);
  put_moments(ar, "optim/text/", opt_text_);
  return ar;
}

void Trainer::restore(const TensorArchive& ar) {
  if (!ar.meta.contains("config") || !same_geometry(model_->config, config_from_json(ar.meta["config"]))) {
    throw InputError("checkpoint was written for a different model geometry");
  }
  model_->get(ar, true, true);
  step_ = ar.meta.value("step", 0LL);
  ocr_fallbacks_ = ar.meta.value("ocr_fallbacks", 0);
  if (ar.meta.contains("adam_steps")) {
    const auto& s = ar.meta["adam_steps"];
    opt_control_.set_steps(s[0].get<long long>());
    opt_base_.set_steps(s[1].get<long long>());
    opt_text_.set_steps(s[2].get<long long>());
  }
  if (const Tensor* a = ar.find("state/avg")) {
    for (int i = 0; i < 3; ++i) avg_[i] = (*a)[static_cast<std::size_t>(i)];
  }
  get_moments(ar, "optim/control/", opt_control_);
  get_moments(ar, "optim/base/", opt_base_);
  get_moments(ar, "optim/text/", opt_text_);
  configure_trainable();
}

long long total_steps(const TrainConfig& cfg, int n) {
  if (n <= 0) return 0;
  const long long per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  long long total = per_epoch * cfg.epochs;
  if (cfg.max_steps >= 0) total = std::min<long long>(total, cfg.max_steps);
  return total;
}

std::vector<int> batch_indices(const TrainConfig& cfg, int n, long long step) {
  const long long per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long long epoch = step / per_epoch, within = step % per_epoch;
  Rng rng = seeded_rng(cfg.seed).split("epoch/" + std::to_string(epoch));
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  const long long begin = within * cfg.batch_size, end = std::min<long long>(n, begin + cfg.batch_size);
  return {perm.begin() + begin, perm.begin() + end};
}

InitReport initialize_base(DiffusionModel& m, const std::vector<TrainingExample>& data) {
  if (data.empty()) throw InputError("base initialization needs data");
  const TrainConfig& cfg = m.config;
  InitReport rep;
  Rng rng = seeded_rng(cfg.seed).split("init/fit");

  std::vector<Tensor> fit, holdout;
  for (std::size_t i = 0; i < data.size(); ++i) (i % 10 == 9 ? holdout : fit).push_back(data[i].image);
  if (fit.empty()) fit = holdout;
  const CodecTrainReport cr = pretrain_codec(m.codec, fit, holdout, cfg.codec_steps, cfg.batch_size, cfg.codec_lr, rng);
  rep.codec_psnr = cr.holdout_psnr;
  rep.codec_loss = cr.final_loss;
  if (cfg.codec == CodecKind::kLearned && !holdout.empty() && cr.holdout_psnr < cfg.codec_psnr_floor) {
    throw Error("codec reconstruction PSNR " + fmt(cr.holdout_psnr) + " dB is below the floor of " +
                fmt(cfg.codec_psnr_floor) + " dB; raise codec_steps");
  }

  m.base.params().set_trainable(true);
  m.text.params().set_trainable(true);
  nn::AdamW ob({.lr = cfg.base_lr, .weight_decay = cfg.weight_decay});
  nn::AdamW ot({.lr = cfg.base_lr, .weight_decay = cfg.weight_decay});
  for (int s = 0; s < cfg.base_steps; ++s) {
    std::vector<const TrainingExample*> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(&data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.size()) - 1))]);
    }
    std::vector<int> t;
    for (std::size_t b = 0; b < batch.size(); ++b) t.push_back(rng.uniform_int(1, m.schedule.T));
    Tensor z0;
    {
      ag::NoGradGuard guard;
      z0 = m.codec.encode(stack_tensors(batch, &TrainingExample::image)).value();
    }
    const Tensor eps = Tensor::randn(z0.shape(), rng);
    std::vector<std::string> captions;
    for (const auto* ex : batch) captions.push_back(ex->caption);
    m.base.params().zero_grad();
    m.text.params().zero_grad();
    const Var loss = ldm_loss(ag::constant(eps),
                              m.base.predict_eps(ag::constant(add_noise(z0, t, eps, m.schedule)), t, m.text(captions)),
                              cfg.loss_reduction);
    ag::backward(loss);
    const double n = std::sqrt(store_sq_norm(m.base.params()) + store_sq_norm(m.text.params()));
    if (!std::isfinite(n)) throw Error("non-finite gradient during base initialization at step " + std::to_string(s));
    if (n > cfg.grad_clip) {
      scale_grads(m.base.params(), cfg.grad_clip / n);
      scale_grads(m.text.params(), cfg.grad_clip / n);
    }
    ob.step(m.base.params());
    ot.step(m.text.params());
    rep.base_loss = 0.98 * rep.base_loss + 0.02 * loss.item();
    if (s == 0) rep.base_loss = loss.item();
  }
  m.base.params().zero_grad();
  m.text.params().zero_grad();
  m.control.init_trunk_from(m.base);
  return rep;
}

std::vector<LossRecord> read_metrics(const fs::path& path) {
  std::vector<LossRecord> out;
  std::ifstream in(path);
  if (!in) throw InputError("cannot open metrics log: " + path.string());
  std::string line;
  int no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(LossRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

TrainOutcome train(const TrainConfig& cfg, const std::vector<AnnotatedImage>& data, const FontRegistry& fonts,
                   const TrainOptions& opts) {
  cfg.validate();
  auto log = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };
  if (data.empty()) throw InputError("training data is empty");
  if (opts.out_dir.empty()) throw InputError("training needs an output directory");
  std::shared_ptr<const Recognizer> rec;
  if (cfg.use_ocr_loss) {
    if (opts.recognizer.empty()) throw InputError("use_ocr_loss is on: pass a pretrained recognizer");
    rec = std::make_shared<const Recognizer>(Recognizer::load(opts.recognizer));
  }
  PreparedData prepared = prepare_examples(data, cfg, fonts);
  for (const auto& w : prepared.warnings) log("warning: " + w);
  const auto& ex = prepared.examples;

  fs::create_directories(opts.out_dir);
  TrainOutcome out;
  out.metrics_log = opts.out_dir / "metrics.jsonl";
  const fs::path last = opts.out_dir / "last.ckpt";

  std::unique_ptr<Trainer> trainer;
  if (opts.resume && fs::exists(last)) {
    trainer = std::make_unique<Trainer>(std::make_unique<DiffusionModel>(cfg), rec);
    trainer->restore(TensorArchive::load(last));
    log("resuming from " + last.string() + " at step " + std::to_string(trainer->step()));
    // Drop log records past the checkpoint so the log stays replayable.
    std::string kept;
    if (fs::exists(out.metrics_log)) {
      for (const auto& r : read_metrics(out.metrics_log))
        if (r.step <= trainer->step()) kept += r.to_json().dump() + "\n";
    }
    write_file_atomic(out.metrics_log, kept);
  } else {
    auto model = std::make_unique<DiffusionModel>(cfg);
    if (!opts.base_checkpoint.empty()) {
      const TensorArchive base = TensorArchive::load(opts.base_checkpoint);
      if (!base.meta.contains("config") || !same_geometry(cfg, config_from_json(base.meta["config"]))) {
        throw InputError(opts.base_checkpoint.string() + ": base checkpoint geometry does not match the config");
      }
      model->get(base, true, false);
      model->control.init_trunk_from(model->base);
      log("loaded base weights from " + opts.base_checkpoint.string());
    } else {
      out.init = initialize_base(*model, ex);
      log("initialized base: codec psnr " + fmt(out.init.codec_psnr) + " dB, base loss " + fmt(out.init.base_loss));
    }
    trainer = std::make_unique<Trainer>(std::move(model), rec);
    trainer->checkpoint().save(opts.out_dir / "init.ckpt");
    write_file_atomic(out.metrics_log, "");
  }

  const long long total = total_steps(cfg, static_cast<int>(ex.size()));
  std::ofstream metrics(out.metrics_log, std::ios::app);
  if (!metrics) throw Error("cannot append to " + out.metrics_log.string());
  const auto start = std::chrono::steady_clock::now();
  bool stopped = false;
  while (trainer->step() < total) {
    if (opts.stop_after >= 0 && trainer->step() >= opts.stop_after) {
      stopped = true;
      break;
    }
    std::vector<const TrainingExample*> batch;
    for (int i : batch_indices(cfg, static_cast<int>(ex.size()), trainer->step())) batch.push_back(&ex[static_cast<std::size_t>(i)]);
    LossRecord r = trainer->train_step(batch);
    r.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    metrics << r.to_json().dump() << "\n";
    metrics.flush();
    if (opts.on_step) opts.on_step(r);
    if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld.ckpt", r.step);
      const TensorArchive ar = trainer->checkpoint();
      ar.save(opts.out_dir / name);
      ar.save(last);
      log("step " + std::to_string(r.step) + "/" + std::to_string(total) + " total " + fmt(trainer->avg_total()));
    }
  }
  const TensorArchive ar = trainer->checkpoint();
  ar.save(last);
  out.final_checkpoint = last;
  if (!stopped) {
    out.final_checkpoint = opts.out_dir / "final.ckpt";
    ar.save(out.final_checkpoint);
  }
  out.steps = trainer->step();
  out.ocr_fallbacks = trainer->ocr_fallbacks();
  if (out.ocr_fallbacks > 0) log(std::to_string(out.ocr_fallbacks) + " steps had no OCR regions and used the diffusion loss alone");
  return out;
}

}  // namespace fontctl
