#include "fontctl/codec.hpp"

#include <algorithm>
#include <cmath>

#include "fontctl/error.hpp"

namespace fontctl {

namespace {

// Full-plane bilinear resize of every batch element.
Var resize_all(const Var& x, int out_h, int out_w) {
  const auto plan = ag::bilinear_crop_plan(x.dim(2), x.dim(3), 0, 0, x.dim(2), x.dim(3), out_h, out_w);
  std::vector<Var> parts;
  for (int i = 0; i < x.dim(0); ++i) parts.push_back(ag::resample(x, i, plan));
  return ag::stack_batch(parts);
}

}  // namespace

Codec::Codec(CodecKind kind, const ModelDims& d, Rng& rng) : kind_(kind), dims_(d) {
  if (kind_ == CodecKind::kAnalytic) {
    if (d.latent_channels < 3) throw InputError("analytic codec needs at least 3 latent channels");
    return;
  }
  int ch = 32;
  enc_.emplace_back(params_, "codec.enc.0", 3, ch, 3, 1, 1, rng);
  int i = 1;
  for (int s = d.factor(); s > 1; s /= 2, ++i) {
    const int next = std::min(64, ch * 2);
    enc_.emplace_back(params_, "codec.enc." + std::to_string(i), ch, next, 3, 2, 1, rng);
    ch = next;
  }
  enc_.emplace_back(params_, "codec.enc." + std::to_string(i), ch, d.latent_channels, 1, 1, 0, rng);

  dec_.emplace_back(params_, "codec.dec.0", d.latent_channels, ch, 3, 1, 1, rng);
  i = 1;
  for (int s = d.factor(); s > 1; s /= 2, ++i) {
    const int next = std::max(32, ch / 2);
    dec_.emplace_back(params_, "codec.dec." + std::to_string(i), ch, next, 3, 1, 1, rng);
    ch = next;
  }
  dec_.emplace_back(params_, "codec.dec." + std::to_string(i), ch, 3, 3, 1, 1, rng);
}

Var Codec::encode(const Var& image) const {
  if (image.value().rank() != 4 || image.dim(1) != 3 || image.dim(2) != dims_.image_size || image.dim(3) != dims_.image_size) {
    throw ShapeError("encode: expected [N,3," + std::to_string(dims_.image_size) + "," + std::to_string(dims_.image_size) +
                     "], got " + shape_str(image.shape()));
  }
  if (kind_ == CodecKind::kAnalytic) {
    Var rgb = ag::add_scalar(ag::scale(ag::avg_pool(image, dims_.factor()), 2.0), -1.0);
    if (dims_.latent_channels == 3) return rgb;
    // BT.601 luma as a fixed 1x1 convolution.
    const int extra = dims_.latent_channels - 3;
    Tensor w({extra, 3, 1, 1});
    for (int e = 0; e < extra; ++e) {
      w[e * 3 + 0] = 0.299;
      w[e * 3 + 1] = 0.587;
      w[e * 3 + 2] = 0.114;
    }
    return ag::concat_channels(rgb, ag::conv2d(rgb, ag::constant(w), Var(), 1, 0));
  }
  Var h = ag::add_scalar(ag::scale(image, 2.0), -1.0);
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    h = enc_[i](h);
    if (i + 1 < enc_.size()) h = ag::silu(h);
  }
  return ag::scale(h, scale_);
}

Var Codec::decode(const Var& latent) const {
  const Shape want{latent.dim(0), dims_.latent_channels, dims_.latent_size, dims_.latent_size};
  if (latent.shape() != want) throw ShapeError("decode: latent " + shape_str(latent.shape()) + ", expected " + shape_str(want));
  if (kind_ == CodecKind::kAnalytic) {
    Var rgb = dims_.latent_channels == 3 ? latent : ag::slice_channels(latent, 0, 3);
    return ag::add_scalar(ag::scale(resize_all(rgb, dims_.image_size, dims_.image_size), 0.5), 0.5);
  }
  Var h = dec_[0](ag::scale(latent, 1.0 / scale_));
  for (std::size_t i = 1; i + 1 < dec_.size(); ++i) h = dec_[i](ag::upsample_nearest(ag::silu(h), 2));
  h = dec_.back()(ag::silu(h));
  return ag::add_scalar(ag::scale(h, 0.5), 0.5);
}

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shape mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::clamp(a[i], 0.0, 1.0) - std::clamp(b[i], 0.0, 1.0);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  return mse <= 0.0 ? 99.0 : 10.0 * std::log10(1.0 / mse);
}

CodecTrainReport pretrain_codec(Codec& codec, const std::vector<Tensor>& images, const std::vector<Tensor>& holdout,
                                int steps, int batch, double lr, Rng& rng) {
  CodecTrainReport report;
  if (codec.kind() == CodecKind::kAnalytic) {
    steps = 0;
  } else if (images.empty()) {
    throw InputError("codec pretraining needs images");
  }
  codec.set_latent_scale(1.0);
  nn::AdamW opt({.lr = lr, .weight_decay = 0.0});
  codec.params().set_trainable(true);
  for (int s = 0; s < steps; ++s) {
    std::vector<Var> parts;
    for (int b = 0; b < batch; ++b) {
      parts.push_back(ag::constant(images[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(images.size()) - 1))]));
    }
    Var x = ag::stack_batch(parts);
    codec.params().zero_grad();
    Var loss = ag::mse(codec.decode(codec.encode(x)), x);
    ag::backward(loss);
    nn::clip_grad_norm(codec.params(), 1.0);
    opt.step(codec.params());
    report.final_loss = loss.item();
  }
  codec.params().set_trainable(false);

  ag::NoGradGuard guard;
  if (codec.kind() == CodecKind::kLearned) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& img : images) {
      for (double v : codec.encode(ag::constant(img)).value().span()) {
        sum += v;
        sq += v * v;
        ++n;
      }
    }
    const double mean = sum / static_cast<double>(n);
    const double sd = std::sqrt(std::max(1e-12, sq / static_cast<double>(n) - mean * mean));
    codec.set_latent_scale(1.0 / sd);
  }
  report.latent_scale = codec.latent_scale();
  double total = 0.0;
  for (const auto& img : holdout) total += psnr(codec.decode(codec.encode(ag::constant(img))).value(), img);
  report.holdout_psnr = holdout.empty() ? 0.0 : total / static_cast<double>(holdout.size());
  return report;
}

}  // namespace fontctl
