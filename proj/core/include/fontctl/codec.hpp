#pragma once

#include <vector>

#include "fontctl/blocks.hpp"

namespace fontctl {

// Image <-> latent map. Images are [N,3,H,W] in [0,1]; latents are
// [N,c,m,n]. Both directions are differentiable.
//
// Analytic mode: encode average-pools by the downsampling factor and maps
// [0,1] to [-1,1] (channels 0..2 carry RGB, extra channels carry luma);
// decode bilinearly upsamples channels 0..2 and maps back. Learned mode is a
// small convolutional autoencoder whose latents are multiplied by
// latent_scale (1 / std over the training corpus).
class Codec {
 public:
  Codec(CodecKind kind, const ModelDims& d, Rng& rng);

  Var encode(const Var& image) const;
  Var decode(const Var& latent) const;

  CodecKind kind() const { return kind_; }
  double latent_scale() const { return scale_; }
  void set_latent_scale(double s) { scale_ = s; }

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  CodecKind kind_;
  ModelDims dims_;
  double scale_ = 1.0;
  nn::ParamStore params_;
  std::vector<nn::Conv2d> enc_, dec_;
};

struct CodecTrainReport {
  double final_loss = 0.0;
  double holdout_psnr = 0.0;
  double latent_scale = 1.0;
};

// Fits the learned codec by pixel MSE with AdamW, then sets latent_scale from
// the latent standard deviation over `images` and reports PSNR on `holdout`.
// Images are [1,3,H,W] tensors.
CodecTrainReport pretrain_codec(Codec& codec, const std::vector<Tensor>& images, const std::vector<Tensor>& holdout,
                                int steps, int batch, double lr, Rng& rng);

double psnr(const Tensor& a, const Tensor& b);

}  // namespace fontctl
