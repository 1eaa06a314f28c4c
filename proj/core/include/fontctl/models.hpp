#pragma once

#include <string>
#include <vector>

#include "fontctl/blocks.hpp"

namespace fontctl {

// Byte-level tokenizer: BOS, then printable ASCII, other bytes map to UNK.
// Sequences are truncated to text_len and right-padded with PAD.
struct Tokenizer {
  static constexpr int kPad = 0, kUnk = 1, kBos = 97, kVocab = 98;
  static int token(unsigned char ch) { return (ch >= 32 && ch <= 126) ? ch - 30 : kUnk; }
  // Fills ids ([N*L], row-major) and returns per-row lengths.
  static std::vector<int> encode(const std::vector<std::string>& texts, int len, std::vector<int>& ids);
};

// Embedding + learned positions + one pre-norm self-attention/MLP block.
class TextEncoder {
 public:
  TextEncoder(const ModelDims& d, Rng& rng);
  TextEmbedding operator()(const std::vector<std::string>& prompts) const;

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  ModelDims dims_;
  nn::ParamStore params_;
  Var table_, pos_;
  nn::LayerNorm ln1_, ln2_, ln_out_;
  nn::Linear q_, k_, v_, o_, fc1_, fc2_;
};

// Control features, one per injection point:
//   [0] c x m x n at the denoiser input, [1] width1 x m x n after level 1,
//   [2] width2 x m/2 x n/2 after level 2, [3] width2 x m/2 x n/2 at the
//   bottleneck.
struct ControlFeatures {
  std::vector<Var> z_f;
};

std::vector<Shape> injection_shapes(const ModelDims& d, int batch);

// activation + control, with shape checking. An empty control Var leaves the
// activation untouched.
Var inject(const Var& activation, const Var& control);

// Two-level encoder-decoder noise predictor with prompt cross-attention at
// every level and additive control injection.
class Denoiser {
 public:
  Denoiser(const ModelDims& d, Rng& rng);

  // z_t: [N,c,m,n]; t: N timesteps; z_f may be null.
  Var predict_eps(const Var& z_t, const std::vector<int>& t, const TextEmbedding& c_t,
                  const ControlFeatures* z_f = nullptr) const;

  const ModelDims& dims() const { return dims_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  ModelDims dims_;
  nn::ParamStore params_;
  EncoderStack enc_;
  ResBlock dec2_, dec1_;
  CrossAttention dattn2_, dattn1_;
  nn::Conv2d up_, conv_out_;
  nn::GroupNorm norm_out_;
};

// The control branch: hint encoder, a trunk that mirrors the denoiser
// encoder, and zero-initialized 1x1 output projections.
class ControlNet {
 public:
  ControlNet(const ModelDims& d, Rng& rng);

  // Copies the denoiser encoder weights into the trunk.
  void init_trunk_from(const Denoiser& base);

  // hint: [N,1,H,W] in [0,1].
  ControlFeatures encode_hint(const Var& hint, const Var& z_t, const std::vector<int>& t,
                              const TextEmbedding& c_t) const;

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  ModelDims dims_;
  nn::ParamStore params_;
  std::vector<nn::Conv2d> hint_layers_;
  EncoderStack trunk_;
  nn::Conv2d zp_in_, zp1_, zp2_, zp_mid_;
};

}  // namespace fontctl
