#pragma once

#include <string>
#include <vector>

#include "fontctl/config.hpp"
#include "fontctl/nn.hpp"

namespace fontctl {

using ag::Var;

// Sizes shared by the denoiser, the control branch and the text encoder.
struct ModelDims {
  int image_size = 64;
  int latent_channels = 4;  // c
  int latent_size = 8;      // m = n
  int width1 = 32;
  int width2 = 64;
  int groups = 8;
  int text_dim = 32;
  int text_len = 32;

  static ModelDims from(const TrainConfig& cfg);
  int factor() const { return image_size / latent_size; }
  int temb_dim() const { return width2; }
};

// Character-level prompt encoding: values [N,L,d], mask [N,L] (1 = token).
struct TextEmbedding {
  Var values;
  Tensor mask;
  std::vector<int> lengths;
  int batch() const { return values.dim(0); }
};

class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(nn::ParamStore& s, const std::string& name, int in, int out, int temb, int groups, Rng& rng);
  Var operator()(const Var& x, const Var& temb) const;

 private:
  nn::GroupNorm gn1_, gn2_;
  nn::Conv2d conv1_, conv2_, skip_;
  nn::Linear temb_proj_;
  bool has_skip_ = false;
};

// Single-head attention from spatial positions to the prompt tokens, with a
// residual connection.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(nn::ParamStore& s, const std::string& name, int channels, int ctx_dim, int groups, Rng& rng);
  Var operator()(const Var& x, const TextEmbedding& ctx) const;

 private:
  nn::GroupNorm norm_;
  nn::Linear q_, k_, v_, out_;
  int channels_ = 0;
};

// The encoder half of the denoiser. The control branch builds a second copy
// under its own prefix and initializes it from the base weights.
struct EncoderStack {
  EncoderStack() = default;
  EncoderStack(nn::ParamStore& s, const std::string& prefix, const ModelDims& d, Rng& rng);

  nn::Conv2d conv_in;
  nn::Linear time1, time2;
  ResBlock res1, res2, mid;
  CrossAttention attn1, attn2;
  nn::Conv2d down;
  int temb_in = 0;

  Var time_embed(const std::vector<int>& t) const;
};

}  // namespace fontctl
