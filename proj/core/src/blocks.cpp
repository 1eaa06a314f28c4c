#include "fontctl/blocks.hpp"

#include <cmath>

#include "fontctl/diffusion.hpp"
#include "fontctl/error.hpp"

namespace fontctl {

ModelDims ModelDims::from(const TrainConfig& cfg) {
  ModelDims d;
  d.image_size = cfg.image_size;
  d.latent_channels = cfg.latent_channels;
  d.latent_size = cfg.latent_size;
  d.width1 = cfg.width1;
  d.width2 = cfg.width2;
  d.groups = cfg.norm_groups;
  d.text_dim = cfg.text_dim;
  d.text_len = cfg.text_len;
  return d;
}

ResBlock::ResBlock(nn::ParamStore& s, const std::string& name, int in, int out, int temb, int groups, Rng& rng)
    : gn1_(s, name + ".gn1", in, groups),
      gn2_(s, name + ".gn2", out, groups),
      conv1_(s, name + ".conv1", in, out, 3, 1, 1, rng),
      conv2_(s, name + ".conv2", out, out, 3, 1, 1, rng),
      temb_proj_(s, name + ".temb", temb, out, rng),
      has_skip_(in != out) {
  if (has_skip_) skip_ = nn::Conv2d(s, name + ".skip", in, out, 1, 1, 0, rng);
}

Var ResBlock::operator()(const Var& x, const Var& temb) const {
  Var h = conv1_(ag::silu(gn1_(x)));
  h = ag::add_channel_vector(h, temb_proj_(ag::silu(temb)));
  h = conv2_(ag::silu(gn2_(h)));
  return ag::add(has_skip_ ? skip_(x) : x, h);
}

CrossAttention::CrossAttention(nn::ParamStore& s, const std::string& name, int channels, int ctx_dim, int groups,
                               Rng& rng)
    : norm_(s, name + ".norm", channels, groups),
      q_(s, name + ".q", channels, channels, rng, false),
      k_(s, name + ".k", ctx_dim, channels, rng, false),
      v_(s, name + ".v", ctx_dim, channels, rng, false),
      out_(s, name + ".out", channels, channels, rng),
      channels_(channels) {}

Var CrossAttention::operator()(const Var& x, const TextEmbedding& ctx) const {
  if (ctx.batch() != x.dim(0)) throw ShapeError("cross-attention: prompt batch does not match activations");
  const int h = x.dim(2), w = x.dim(3);
  Var q = q_(ag::to_tokens(norm_(x)));
  Var k = k_(ctx.values);
  Var v = v_(ctx.values);
  Var scores = ag::scale(ag::bmm(q, ag::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(channels_)));
  Var attn = ag::softmax_last(scores, &ctx.mask);
  return ag::add(x, ag::from_tokens(out_(ag::bmm(attn, v)), h, w));
}

EncoderStack::EncoderStack(nn::ParamStore& s, const std::string& p, const ModelDims& d, Rng& rng)
    : conv_in(s, p + "conv_in", d.latent_channels, d.width1, 3, 1, 1, rng),
      time1(s, p + "time1", d.width1, d.temb_dim(), rng),
      time2(s, p + "time2", d.temb_dim(), d.temb_dim(), rng),
      res1(s, p + "res1", d.width1, d.width1, d.temb_dim(), d.groups, rng),
      res2(s, p + "res2", d.width2, d.width2, d.temb_dim(), d.groups, rng),
      mid(s, p + "mid", d.width2, d.width2, d.temb_dim(), d.groups, rng),
      attn1(s, p + "attn1", d.width1, d.text_dim, d.groups, rng),
      attn2(s, p + "attn2", d.width2, d.text_dim, d.groups, rng),
      down(s, p + "down", d.width1, d.width2, 3, 2, 1, rng),
      temb_in(d.width1) {}

Var EncoderStack::time_embed(const std::vector<int>& t) const {
  return time2(ag::silu(time1(ag::constant(timestep_embedding(t, temb_in)))));
}

}  // namespace fontctl
