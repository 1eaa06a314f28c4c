#include "fontctl/models.hpp"

#include <cmath>

#include "fontctl/error.hpp"

namespace fontctl {

std::vector<int> Tokenizer::encode(const std::vector<std::string>& texts, int len, std::vector<int>& ids) {
  ids.assign(texts.size() * static_cast<std::size_t>(len), kPad);
  std::vector<int> lengths;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    int* row = ids.data() + i * len;
    row[0] = kBos;
    int n = 1;
    for (unsigned char ch : texts[i]) {
      if (n >= len) break;
      row[n++] = token(ch);
    }
    lengths.push_back(n);
  }
  return lengths;
}

TextEncoder::TextEncoder(const ModelDims& d, Rng& rng) : dims_(d) {
  const int D = d.text_dim;
  table_ = params_.add("text.table", Tensor::randn({Tokenizer::kVocab, D}, rng, 0.5));
  pos_ = params_.add("text.pos", Tensor::randn({d.text_len, D}, rng, 0.1));
  ln1_ = nn::LayerNorm(params_, "text.ln1", D);
  q_ = nn::Linear(params_, "text.q", D, D, rng, false);
  k_ = nn::Linear(params_, "text.k", D, D, rng, false);
  v_ = nn::Linear(params_, "text.v", D, D, rng, false);
  o_ = nn::Linear(params_, "text.o", D, D, rng);
  ln2_ = nn::LayerNorm(params_, "text.ln2", D);
  fc1_ = nn::Linear(params_, "text.fc1", D, 2 * D, rng);
  fc2_ = nn::Linear(params_, "text.fc2", 2 * D, D, rng);
  ln_out_ = nn::LayerNorm(params_, "text.ln_out", D);
}

TextEmbedding TextEncoder::operator()(const std::vector<std::string>& prompts) const {
  const int n = static_cast<int>(prompts.size()), L = dims_.text_len, D = dims_.text_dim;
  if (n == 0) throw InputError("text encoder: empty prompt batch");
  std::vector<int> ids;
  TextEmbedding out;
  out.lengths = Tokenizer::encode(prompts, L, ids);
  out.mask = Tensor({n, L});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < out.lengths[static_cast<std::size_t>(i)]; ++j) out.mask[static_cast<std::size_t>(i) * L + j] = 1.0;

  std::vector<Var> pos_rows(static_cast<std::size_t>(n), ag::reshape(pos_, {1, L, D}));
  Var x = ag::add(ag::embedding(table_, ids, n, L), ag::stack_batch(pos_rows));
  Var h = ln1_(x);
  Var scores = ag::scale(ag::bmm(q_(h), ag::transpose_last2(k_(h))), 1.0 / std::sqrt(static_cast<double>(D)));
  x = ag::add(x, o_(ag::bmm(ag::softmax_last(scores, &out.mask), v_(h))));
  x = ag::add(x, fc2_(ag::silu(fc1_(ln2_(x)))));
  out.values = ln_out_(x);
  return out;
}

std::vector<Shape> injection_shapes(const ModelDims& d, int batch) {
  const int m = d.latent_size, h = m / 2;
  return {{batch, d.latent_channels, m, m}, {batch, d.width1, m, m}, {batch, d.width2, h, h}, {batch, d.width2, h, h}};
}

Var inject(const Var& activation, const Var& control) {
  if (!control) return activation;
  if (activation.shape() != control.shape()) {
    throw ShapeError("inject: control " + shape_str(control.shape()) + " does not match activation " +
                     shape_str(activation.shape()));
  }
  return ag::add(activation, control);
}

Denoiser::Denoiser(const ModelDims& d, Rng& rng) : dims_(d), enc_(params_, "enc.", d, rng) {
  const int w1 = d.width1, w2 = d.width2, te = d.temb_dim();
  dec2_ = ResBlock(params_, "dec2", 2 * w2, w2, te, d.groups, rng);
  dattn2_ = CrossAttention(params_, "dattn2", w2, d.text_dim, d.groups, rng);
  up_ = nn::Conv2d(params_, "up", w2, w1, 3, 1, 1, rng);
  dec1_ = ResBlock(params_, "dec1", 2 * w1, w1, te, d.groups, rng);
  dattn1_ = CrossAttention(params_, "dattn1", w1, d.text_dim, d.groups, rng);
  norm_out_ = nn::GroupNorm(params_, "norm_out", w1, d.groups);
  conv_out_ = nn::Conv2d(params_, "conv_out", w1, d.latent_channels, 3, 1, 1, rng);
}

Var Denoiser::predict_eps(const Var& z_t, const std::vector<int>& t, const TextEmbedding& c_t,
                          const ControlFeatures* z_f) const {
  const int n = z_t.dim(0);
  const Shape want{n, dims_.latent_channels, dims_.latent_size, dims_.latent_size};
  if (z_t.shape() != want) throw ShapeError("predict_eps: z_t " + shape_str(z_t.shape()) + ", expected " + shape_str(want));
  if (static_cast<int>(t.size()) != n) throw ShapeError("predict_eps: need one timestep per sample");
  if (z_f && z_f->z_f.size() != 4) throw ShapeError("predict_eps: expected 4 control features");
  auto ctl = [&](int i) { return z_f ? z_f->z_f[static_cast<std::size_t>(i)] : Var(); };

  const Var temb = enc_.time_embed(t);
  Var x = enc_.conv_in(inject(z_t, ctl(0)));
  Var h1 = inject(enc_.attn1(enc_.res1(x, temb), c_t), ctl(1));
  Var h2 = inject(enc_.attn2(enc_.res2(enc_.down(h1), temb), c_t), ctl(2));
  Var hm = inject(enc_.mid(h2, temb), ctl(3));
  Var d2 = dattn2_(dec2_(ag::concat_channels(hm, h2), temb), c_t);
  Var u = up_(ag::upsample_nearest(d2, 2));
  Var d1 = dattn1_(dec1_(ag::concat_channels(u, h1), temb), c_t);
  return conv_out_(ag::silu(norm_out_(d1)));
}

ControlNet::ControlNet(const ModelDims& d, Rng& rng) : dims_(d) {
  const int f = d.factor();
  int ch = 16;
  hint_layers_.emplace_back(params_, "hint.0", 3, ch, 3, 1, 1, rng);
  int i = 1;
  for (int s = f; s > 1; s /= 2, ++i) {
    hint_layers_.emplace_back(params_, "hint." + std::to_string(i), ch, 32, 3, 2, 1, rng);
    ch = 32;
  }
  hint_layers_.emplace_back(params_, "hint." + std::to_string(i), ch, d.width1, 3, 1, 1, rng);
  trunk_ = EncoderStack(params_, "trunk.", d, rng);
  zp_in_ = nn::Conv2d(params_, "zp_in", d.width1, d.latent_channels, 1, 1, 0, rng, true, nn::Init::kZero);
  zp1_ = nn::Conv2d(params_, "zp1", d.width1, d.width1, 1, 1, 0, rng, true, nn::Init::kZero);
  zp2_ = nn::Conv2d(params_, "zp2", d.width2, d.width2, 1, 1, 0, rng, true, nn::Init::kZero);
  zp_mid_ = nn::Conv2d(params_, "zp_mid", d.width2, d.width2, 1, 1, 0, rng, true, nn::Init::kZero);
}

void ControlNet::init_trunk_from(const Denoiser& base) {
  const int copied = params_.copy_values_from(base.params(), "enc.", "trunk.");
  if (copied == 0) throw Error("control trunk: no encoder weights to copy");
}

ControlFeatures ControlNet::encode_hint(const Var& hint, const Var& z_t, const std::vector<int>& t,
                                        const TextEmbedding& c_t) const {
  const Shape want{z_t.dim(0), 1, dims_.image_size, dims_.image_size};
  if (hint.shape() != want) throw ShapeError("encode_hint: hint " + shape_str(hint.shape()) + ", expected " + shape_str(want));
  Var h = ag::repeat_channels(hint, 3);
  for (std::size_t i = 0; i < hint_layers_.size(); ++i) {
    h = hint_layers_[i](h);
    if (i + 1 < hint_layers_.size()) h = ag::silu(h);
  }
  const Var temb = trunk_.time_embed(t);
  Var x = ag::add(trunk_.conv_in(z_t), h);
  Var h1 = trunk_.attn1(trunk_.res1(x, temb), c_t);
  Var h2 = trunk_.attn2(trunk_.res2(trunk_.down(h1), temb), c_t);
  Var hm = trunk_.mid(h2, temb);
  return ControlFeatures{{zp_in_(h), zp1_(h1), zp2_(h2), zp_mid_(hm)}};
}

}  // namespace fontctl
