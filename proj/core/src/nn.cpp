#include "fontctl/nn.hpp"

#include <cmath>

#include "fontctl/error.hpp"

namespace fontctl::nn {

Var ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw Error("duplicate parameter name: " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, ag::parameter(std::move(init)));
  return items_.back().second;
}

const Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return items_[it->second].second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [name, v] : items_) n += v.value().size();
  return n;
}

void ParamStore::set_trainable(bool on) {
  for (auto& [name, v] : items_) {
    Var handle = v;
    handle.set_requires_grad(on);
  }
}

void ParamStore::zero_grad() {
  for (auto& [name, v] : items_) {
    Var handle = v;
    handle.zero_grad();
  }
}

int ParamStore::copy_values_from(const ParamStore& other, const std::string& from_prefix,
                                 const std::string& to_prefix) {
  int copied = 0;
  for (auto& [name, v] : items_) {
    if (name.compare(0, to_prefix.size(), to_prefix) != 0) continue;
    const std::string source = from_prefix + name.substr(to_prefix.size());
    if (!other.contains(source)) continue;
    const Var& src = other.get(source);
    if (src.shape() != v.shape()) {
      throw ShapeError("copy_values_from: " + source + " " + shape_str(src.shape()) + " vs " + name + " " +
                       shape_str(v.shape()));
    }
    Var handle = v;
    handle.mutable_value() = src.value();
    ++copied;
  }
  return copied;
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
               Rng& rng, bool bias, Init init)
    : stride_(stride), pad_(pad) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * kernel * kernel));
  Tensor w = init == Init::kZero ? Tensor({out_ch, in_ch, kernel, kernel})
                                 : Tensor::uniform({out_ch, in_ch, kernel, kernel}, rng, -bound, bound);
  weight_ = store.add(name + ".w", std::move(w));
  if (bias) {
    Tensor b = init == Init::kZero ? Tensor({out_ch}) : Tensor::uniform({out_ch}, rng, -bound, bound);
    bias_ = store.add(name + ".b", std::move(b));
  }
}

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng, bool bias, Init init) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w = init == Init::kZero ? Tensor({out, in}) : Tensor::uniform({out, in}, rng, -bound, bound);
  weight_ = store.add(name + ".w", std::move(w));
  if (bias) {
    Tensor b = init == Init::kZero ? Tensor({out}) : Tensor::uniform({out}, rng, -bound, bound);
    bias_ = store.add(name + ".b", std::move(b));
  }
}

GroupNorm::GroupNorm(ParamStore& store, const std::string& name, int channels, int groups) : groups_(groups) {
  gamma_ = store.add(name + ".gamma", Tensor({channels}, 1.0));
  beta_ = store.add(name + ".beta", Tensor({channels}, 0.0));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int dim) {
  gamma_ = store.add(name + ".gamma", Tensor({dim}, 1.0));
  beta_ = store.add(name + ".beta", Tensor({dim}, 0.0));
}

void AdamW::step(const ParamStore& params) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (const auto& [name, v] : params.items()) {
    if (!v.requires_grad() || !v.has_grad()) continue;
    Var handle = v;
    Tensor& w = handle.mutable_value();
    const Tensor& g = v.node()->grad;
    auto [mit, m_new] = m_.try_emplace(name, w.shape());
    auto [vit, v_new] = v_.try_emplace(name, w.shape());
    Tensor& m = mit->second;
    Tensor& s = vit->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      s[i] = cfg_.beta2 * s[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = s[i] / bc2;
      w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
  }
}

double grad_norm(const ParamStore& params) {
  double acc = 0.0;
  for (const auto& [name, v] : params.items()) {
    if (!v.requires_grad() || !v.has_grad()) continue;
    for (double g : v.node()->grad.storage()) acc += g * g;
  }
  return std::sqrt(acc);
}

double clip_grad_norm(const ParamStore& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (const auto& [name, v] : params.items()) {
      if (!v.requires_grad() || !v.has_grad()) continue;
      for (double& g : v.node()->grad.storage()) g *= k;
    }
  }
  return norm;
}

}  // namespace fontctl::nn
