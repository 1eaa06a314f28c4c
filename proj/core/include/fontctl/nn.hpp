#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fontctl/autograd.hpp"
#include "fontctl/rng.hpp"

namespace fontctl::nn {

using ag::Var;

// Ordered, named collection of learnable arrays. Layers keep handles to the
// same nodes, so assigning a value here is seen by the layer.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::size_t num_scalars() const;

  void set_trainable(bool on);
  void zero_grad();
  // Copies values for every name present in both stores (shapes must agree).
  // Returns the number of arrays copied.
  int copy_values_from(const ParamStore& other, const std::string& from_prefix, const std::string& to_prefix);

 private:
  std::vector<std::pair<std::string, Var>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class Init { kDefault, kZero };

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng,
         bool bias = true, Init init = Init::kDefault);
  Var operator()(const Var& x) const { return ag::conv2d(x, weight_, bias_, stride_, pad_); }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }
  int out_channels() const { return weight_.dim(0); }

 private:
  Var weight_, bias_;
  int stride_ = 1, pad_ = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng, bool bias = true,
         Init init = Init::kDefault);
  Var operator()(const Var& x) const { return ag::linear(x, weight_, bias_); }

 private:
  Var weight_, bias_;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParamStore& store, const std::string& name, int channels, int groups);
  Var operator()(const Var& x) const { return ag::group_norm(x, gamma_, beta_, groups_); }

 private:
  Var gamma_, beta_;
  int groups_ = 1;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int dim);
  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma_, beta_); }

 private:
  Var gamma_, beta_;
};

// Adam with decoupled weight decay. Moments are keyed by parameter name so
// they can be checkpointed alongside the parameters.
struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Updates every parameter of `params` that requires grad and has one.
  void step(const ParamStore& params);

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long long steps() const { return steps_; }
  void set_steps(long long s) { steps_ = s; }
  std::unordered_map<std::string, Tensor>& first_moments() { return m_; }
  std::unordered_map<std::string, Tensor>& second_moments() { return v_; }
  const std::unordered_map<std::string, Tensor>& first_moments() const { return m_; }
  const std::unordered_map<std::string, Tensor>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  long long steps_ = 0;
  std::unordered_map<std::string, Tensor> m_, v_;
};

// Global L2 norm of the accumulated gradients of the trainable parameters.
double grad_norm(const ParamStore& params);
// Scales gradients so the global norm is at most max_norm; returns the
// pre-clipping norm.
double clip_grad_norm(const ParamStore& params, double max_norm);

}  // namespace fontctl::nn
