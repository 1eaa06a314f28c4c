#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fontctl/tensor.hpp"

// Minimal reverse-mode automatic differentiation over Tensor values.
//
// A Var is a handle to a graph node. Operations on Vars whose inputs require
// gradients record a backward closure; calling backward() on a scalar result
// accumulates gradients into every reachable node that requires them.
namespace fontctl::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // grad += g, allocating on first use.
  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Zero tensor of the value's shape when no gradient has been accumulated.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  // Scalar value of a single-element Var.
  double item() const;

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds a result node. The backward closure is recorded only when grad mode
// is on and at least one input requires gradients.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

// Seeds d(root)/d(root) = 1 and propagates. root must hold one element.
void backward(const Var& root);

// --- elementwise ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var silu(const Var& a);
Var relu(const Var& a);
// Gradient passes only where lo < a < hi.
Var clamp(const Var& a, double lo, double hi);
Var sigmoid(const Var& a);
Var tanh(const Var& a);

// --- reductions and losses ---
Var sum(const Var& a);
Var mean(const Var& a);
// Mean of squared differences over all elements.
Var mse(const Var& a, const Var& b);

// --- shape ---
Var reshape(const Var& a, Shape shape);
// NCHW concat along channels.
Var concat_channels(const Var& a, const Var& b);
// Rows [begin, begin+count) of dimension 0.
Var slice_batch(const Var& a, int begin, int count);
// Channels [begin, begin+count) of an NCHW tensor.
Var slice_channels(const Var& a, int begin, int count);
// [N,C,H,W] -> [N,W,C*H]: one feature vector per image column.
Var columns(const Var& x);
// Concatenation along dimension 0.
Var stack_batch(std::span<const Var> parts);
// [N,C,H,W] -> [N,H*W,C] and back.
Var to_tokens(const Var& x);
Var from_tokens(const Var& t, int height, int width);
// [N,1,H,W] -> [N,C,H,W] by copying the single channel.
Var repeat_channels(const Var& x, int channels);
// [N,C,H,W] + v[N,C] broadcast over space.
Var add_channel_vector(const Var& x, const Var& v);
// [N,T,F] -> [N,F] at time t, and the inverse stacking.
Var select_time(const Var& x, int t);
Var stack_time(std::span<const Var> steps);
// Columns [begin, begin+count) of the last dimension.
Var slice_last(const Var& x, int begin, int count);
Var concat_last(const Var& a, const Var& b);

// --- convolution and resampling (NCHW) ---
// w: [Co, Ci, k, k]; b: [Co] or an empty Var.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample_nearest(const Var& x, int factor);
Var avg_pool(const Var& x, int factor);

// Sparse linear map from an input plane to an output plane, applied to every
// channel of one batch element. Used for crop-and-resize.
struct ResamplePlan {
  struct Tap {
    int index = 0;
    double weight = 0.0;
  };
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  int taps_per_output = 4;
  std::vector<Tap> taps;  // out_h * out_w * taps_per_output
};

// Bilinear (half-pixel centers, edge clamped) resize of the crop
// [y0, y0+h) x [x0, x0+w) of an in_h x in_w plane to out_h x out_w.
ResamplePlan bilinear_crop_plan(int in_h, int in_w, int y0, int x0, int h, int w, int out_h, int out_w);
// Applies the plan to batch element n of x, producing [1, C, out_h, out_w].
Var resample(const Var& x, int n, const ResamplePlan& plan);

// --- normalization ---
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// --- dense ---
// x: [..., in]; w: [out, in]; b: [out] or empty.
Var linear(const Var& x, const Var& w, const Var& b);
// [B,M,K] x [B,K,N] -> [B,M,N]
Var bmm(const Var& a, const Var& b);
Var transpose_last2(const Var& a);
// Softmax over the last dimension of [B,M,N]. key_mask (optional, [B,N]) marks
// valid keys with 1; masked keys get probability 0.
Var softmax_last(const Var& a, const Tensor* key_mask = nullptr);
// ids: [N,L] token indices into table [V,D] -> [N,L,D].
Var embedding(const Var& table, const std::vector<int>& ids, int n, int len);

// --- sequence loss ---
// Connectionist temporal classification, blank = 0. logits: [N,T,K].
// input_lengths[i] <= T limits the usable frames of sample i. Returns the mean
// negative log-likelihood over samples; samples whose label cannot fit in
// their frames contribute zero and are counted in *infeasible when given.
Var ctc_loss(const Var& logits, const std::vector<std::vector<int>>& labels,
             const std::vector<int>& input_lengths, int* infeasible = nullptr);

}  // namespace fontctl::ag
