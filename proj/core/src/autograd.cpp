#include "fontctl/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "fontctl/error.hpp"

namespace fontctl::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

// Input i of a node when it wants gradients, else nullptr.
Node* wants(Node& self, std::size_t i) {
  if (i >= self.inputs.size()) return nullptr;
  Node* n = self.inputs[i].get();
  return (n && n->requires_grad) ? n : nullptr;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(std::move(y), {a}, [df](Node& self) {
    Node* in = wants(self, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    const Tensor& x = in->value;
    const Tensor& y = self.value;
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * df(x[i], y[i]);
  });
}

void im2col(const double* x, int channels, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* col) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* out = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            out[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, int channels, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* x) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (static_cast<std::size_t>(c) * h + iy) * w;
          const double* in = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

double log_add(double a, double b) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  Tensor& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!node_) return Tensor();
  if (node_->grad.empty()) return Tensor(node_->value.shape());
  return node_->grad;
}

double Var::item() const {
  if (value().size() != 1) throw ShapeError("item() on non-scalar of shape " + shape_str(shape()));
  return value()[0];
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const Var& v : inputs) node->inputs.push_back(v.node());
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root) return;
  if (root.value().size() != 1) throw ShapeError("backward() needs a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    if (Node* in = wants(self, 0)) in->accumulate(self.grad);
    if (Node* in = wants(self, 1)) in->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    if (Node* in = wants(self, 0)) in->accumulate(self.grad);
    if (Node* in = wants(self, 1)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (Node* in = wants(self, 1)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.storage()) v *= s;
  return make_result(std::move(y), {a}, [s](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.storage()) v += s;
  return make_result(std::move(y), {a}, [](Node& self) {
    if (Node* in = wants(self, 0)) in->accumulate(self.grad);
  });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// ----------------------------------------------------------------- reductions

Var sum(const Var& a) {
  return make_result(Tensor({1}, a.value().sum()), {a}, [](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      const double d = self.grad[0];
      for (double& v : g.storage()) v += d;
    }
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_result(Tensor({1}, a.value().sum() / n), {a}, [n](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      const double d = self.grad[0] / n;
      for (double& v : g.storage()) v += d;
    }
  });
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a, b, "mse");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  const double n = static_cast<double>(av.size());
  return make_result(Tensor({1}, acc / n), {a, b}, [n](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    const double k = 2.0 * self.grad[0] / n;
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (av[i] - bv[i]);
    }
    if (Node* in = wants(self, 1)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (av[i] - bv[i]);
    }
  });
}

// ---------------------------------------------------------------------- shape

Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return make_result(std::move(y), {a}, [](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  if (b.dim(0) != n || b.dim(2) != h || b.dim(3) != w) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor y({n, ca + cb, h, w});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * plane, ca * plane, y.data() + i * (ca + cb) * plane);
    std::copy_n(b.value().data() + i * cb * plane, cb * plane, y.data() + (i * (ca + cb) + ca) * plane);
  }
  return make_result(std::move(y), {a, b}, [n, ca, cb, plane](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca * plane; ++j) g[i * ca * plane + j] += self.grad[i * (ca + cb) * plane + j];
    }
    if (Node* in = wants(self, 1)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb * plane; ++j)
          g[i * cb * plane + j] += self.grad[(i * (ca + cb) + ca) * plane + j];
    }
  });
}

Var slice_batch(const Var& a, int begin, int count) {
  const int n = a.dim(0);
  if (begin < 0 || count < 0 || begin + count > n) throw ShapeError("slice_batch out of range");
  Shape s = a.shape();
  s[0] = count;
  const std::size_t row = a.value().size() / static_cast<std::size_t>(n);
  Tensor y(s);
  std::copy_n(a.value().data() + begin * row, count * row, y.data());
  return make_result(std::move(y), {a}, [begin, row](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t j = 0; j < self.grad.size(); ++j) g[begin * row + j] += self.grad[j];
    }
  });
}

Var slice_channels(const Var& a, int begin, int count) {
  require_rank(a, 4, "slice_channels");
  const int n = a.dim(0), c = a.dim(1);
  if (begin < 0 || count < 0 || begin + count > c) throw ShapeError("slice_channels out of range");
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor y({n, count, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i)
    std::copy_n(a.value().data() + (static_cast<std::size_t>(i) * c + begin) * plane, count * plane,
                y.data() + static_cast<std::size_t>(i) * count * plane);
  return make_result(std::move(y), {a}, [=](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count * plane; ++j)
          g[(static_cast<std::size_t>(i) * c + begin) * plane + j] += self.grad[static_cast<std::size_t>(i) * count * plane + j];
    }
  });
}

Var columns(const Var& x) {
  require_rank(x, 4, "columns");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n, w, c * h});
  auto src = [=](int i, int ch, int row, int col) { return ((static_cast<std::size_t>(i) * c + ch) * h + row) * w + col; };
  auto dst = [=](int i, int col, int ch, int row) { return (static_cast<std::size_t>(i) * w + col) * (c * h) + ch * h + row; };
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int row = 0; row < h; ++row)
        for (int col = 0; col < w; ++col) y[dst(i, col, ch, row)] = x.value()[src(i, ch, row, col)];
  return make_result(std::move(y), {x}, [=](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int row = 0; row < h; ++row)
            for (int col = 0; col < w; ++col) g[src(i, ch, row, col)] += self.grad[dst(i, col, ch, row)];
    }
  });
}

Var stack_batch(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("stack_batch of nothing");
  Shape s = parts[0].shape();
  int total = 0;
  for (const Var& p : parts) {
    Shape q = p.shape();
    if (q.size() != s.size()) throw ShapeError("stack_batch rank mismatch");
    for (std::size_t d = 1; d < s.size(); ++d)
      if (q[d] != s[d]) throw ShapeError("stack_batch: " + shape_str(q) + " vs " + shape_str(s));
    total += q[0];
  }
  s[0] = total;
  Tensor y(s);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    std::copy_n(p.value().data(), p.value().size(), y.data() + off);
    off += p.value().size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_result(std::move(y), std::move(inputs), [offsets](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (Node* in = wants(self, k)) {
        Tensor& g = in->grad_buffer();
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad[offsets[k] + j];
      }
    }
  });
}

Var to_tokens(const Var& x) {
  require_rank(x, 4, "to_tokens");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y({n, hw, c});
  const Tensor& v = x.value();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p) y[(static_cast<std::size_t>(i) * hw + p) * c + ch] = v[(static_cast<std::size_t>(i) * c + ch) * hw + p];
  return make_result(std::move(y), {x}, [n, c, hw](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int p = 0; p < hw; ++p)
            g[(static_cast<std::size_t>(i) * c + ch) * hw + p] += self.grad[(static_cast<std::size_t>(i) * hw + p) * c + ch];
    }
  });
}

Var from_tokens(const Var& t, int height, int width) {
  require_rank(t, 3, "from_tokens");
  const int n = t.dim(0), hw = t.dim(1), c = t.dim(2);
  if (hw != height * width) throw ShapeError("from_tokens: token count does not match spatial size");
  Tensor y({n, c, height, width});
  const Tensor& v = t.value();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p) y[(static_cast<std::size_t>(i) * c + ch) * hw + p] = v[(static_cast<std::size_t>(i) * hw + p) * c + ch];
  return make_result(std::move(y), {t}, [n, c, hw](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int p = 0; p < hw; ++p)
            g[(static_cast<std::size_t>(i) * hw + p) * c + ch] += self.grad[(static_cast<std::size_t>(i) * c + ch) * hw + p];
    }
  });
}

Var repeat_channels(const Var& x, int channels) {
  require_rank(x, 4, "repeat_channels");
  if (x.dim(1) != 1) throw ShapeError("repeat_channels expects a single-channel input");
  const int n = x.dim(0);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y({n, channels, x.dim(2), x.dim(3)});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < channels; ++c)
      std::copy_n(x.value().data() + i * plane, plane, y.data() + (static_cast<std::size_t>(i) * channels + c) * plane);
  return make_result(std::move(y), {x}, [n, channels, plane](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < channels; ++c)
          for (std::size_t p = 0; p < plane; ++p)
            g[i * plane + p] += self.grad[(static_cast<std::size_t>(i) * channels + c) * plane + p];
    }
  });
}

Var add_channel_vector(const Var& x, const Var& v) {
  require_rank(x, 4, "add_channel_vector");
  const int n = x.dim(0), c = x.dim(1);
  if (v.value().size() != static_cast<std::size_t>(n) * c) {
    throw ShapeError("add_channel_vector: vector " + shape_str(v.shape()) + " vs " + shape_str(x.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y = x.value();
  for (std::size_t k = 0; k < static_cast<std::size_t>(n) * c; ++k)
    for (std::size_t p = 0; p < plane; ++p) y[k * plane + p] += v.value()[k];
  return make_result(std::move(y), {x, v}, [n, c, plane](Node& self) {
    if (Node* in = wants(self, 0)) in->accumulate(self.grad);
    if (Node* in = wants(self, 1)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t k = 0; k < static_cast<std::size_t>(n) * c; ++k) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += self.grad[k * plane + p];
        g[k] += s;
      }
    }
  });
}

Var select_time(const Var& x, int t) {
  require_rank(x, 3, "select_time");
  const int n = x.dim(0), steps = x.dim(1), f = x.dim(2);
  if (t < 0 || t >= steps) throw ShapeError("select_time out of range");
  Tensor y({n, f});
  for (int i = 0; i < n; ++i)
    std::copy_n(x.value().data() + (static_cast<std::size_t>(i) * steps + t) * f, f, y.data() + static_cast<std::size_t>(i) * f);
  return make_result(std::move(y), {x}, [n, steps, f, t](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < f; ++j) g[(static_cast<std::size_t>(i) * steps + t) * f + j] += self.grad[static_cast<std::size_t>(i) * f + j];
    }
  });
}

Var stack_time(std::span<const Var> steps) {
  if (steps.empty()) throw ShapeError("stack_time of nothing");
  const int n = steps[0].dim(0), f = steps[0].dim(1);
  const int t_count = static_cast<int>(steps.size());
  Tensor y({n, t_count, f});
  for (int t = 0; t < t_count; ++t) {
    if (steps[t].dim(0) != n || steps[t].dim(1) != f) throw ShapeError("stack_time shape mismatch");
    for (int i = 0; i < n; ++i)
      std::copy_n(steps[t].value().data() + static_cast<std::size_t>(i) * f, f,
                  y.data() + (static_cast<std::size_t>(i) * t_count + t) * f);
  }
  std::vector<Var> inputs(steps.begin(), steps.end());
  return make_result(std::move(y), std::move(inputs), [n, f, t_count](Node& self) {
    for (int t = 0; t < t_count; ++t) {
      if (Node* in = wants(self, t)) {
        Tensor& g = in->grad_buffer();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < f; ++j)
            g[static_cast<std::size_t>(i) * f + j] += self.grad[(static_cast<std::size_t>(i) * t_count + t) * f + j];
      }
    }
  });
}

Var slice_last(const Var& x, int begin, int count) {
  const int f = x.dim(-1);
  if (begin < 0 || count < 0 || begin + count > f) throw ShapeError("slice_last out of range");
  const std::size_t rows = x.value().size() / static_cast<std::size_t>(f);
  Shape s = x.shape();
  s.back() = count;
  Tensor y(s);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.value().data() + r * f + begin, count, y.data() + r * count);
  return make_result(std::move(y), {x}, [rows, f, begin, count](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < count; ++j) g[r * f + begin + j] += self.grad[r * count + j];
    }
  });
}

Var concat_last(const Var& a, const Var& b) {
  const int fa = a.dim(-1), fb = b.dim(-1);
  const std::size_t rows = a.value().size() / static_cast<std::size_t>(fa);
  if (b.value().size() / static_cast<std::size_t>(fb) != rows) throw ShapeError("concat_last row mismatch");
  Shape s = a.shape();
  s.back() = fa + fb;
  Tensor y(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().data() + r * fa, fa, y.data() + r * (fa + fb));
    std::copy_n(b.value().data() + r * fb, fb, y.data() + r * (fa + fb) + fa);
  }
  return make_result(std::move(y), {a, b}, [rows, fa, fb](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < fa; ++j) g[r * fa + j] += self.grad[r * (fa + fb) + j];
    }
    if (Node* in = wants(self, 1)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < fb; ++j) g[r * fb + j] += self.grad[r * (fa + fb) + fa + j];
    }
  });
}

// ---------------------------------------------------------------- convolution

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci || w.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not fit input " + shape_str(x.shape()));
  }
  if (b && b.value().size() != static_cast<std::size_t>(co)) throw ShapeError("conv2d: bias size mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel");
  const int kk = ci * k * k;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  const std::size_t in_size = static_cast<std::size_t>(ci) * h * wd;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  Tensor y({n, co, ho, wo});
  AlignedVector col(pointwise ? 0 : static_cast<std::size_t>(kk) * out_plane);
  ConstMapMat wm(w.value().data(), co, kk);
  for (int i = 0; i < n; ++i) {
    const double* xi = x.value().data() + i * in_size;
    if (!pointwise) im2col(xi, ci, h, wd, k, stride, pad, ho, wo, col.data());
    ConstMapMat cm(pointwise ? xi : col.data(), kk, static_cast<Eigen::Index>(out_plane));
    MapMat ym(y.data() + i * co * out_plane, co, static_cast<Eigen::Index>(out_plane));
    ym.noalias() = wm * cm;
    if (b) {
      for (int c = 0; c < co; ++c) ym.row(c).array() += b.value()[c];
    }
  }

  return make_result(std::move(y), {x, w, b}, [=](Node& self) {
    Node* gx = wants(self, 0);
    Node* gw = wants(self, 1);
    Node* gb = wants(self, 2);
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    ConstMapMat wm(wv.data(), co, kk);
    AlignedVector col(pointwise ? 0 : static_cast<std::size_t>(kk) * out_plane);
    AlignedVector dcol(static_cast<std::size_t>(kk) * out_plane);
    for (int i = 0; i < n; ++i) {
      ConstMapMat dy(self.grad.data() + i * co * out_plane, co, static_cast<Eigen::Index>(out_plane));
      const double* xi = xv.data() + i * in_size;
      if (gw) {
        if (!pointwise) im2col(xi, ci, h, wd, k, stride, pad, ho, wo, col.data());
        ConstMapMat cm(pointwise ? xi : col.data(), kk, static_cast<Eigen::Index>(out_plane));
        MapMat dw(gw->grad_buffer().data(), co, kk);
        dw.noalias() += dy * cm.transpose();
      }
      if (gb) {
        Tensor& g = gb->grad_buffer();
        for (int c = 0; c < co; ++c) g[c] += dy.row(c).sum();
      }
      if (gx) {
        double* dxi = gx->grad_buffer().data() + i * in_size;
        if (pointwise) {
          MapMat dx(dxi, kk, static_cast<Eigen::Index>(out_plane));
          dx.noalias() += wm.transpose() * dy;
        } else {
          MapMat dc(dcol.data(), kk, static_cast<Eigen::Index>(out_plane));
          dc.noalias() = wm.transpose() * dy;
          col2im(dcol.data(), ci, h, wd, k, stride, pad, ho, wo, dxi);
        }
      }
    }
  });
}

Var upsample_nearest(const Var& x, int factor) {
  require_rank(x, 4, "upsample_nearest");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * factor, wo = w * factor;
  Tensor y({n, c, ho, wo});
  for (int p = 0; p < n * c; ++p)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        y[(static_cast<std::size_t>(p) * ho + oy) * wo + ox] =
            x.value()[(static_cast<std::size_t>(p) * h + oy / factor) * w + ox / factor];
  return make_result(std::move(y), {x}, [=](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int p = 0; p < n * c; ++p)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox)
            g[(static_cast<std::size_t>(p) * h + oy / factor) * w + ox / factor] +=
                self.grad[(static_cast<std::size_t>(p) * ho + oy) * wo + ox];
    }
  });
}

Var avg_pool(const Var& x, int factor) {
  require_rank(x, 4, "avg_pool");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % factor != 0 || w % factor != 0) throw ShapeError("avg_pool: size not divisible by factor");
  const int ho = h / factor, wo = w / factor;
  const double inv = 1.0 / (factor * factor);
  Tensor y({n, c, ho, wo});
  for (int p = 0; p < n * c; ++p)
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix)
        y[(static_cast<std::size_t>(p) * ho + iy / factor) * wo + ix / factor] +=
            x.value()[(static_cast<std::size_t>(p) * h + iy) * w + ix] * inv;
  return make_result(std::move(y), {x}, [=](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int p = 0; p < n * c; ++p)
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < w; ++ix)
            g[(static_cast<std::size_t>(p) * h + iy) * w + ix] +=
                self.grad[(static_cast<std::size_t>(p) * ho + iy / factor) * wo + ix / factor] * inv;
    }
  });
}

ResamplePlan bilinear_crop_plan(int in_h, int in_w, int y0, int x0, int h, int w, int out_h, int out_w) {
  if (h <= 0 || w <= 0 || out_h <= 0 || out_w <= 0) throw ShapeError("bilinear_crop_plan: empty geometry");
  if (y0 < 0 || x0 < 0 || y0 + h > in_h || x0 + w > in_w) throw ShapeError("bilinear_crop_plan: crop outside plane");
  ResamplePlan plan;
  plan.in_h = in_h;
  plan.in_w = in_w;
  plan.out_h = out_h;
  plan.out_w = out_w;
  plan.taps.resize(static_cast<std::size_t>(out_h) * out_w * 4);
  auto axis = [](int o, int in_len, int out_len, int& lo, int& hi, double& frac) {
    double s = (o + 0.5) * static_cast<double>(in_len) / out_len - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_len - 1));
    lo = static_cast<int>(std::floor(s));
    hi = std::min(lo + 1, in_len - 1);
    frac = s - lo;
  };
  for (int oy = 0; oy < out_h; ++oy) {
    int ylo = 0, yhi = 0;
    double fy = 0.0;
    axis(oy, h, out_h, ylo, yhi, fy);
    for (int ox = 0; ox < out_w; ++ox) {
      int xlo = 0, xhi = 0;
      double fx = 0.0;
      axis(ox, w, out_w, xlo, xhi, fx);
      auto* t = &plan.taps[(static_cast<std::size_t>(oy) * out_w + ox) * 4];
      t[0] = {(y0 + ylo) * in_w + x0 + xlo, (1 - fy) * (1 - fx)};
      t[1] = {(y0 + ylo) * in_w + x0 + xhi, (1 - fy) * fx};
      t[2] = {(y0 + yhi) * in_w + x0 + xlo, fy * (1 - fx)};
      t[3] = {(y0 + yhi) * in_w + x0 + xhi, fy * fx};
    }
  }
  return plan;
}

Var resample(const Var& x, int n, const ResamplePlan& plan) {
  require_rank(x, 4, "resample");
  const int c = x.dim(1);
  if (x.dim(2) != plan.in_h || x.dim(3) != plan.in_w) throw ShapeError("resample: plan does not match input");
  if (n < 0 || n >= x.dim(0)) throw ShapeError("resample: batch index out of range");
  const std::size_t in_plane = static_cast<std::size_t>(plan.in_h) * plan.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(plan.out_h) * plan.out_w;
  const int tpo = plan.taps_per_output;
  Tensor y({1, c, plan.out_h, plan.out_w});
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.value().data() + (static_cast<std::size_t>(n) * c + ch) * in_plane;
    double* dst = y.data() + ch * out_plane;
    for (std::size_t o = 0; o < out_plane; ++o) {
      double acc = 0.0;
      for (int k = 0; k < tpo; ++k) {
        const auto& tap = plan.taps[o * tpo + k];
        acc += tap.weight * src[tap.index];
      }
      dst[o] = acc;
    }
  }
  return make_result(std::move(y), {x}, [plan, n, c, in_plane, out_plane, tpo](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int ch = 0; ch < c; ++ch) {
        double* dst = g.data() + (static_cast<std::size_t>(n) * c + ch) * in_plane;
        const double* dy = self.grad.data() + ch * out_plane;
        for (std::size_t o = 0; o < out_plane; ++o)
          for (int k = 0; k < tpo; ++k) {
            const auto& tap = plan.taps[o * tpo + k];
            dst[tap.index] += tap.weight * dy[o];
          }
      }
    }
  });
}

// -------------------------------------------------------------- normalization

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  require_rank(x, 4, "group_norm");
  const int n = x.dim(0), c = x.dim(1);
  if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int cpg = c / groups;
  const std::size_t m = cpg * plane;
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(static_cast<std::size_t>(n) * groups);
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + g * cpg) * plane;
      double mu = 0.0;
      for (std::size_t j = 0; j < m; ++j) mu += x.value()[base + j];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double d = x.value()[base + j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double r = 1.0 / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(i) * groups + g] = r;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t idx = base + cc * plane + p;
          xhat[idx] = (x.value()[idx] - mu) * r;
          y[idx] = xhat[idx] * gamma.value()[ch] + beta.value()[ch];
        }
      }
    }
  }
  return make_result(std::move(y), {x, gamma, beta}, [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
    const Tensor& gv = self.inputs[1]->value;
    Node* gx = wants(self, 0);
    Node* gg = wants(self, 1);
    Node* gb = wants(self, 2);
    for (int i = 0; i < n; ++i) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t base = (static_cast<std::size_t>(i) * c + g * cpg) * plane;
        double sum_d = 0.0, sum_dx = 0.0;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t idx = base + cc * plane + p;
            const double dy = self.grad[idx];
            const double d = dy * gv[ch];
            sum_d += d;
            sum_dx += d * xhat[idx];
            if (gg) gg->grad_buffer()[ch] += dy * xhat[idx];
            if (gb) gb->grad_buffer()[ch] += dy;
          }
        }
        if (gx) {
          Tensor& dx = gx->grad_buffer();
          const double r = rstd[static_cast<std::size_t>(i) * groups + g];
          const double inv_m = 1.0 / static_cast<double>(m);
          for (int cc = 0; cc < cpg; ++cc) {
            const int ch = g * cpg + cc;
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t idx = base + cc * plane + p;
              const double d = self.grad[idx] * gv[ch];
              dx[idx] += r * (d - inv_m * sum_d - xhat[idx] * inv_m * sum_dx);
            }
          }
        }
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int d = x.dim(-1);
  const std::size_t rows = x.value().size() / static_cast<std::size_t>(d);
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      y[r * d + j] = xhat[r * d + j] * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_result(std::move(y), {x, gamma, beta}, [=, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
    const Tensor& gv = self.inputs[1]->value;
    Node* gx = wants(self, 0);
    Node* gg = wants(self, 1);
    Node* gb = wants(self, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum_d = 0.0, sum_dx = 0.0;
      for (int j = 0; j < d; ++j) {
        const double dy = self.grad[r * d + j];
        const double dd = dy * gv[j];
        sum_d += dd;
        sum_dx += dd * xhat[r * d + j];
        if (gg) gg->grad_buffer()[j] += dy * xhat[r * d + j];
        if (gb) gb->grad_buffer()[j] += dy;
      }
      if (gx) {
        Tensor& dx = gx->grad_buffer();
        for (int j = 0; j < d; ++j) {
          const double dd = self.grad[r * d + j] * gv[j];
          dx[r * d + j] += rstd[r] * (dd - sum_d / d - xhat[r * d + j] * sum_dx / d);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------- dense

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(w, 2, "linear weight");
  const int in = x.dim(-1), out = w.dim(0);
  if (w.dim(1) != in) throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const auto rows = static_cast<Eigen::Index>(x.value().size() / static_cast<std::size_t>(in));
  Shape s = x.shape();
  s.back() = out;
  Tensor y(s);
  ConstMapMat xm(x.value().data(), rows, in);
  ConstMapMat wm(w.value().data(), out, in);
  MapMat ym(y.data(), rows, out);
  ym.noalias() = xm * wm.transpose();
  if (b) {
    for (Eigen::Index r = 0; r < rows; ++r)
      for (int j = 0; j < out; ++j) ym(r, j) += b.value()[j];
  }
  return make_result(std::move(y), {x, w, b}, [rows, in, out](Node& self) {
    ConstMapMat dy(self.grad.data(), rows, out);
    if (Node* gx = wants(self, 0)) {
      ConstMapMat wm(self.inputs[1]->value.data(), out, in);
      MapMat dx(gx->grad_buffer().data(), rows, in);
      dx.noalias() += dy * wm;
    }
    if (Node* gw = wants(self, 1)) {
      ConstMapMat xm(self.inputs[0]->value.data(), rows, in);
      MapMat dw(gw->grad_buffer().data(), out, in);
      dw.noalias() += dy.transpose() * xm;
    }
    if (Node* gb = wants(self, 2)) {
      Tensor& g = gb->grad_buffer();
      for (Eigen::Index r = 0; r < rows; ++r)
        for (int j = 0; j < out; ++j) g[j] += dy(r, j);
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), nn = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k) throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor y({bs, m, nn});
  for (int i = 0; i < bs; ++i) {
    MapMat(y.data() + static_cast<std::size_t>(i) * m * nn, m, nn).noalias() =
        ConstMapMat(a.value().data() + static_cast<std::size_t>(i) * m * k, m, k) *
        ConstMapMat(b.value().data() + static_cast<std::size_t>(i) * k * nn, k, nn);
  }
  return make_result(std::move(y), {a, b}, [bs, m, k, nn](Node& self) {
    Node* ga = wants(self, 0);
    Node* gb = wants(self, 1);
    for (int i = 0; i < bs; ++i) {
      ConstMapMat dy(self.grad.data() + static_cast<std::size_t>(i) * m * nn, m, nn);
      if (ga) {
        MapMat(ga->grad_buffer().data() + static_cast<std::size_t>(i) * m * k, m, k).noalias() +=
            dy * ConstMapMat(self.inputs[1]->value.data() + static_cast<std::size_t>(i) * k * nn, k, nn).transpose();
      }
      if (gb) {
        MapMat(gb->grad_buffer().data() + static_cast<std::size_t>(i) * k * nn, k, nn).noalias() +=
            ConstMapMat(self.inputs[0]->value.data() + static_cast<std::size_t>(i) * m * k, m, k).transpose() * dy;
      }
    }
  });
}

Var transpose_last2(const Var& a) {
  require_rank(a, 3, "transpose_last2");
  const int bs = a.dim(0), m = a.dim(1), nn = a.dim(2);
  Tensor y({bs, nn, m});
  for (int i = 0; i < bs; ++i)
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < nn; ++c)
        y[(static_cast<std::size_t>(i) * nn + c) * m + r] = a.value()[(static_cast<std::size_t>(i) * m + r) * nn + c];
  return make_result(std::move(y), {a}, [bs, m, nn](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (int i = 0; i < bs; ++i)
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < nn; ++c)
            g[(static_cast<std::size_t>(i) * m + r) * nn + c] += self.grad[(static_cast<std::size_t>(i) * nn + c) * m + r];
    }
  });
}

Var softmax_last(const Var& a, const Tensor* key_mask) {
  require_rank(a, 3, "softmax_last");
  const int bs = a.dim(0), m = a.dim(1), nn = a.dim(2);
  if (key_mask && key_mask->size() != static_cast<std::size_t>(bs) * nn) throw ShapeError("softmax_last: mask shape");
  Tensor y(a.shape());
  for (int i = 0; i < bs; ++i) {
    for (int r = 0; r < m; ++r) {
      const double* row = a.value().data() + (static_cast<std::size_t>(i) * m + r) * nn;
      double* out = y.data() + (static_cast<std::size_t>(i) * m + r) * nn;
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < nn; ++c) {
        if (!key_mask || (*key_mask)[static_cast<std::size_t>(i) * nn + c] > 0.5) mx = std::max(mx, row[c]);
      }
      double z = 0.0;
      for (int c = 0; c < nn; ++c) {
        const bool valid = !key_mask || (*key_mask)[static_cast<std::size_t>(i) * nn + c] > 0.5;
        out[c] = valid ? std::exp(row[c] - mx) : 0.0;
        z += out[c];
      }
      if (z > 0.0)
        for (int c = 0; c < nn; ++c) out[c] /= z;
    }
  }
  return make_result(std::move(y), {a}, [bs, m, nn](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t r = 0; r < static_cast<std::size_t>(bs) * m; ++r) {
        const double* yr = self.value.data() + r * nn;
        const double* dy = self.grad.data() + r * nn;
        double dot = 0.0;
        for (int c = 0; c < nn; ++c) dot += yr[c] * dy[c];
        for (int c = 0; c < nn; ++c) g[r * nn + c] += yr[c] * (dy[c] - dot);
      }
    }
  });
}

Var embedding(const Var& table, const std::vector<int>& ids, int n, int len) {
  require_rank(table, 2, "embedding");
  const int vocab = table.dim(0), d = table.dim(1);
  if (ids.size() != static_cast<std::size_t>(n) * len) throw ShapeError("embedding: id count mismatch");
  Tensor y({n, len, d});
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= vocab) throw ShapeError("embedding: id out of range");
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[k]) * d, d, y.data() + k * d);
  }
  return make_result(std::move(y), {table}, [ids, d](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      for (std::size_t k = 0; k < ids.size(); ++k)
        for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[k]) * d + j] += self.grad[k * d + j];
    }
  });
}

// ------------------------------------------------------------------------ CTC

Var ctc_loss(const Var& logits, const std::vector<std::vector<int>>& labels, const std::vector<int>& input_lengths,
             int* infeasible) {
  require_rank(logits, 3, "ctc_loss");
  const int n = logits.dim(0), steps = logits.dim(1), classes = logits.dim(2);
  if (static_cast<int>(labels.size()) != n || static_cast<int>(input_lengths.size()) != n) {
    throw ShapeError("ctc_loss: batch size mismatch");
  }
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Tensor grad(logits.shape());
  double total = 0.0;
  int skipped = 0;

  for (int i = 0; i < n; ++i) {
    const int t_len = std::min(input_lengths[i], steps);
    const auto& lab = labels[i];
    for (int l : lab)
      if (l <= 0 || l >= classes) throw ShapeError("ctc_loss: label id out of range");
    const int s_len = 2 * static_cast<int>(lab.size()) + 1;
    auto ext = [&](int s) { return (s % 2 == 0) ? 0 : lab[static_cast<std::size_t>(s / 2)]; };

    // log-softmax per frame
    std::vector<double> lp(static_cast<std::size_t>(std::max(t_len, 0)) * classes);
    for (int t = 0; t < t_len; ++t) {
      const double* row = logits.value().data() + (static_cast<std::size_t>(i) * steps + t) * classes;
      double mx = row[0];
      for (int k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
      double z = 0.0;
      for (int k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
      const double lz = mx + std::log(z);
      for (int k = 0; k < classes; ++k) lp[static_cast<std::size_t>(t) * classes + k] = row[k] - lz;
    }
    if (t_len <= 0) {
      ++skipped;
      continue;
    }

    std::vector<double> alpha(static_cast<std::size_t>(t_len) * s_len, kNegInf);
    std::vector<double> beta(static_cast<std::size_t>(t_len) * s_len, kNegInf);
    auto A = [&](int t, int s) -> double& { return alpha[static_cast<std::size_t>(t) * s_len + s]; };
    auto B = [&](int t, int s) -> double& { return beta[static_cast<std::size_t>(t) * s_len + s]; };
    auto LP = [&](int t, int k) { return lp[static_cast<std::size_t>(t) * classes + k]; };

    A(0, 0) = LP(0, 0);
    if (s_len > 1) A(0, 1) = LP(0, ext(1));
    for (int t = 1; t < t_len; ++t) {
      for (int s = 0; s < s_len; ++s) {
        double v = A(t - 1, s);
        if (s >= 1) v = log_add(v, A(t - 1, s - 1));
        if (s >= 2 && ext(s) != 0 && ext(s) != ext(s - 2)) v = log_add(v, A(t - 1, s - 2));
        A(t, s) = (v == kNegInf) ? kNegInf : v + LP(t, ext(s));
      }
    }
    B(t_len - 1, s_len - 1) = LP(t_len - 1, ext(s_len - 1));
    if (s_len > 1) B(t_len - 1, s_len - 2) = LP(t_len - 1, ext(s_len - 2));
    for (int t = t_len - 2; t >= 0; --t) {
      for (int s = 0; s < s_len; ++s) {
        double v = B(t + 1, s);
        if (s + 1 < s_len) v = log_add(v, B(t + 1, s + 1));
        if (s + 2 < s_len && ext(s + 2) != 0 && ext(s + 2) != ext(s)) v = log_add(v, B(t + 1, s + 2));
        B(t, s) = (v == kNegInf) ? kNegInf : v + LP(t, ext(s));
      }
    }
    double logp = A(t_len - 1, s_len - 1);
    if (s_len > 1) logp = log_add(logp, A(t_len - 1, s_len - 2));
    if (!std::isfinite(logp)) {
      ++skipped;
      continue;
    }
    total += -logp;

    std::vector<double> occ(classes);
    for (int t = 0; t < t_len; ++t) {
      std::fill(occ.begin(), occ.end(), kNegInf);
      for (int s = 0; s < s_len; ++s) {
        const int k = ext(s);
        occ[k] = log_add(occ[k], A(t, s) + B(t, s));
      }
      double* g = grad.data() + (static_cast<std::size_t>(i) * steps + t) * classes;
      for (int k = 0; k < classes; ++k) {
        const double y = std::exp(LP(t, k));
        const double post = (occ[k] == kNegInf) ? 0.0 : std::exp(occ[k] - logp - LP(t, k));
        g[k] = y - post;
      }
    }
  }
  if (infeasible) *infeasible = skipped;
  const double inv_n = 1.0 / n;
  for (double& v : grad.storage()) v *= inv_n;
  return make_result(Tensor({1}, total * inv_n), {logits}, [grad = std::move(grad)](Node& self) {
    if (Node* in = wants(self, 0)) {
      Tensor& g = in->grad_buffer();
      const double d = self.grad[0];
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += d * grad[k];
    }
  });
}

}  // namespace fontctl::ag
