#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fontctl/autograd.hpp"
#include "fontctl/rng.hpp"

namespace fontctl::testutil {

// Largest relative error between the analytic gradient of f at each input and
// a central finite difference, over every element of every input.
inline double max_grad_error(const std::function<ag::Var(const std::vector<ag::Var>&)>& f,
                             std::vector<Tensor> inputs, double h = 1e-5) {
  std::vector<ag::Var> vars;
  for (auto& t : inputs) vars.push_back(ag::parameter(t));
  ag::Var out = f(vars);
  ag::backward(out);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = vars[i].grad();
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      auto eval = [&](double delta) {
        ag::NoGradGuard guard;
        std::vector<ag::Var> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == i) t[k] += delta;
          probe.push_back(ag::constant(t));
        }
        return f(probe).item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double err = std::abs(numeric - analytic[k]) / std::max(1.0, std::abs(numeric) + std::abs(analytic[k]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Scalar probe: sum(x * w) for a fixed random weighting w.
inline ag::Var weighted_sum(const ag::Var& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ag::sum(ag::mul(x, ag::constant(Tensor::randn(x.shape(), rng))));
}

}  // namespace fontctl::testutil
