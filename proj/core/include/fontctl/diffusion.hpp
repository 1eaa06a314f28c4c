#pragma once

#include <vector>

#include "fontctl/autograd.hpp"
#include "fontctl/config.hpp"

namespace fontctl {

// Linear-beta DDPM schedule. Index t runs 1..T; index 0 is the clean signal
// (alpha_bar[0] = 1), which DDIM uses as its final target.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta, alpha, alpha_bar;  // size T + 1

  double sqrt_ab(int t) const;
  double sqrt_one_minus_ab(int t) const;
  void check_t(int t, bool allow_zero = false) const;
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps. Tensors are [N,c,m,n] with one
// timestep per batch element.
Tensor add_noise(const Tensor& z0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& s);

// z0_hat = (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t), differentiable in
// eps_hat.
ag::Var estimate_z0(const Tensor& z_t, const std::vector<int>& t, const ag::Var& eps_hat, const NoiseSchedule& s);

// Squared error between eps and eps_hat: mean over all elements (kMean) or
// the squared L2 norm per sample averaged over the batch (kSum).
ag::Var ldm_loss(const ag::Var& eps, const ag::Var& eps_hat, LossReduction reduction = LossReduction::kMean);

// Sinusoidal embedding [N, dim] of integer timesteps.
Tensor timestep_embedding(const std::vector<int>& t, int dim);

// Per-sample scalar broadcast helper: out[i,...] = a[i,...] * s[i].
ag::Var scale_per_sample(const ag::Var& a, const std::vector<double>& s);

}  // namespace fontctl
