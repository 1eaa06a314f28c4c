#include "fontctl/diffusion.hpp"

#include <cmath>

#include "fontctl/error.hpp"

namespace fontctl {

double NoiseSchedule::sqrt_ab(int t) const { return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]); }
double NoiseSchedule::sqrt_one_minus_ab(int t) const { return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(t)]); }

void NoiseSchedule::check_t(int t, bool allow_zero) const {
  if (t < (allow_zero ? 0 : 1) || t > T) throw InputError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw InputError("schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw InputError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

namespace {

void check_batch(const Tensor& z, const std::vector<int>& t, const char* what) {
  if (z.rank() < 1 || static_cast<std::size_t>(z.dim(0)) != t.size()) {
    throw ShapeError(std::string(what) + ": need one timestep per batch element");
  }
}

}  // namespace

Tensor add_noise(const Tensor& z0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& s) {
  if (z0.shape() != eps.shape()) throw ShapeError("add_noise: z0 " + shape_str(z0.shape()) + " vs eps " + shape_str(eps.shape()));
  check_batch(z0, t, "add_noise");
  Tensor out(z0.shape());
  const std::size_t per = z0.size() / t.size();
  for (std::size_t i = 0; i < t.size(); ++i) {
    s.check_t(t[i]);
    const double a = s.sqrt_ab(t[i]), b = s.sqrt_one_minus_ab(t[i]);
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) out[k] = a * z0[k] + b * eps[k];
  }
  return out;
}

ag::Var scale_per_sample(const ag::Var& a, const std::vector<double>& s) {
  if (static_cast<std::size_t>(a.dim(0)) != s.size()) throw ShapeError("scale_per_sample: batch mismatch");
  Tensor w(a.shape());
  const std::size_t per = w.size() / s.size();
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) w[k] = s[i];
  return ag::mul(a, ag::constant(std::move(w)));
}

ag::Var estimate_z0(const Tensor& z_t, const std::vector<int>& t, const ag::Var& eps_hat, const NoiseSchedule& s) {
  if (z_t.shape() != eps_hat.shape()) throw ShapeError("estimate_z0: z_t and eps_hat shapes differ");
  check_batch(z_t, t, "estimate_z0");
  std::vector<double> a(t.size()), b(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    s.check_t(t[i]);
    a[i] = 1.0 / s.sqrt_ab(t[i]);
    b[i] = -s.sqrt_one_minus_ab(t[i]) / s.sqrt_ab(t[i]);
  }
  // Written as a*z_t + b*eps_hat so the clean case is exact when eps_hat is
  // the true noise up to rounding.
  return ag::add(scale_per_sample(ag::constant(z_t), a), scale_per_sample(eps_hat, b));
}

ag::Var ldm_loss(const ag::Var& eps, const ag::Var& eps_hat, LossReduction reduction) {
  if (eps.shape() != eps_hat.shape()) throw ShapeError("ldm_loss: shape mismatch " + shape_str(eps.shape()) + " vs " + shape_str(eps_hat.shape()));
  ag::Var m = ag::mse(eps, eps_hat);
  if (reduction == LossReduction::kMean) return m;
  const double per_sample = static_cast<double>(eps.value().size()) / eps.dim(0);
  return ag::scale(m, per_sample);
}

Tensor timestep_embedding(const std::vector<int>& t, int dim) {
  Tensor out({static_cast<int>(t.size()), dim});
  const int half = dim / 2;
  for (std::size_t i = 0; i < t.size(); ++i)
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      out[i * dim + k] = std::cos(t[i] * freq);
      out[i * dim + half + k] = std::sin(t[i] * freq);
    }
  return out;
}

}  // namespace fontctl
