#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "elrond/rng.hpp"
#include "elrond/schedule.hpp"
#include "elrond/tensor.hpp"

namespace elrond {

// Per-step embedding modifier. `step` counts reverse steps from 1 (t = T)
// to T (t = 1); the returned vector is the conditioning used at that step.
using EmbeddingHook =
    std::function<std::vector<double>(std::size_t step, std::span<const double> e)>;

template <typename Model>
std::vector<double> predict_z0(const Model& model, std::span<const double> z_t, std::size_t t,
                               std::span<const double> e, const NoiseSchedule& sched) {
  const double a = sched.alpha(t);
  if (a < 1e-6)
    throw std::runtime_error("predict_z0: alpha below 1e-6 at t=" + std::to_string(t));
  const double s = sched.sigma(t);
  std::vector<double> eps = model.predict_eps(z_t, t, e, sched);
  std::vector<double> z0(z_t.size());
  for (std::size_t i = 0; i < z0.size(); ++i) z0[i] = (z_t[i] - s * eps[i]) / a;
  return z0;
}

// Differentiable variant: builds the estimate on the tape that e_row lives
// on, with model weights treated as constants.
template <typename Model>
Tensor predict_z0_graph(const Model& model, Tape& tape, std::span<const double> z_t, std::size_t t,
                        const Tensor& e_row, const NoiseSchedule& sched) {
  const double a = sched.alpha(t);
  if (a < 1e-6)
    throw std::runtime_error("predict_z0: alpha below 1e-6 at t=" + std::to_string(t));
  const double s = sched.sigma(t);
  Tensor eps_hat = model.predict_eps_graph(tape, z_t, t, e_row, sched);
  Tensor zt_row = Tensor::row(z_t);
  return scale(sub(zt_row, scale(eps_hat, s)), 1.0 / a);
}

// Ancestral DDPM reverse chain from z_T ~ N(0, I). The per-step noise
// sequence depends only on the seed, never on the hook or conditioning, so
// fixed-noise comparisons across embeddings are exact.
template <typename Model>
std::vector<double> sample(const Model& model, std::span<const double> e,
                           const NoiseSchedule& sched, std::uint64_t seed,
                           const EmbeddingHook& hook = {}) {
  if (e.size() != model.embed_dim())
    throw std::invalid_argument("sample: embedding size " + std::to_string(e.size()) +
                                " != model d_embed " + std::to_string(model.embed_dim()));
  const std::size_t d = model.latent_dim();
  const std::size_t T = sched.T();
  Rng rng(seed);
  std::vector<double> z = rng.normal_vec(d);
  for (std::size_t t = T; t >= 1; --t) {
    const std::size_t step = T - t + 1;
    std::vector<double> e_used(e.begin(), e.end());
    if (hook) {
      e_used = hook(step, e);
      if (e_used.size() != e.size())
        throw std::invalid_argument("sample: hook changed embedding dimension at step " +
                                    std::to_string(step));
    }
    const std::vector<double> eps_hat = model.predict_eps(z, t, e_used, sched);
    const double abar_t = sched.alpha_bar(t);
    const double abar_p = sched.alpha_bar(t - 1);
    const double a_t = abar_t / abar_p;
    const double beta = 1.0 - a_t;
    const double alpha_t = std::sqrt(abar_t), sigma_t = std::sqrt(1.0 - abar_t);
    const double c0 = std::sqrt(abar_p) * beta / (1.0 - abar_t);
    const double cz = std::sqrt(a_t) * (1.0 - abar_p) / (1.0 - abar_t);
    for (std::size_t i = 0; i < d; ++i) {
      const double zhat0 = (z[i] - sigma_t * eps_hat[i]) / alpha_t;
      z[i] = c0 * zhat0 + cz * z[i];
    }
    if (t > 1) {
      const double var = beta * (1.0 - abar_p) / (1.0 - abar_t);
      const double sd = std::sqrt(std::max(var, 0.0));
      for (std::size_t i = 0; i < d; ++i) z[i] += sd * rng.normal();
    }
  }
  return z;
}

struct TrajectoryRecord {
  std::vector<double> grid;                  // interpolation parameter in [0, 1]
  std::vector<std::vector<double>> latents;  // one generated latent per grid point
  std::vector<double> c_start;
  std::vector<double> c_end;
};

// Generates along the conditioning segment (1-u)*c_start + u*c_end with the
// identical noise realization at every grid point.
template <typename Model>
TrajectoryRecord interpolate_trajectory(const Model& model, std::span<const double> c_start,
                                        std::span<const double> c_end, std::size_t n_points,
                                        const NoiseSchedule& sched, std::uint64_t seed) {
  if (n_points < 3) throw std::invalid_argument("interpolate_trajectory: n_points must be >= 3");
  if (c_start.size() != c_end.size())
    throw std::invalid_argument("interpolate_trajectory: endpoint dim mismatch");
  TrajectoryRecord rec;
  rec.c_start.assign(c_start.begin(), c_start.end());
  rec.c_end.assign(c_end.begin(), c_end.end());
  rec.grid.reserve(n_points);
  rec.latents.reserve(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(n_points - 1);
    std::vector<double> e(c_start.size());
    for (std::size_t j = 0; j < e.size(); ++j) e[j] = (1.0 - u) * c_start[j] + u * c_end[j];
    rec.grid.push_back(u);
    rec.latents.push_back(sample(model, e, sched, seed));
  }
  return rec;
}

}  // namespace elrond
