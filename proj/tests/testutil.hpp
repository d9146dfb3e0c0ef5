#pragma once

#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "elrond/rng.hpp"
#include "elrond/schedule.hpp"
#include "elrond/tensor.hpp"

namespace testutil {

// Inverts the forward process for one known clean latent: returns exactly
// the eps that produced z_t. Ignores conditioning, so embedding gradients
// through it are identically zero.
class OracleDenoiser {
 public:
  OracleDenoiser(std::vector<double> z0, std::size_t d_embed)
      : z0_(std::move(z0)), d_embed_(d_embed) {}

  std::size_t latent_dim() const { return z0_.size(); }
  std::size_t embed_dim() const { return d_embed_; }

  std::vector<double> predict_eps(std::span<const double> z_t, std::size_t t,
                                  std::span<const double>, const elrond::NoiseSchedule& sched) const {
    const double a = sched.alpha(t), s = sched.sigma(t);
    std::vector<double> eps(z_t.size());
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (z_t[i] - a * z0_[i]) / s;
    return eps;
  }

  elrond::Tensor predict_eps_graph(elrond::Tape&, std::span<const double> z_t, std::size_t t,
                                   const elrond::Tensor&, const elrond::NoiseSchedule& sched) const {
    return elrond::Tensor::row(predict_eps(z_t, t, {}, sched));
  }

 private:
  std::vector<double> z0_;
  std::size_t d_embed_;
};

// Predicts zero noise regardless of input.
class ZeroDenoiser {
 public:
  ZeroDenoiser(std::size_t d_latent, std::size_t d_embed) : d_(d_latent), e_(d_embed) {}
  std::size_t latent_dim() const { return d_; }
  std::size_t embed_dim() const { return e_; }
  std::vector<double> predict_eps(std::span<const double> z_t, std::size_t, std::span<const double>,
                                  const elrond::NoiseSchedule&) const {
    return std::vector<double>(z_t.size(), 0.0);
  }
  elrond::Tensor predict_eps_graph(elrond::Tape&, std::span<const double> z_t, std::size_t,
                                   const elrond::Tensor&, const elrond::NoiseSchedule&) const {
    return elrond::Tensor::row(std::vector<double>(z_t.size(), 0.0));
  }

 private:
  std::size_t d_, e_;
};

// Predicts the noise that maps z_t back to zhat0 = e * A, so the clean
// estimate is an exact linear function of the embedding. A is d_embed x D
// and sets the reachable subspace rank.
class LinearOracle {
 public:
  explicit LinearOracle(elrond::Tensor a) : a_(std::move(a)) {}

  std::size_t latent_dim() const { return a_.shape()[1]; }
  std::size_t embed_dim() const { return a_.shape()[0]; }

  std::vector<double> predict_eps(std::span<const double> z_t, std::size_t t,
                                  std::span<const double> e,
                                  const elrond::NoiseSchedule& sched) const {
    const double al = sched.alpha(t), s = sched.sigma(t);
    std::vector<double> eps(z_t.size());
    for (std::size_t d = 0; d < eps.size(); ++d) {
      double zh = 0.0;
      for (std::size_t k = 0; k < e.size(); ++k) zh += e[k] * a_[k * latent_dim() + d];
      eps[d] = (z_t[d] - al * zh) / s;
    }
    return eps;
  }

  elrond::Tensor predict_eps_graph(elrond::Tape&, std::span<const double> z_t, std::size_t t,
                                   const elrond::Tensor& e_row,
                                   const elrond::NoiseSchedule& sched) const {
    elrond::Tensor zhat = elrond::matmul(e_row, a_);
    elrond::Tensor zt = elrond::Tensor::row(z_t);
    return elrond::scale(elrond::sub(zt, elrond::scale(zhat, sched.alpha(t))),
                         1.0 / sched.sigma(t));
  }

 private:
  elrond::Tensor a_;
};

inline std::size_t nearest_center(std::span<const double> x,
                                  const std::vector<std::vector<double>>& centers) {
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t m = 0; m < centers.size(); ++m) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double dv = x[i] - centers[m][i];
      d2 += dv * dv;
    }
    if (d2 < best_d) {
      best_d = d2;
      best = m;
    }
  }
  return best;
}

inline elrond::Tensor random_tensor(elrond::Rng& rng, elrond::Shape shape,
                                    double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(elrond::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return elrond::Tensor(std::move(shape), std::move(v));
}

inline elrond::Tensor random_normal_tensor(elrond::Rng& rng, elrond::Shape shape, double sd = 1.0) {
  std::vector<double> v(elrond::shape_numel(shape));
  for (auto& x : v) x = sd * rng.normal();
  return elrond::Tensor(std::move(shape), std::move(v));
}

// Fresh scratch directory under the system temp root.
inline std::filesystem::path temp_dir(const std::string& tag) {
  auto base = std::filesystem::temp_directory_path() / ("elrond_test_" + tag);
  std::filesystem::remove_all(base);
  std::filesystem::create_directories(base);
  return base;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace testutil
