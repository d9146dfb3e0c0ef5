#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "elrond/gradients.hpp"

namespace elrond {

struct PcaBasis {
  std::size_t d = 0;
  std::vector<double> mean;        // d
  std::vector<double> components;  // d x d row-major, variance order descending
  std::vector<double> ratios;      // descending, sums to <= 1
  double total_variance = 0.0;     // trace of the covariance; 0 if degenerate
  double tau = 0.0;
  std::size_t retained = 0;  // ratios strictly above tau

  std::size_t count() const { return ratios.size(); }

  std::span<const double> component(std::size_t i) const {
    if (i >= count()) throw std::out_of_range("PcaBasis: component " + std::to_string(i));
    return std::span<const double>(components).subspan(i * d, d);
  }

  // Row-major retained x d block, usable as an orthonormal basis.
  std::vector<double> retained_components() const {
    return std::vector<double>(components.begin(),
                               components.begin() + static_cast<long>(retained * d));
  }
};

inline double default_tau(std::size_t d_embed) {
  if (d_embed == 0) throw std::invalid_argument("default_tau: d_embed must be positive");
  return 2.5 / static_cast<double>(d_embed);
}

// Eigendecomposition of the population covariance of mean-centered rows.
// Component signs are canonicalized (largest-magnitude entry positive) so
// repeated fits of the same data agree exactly. A total variance at rounding
// scale relative to the raw second moment marks the store degenerate: all
// ratios zero, nothing retained.
inline PcaBasis fit_pca(std::span<const double> rows, std::size_t d, double tau) {
  if (d == 0) throw std::invalid_argument("fit_pca: d must be positive");
  if (rows.size() % d != 0)
    throw std::invalid_argument("fit_pca: row data size " + std::to_string(rows.size()) +
                                " is not a multiple of d=" + std::to_string(d));
  const std::size_t count = rows.size() / d;
  if (count < 2) throw std::invalid_argument("fit_pca: need at least 2 rows");

  PcaBasis basis;
  basis.d = d;
  basis.tau = tau;
  basis.mean.assign(d, 0.0);
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t c = 0; c < d; ++c) basis.mean[c] += rows[r * d + c];
  for (auto& m : basis.mean) m /= static_cast<double>(count);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<long>(d), static_cast<long>(d));
  double raw_ms = 0.0;
  Eigen::VectorXd x(static_cast<long>(d));
  for (std::size_t r = 0; r < count; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      raw_ms += rows[r * d + c] * rows[r * d + c];
      x[static_cast<long>(c)] = rows[r * d + c] - basis.mean[c];
    }
    cov.noalias() += x * x.transpose();
  }
  cov /= static_cast<double>(count);
  raw_ms /= static_cast<double>(count);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw std::runtime_error("fit_pca: eigensolver failed");

  basis.components.assign(d * d, 0.0);
  basis.ratios.assign(d, 0.0);
  std::vector<double> lambda(d);
  for (std::size_t i = 0; i < d; ++i) {
    // Solver returns ascending order; flip to descending.
    const long src = static_cast<long>(d - 1 - i);
    lambda[i] = std::max(0.0, es.eigenvalues()[src]);
    long flip_at = 0;
    double best = -1.0;
    for (long c = 0; c < static_cast<long>(d); ++c) {
      const double mag = std::abs(es.eigenvectors()(c, src));
      if (mag > best) {
        best = mag;
        flip_at = c;
      }
    }
    const double sgn = es.eigenvectors()(flip_at, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t c = 0; c < d; ++c)
      basis.components[i * d + c] = sgn * es.eigenvectors()(static_cast<long>(c), src);
  }

  double total = 0.0;
  for (double l : lambda) total += l;
  if (total > 1e-24 * (raw_ms + 1.0)) {
    basis.total_variance = total;
    for (std::size_t i = 0; i < d; ++i) basis.ratios[i] = lambda[i] / total;
  }
  basis.retained = 0;
  for (double r : basis.ratios)
    if (r > tau) ++basis.retained;
  return basis;
}

inline PcaBasis fit_pca(const GradientStore& store, double tau) {
  return fit_pca(store.raw(), store.d_embed(), tau);
}

}  // namespace elrond
