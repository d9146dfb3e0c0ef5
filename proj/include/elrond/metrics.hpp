#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace elrond {

using SampleSet = std::vector<std::vector<double>>;

namespace detail {

inline std::size_t check_sample_set(const SampleSet& s, const char* ctx) {
  if (s.empty()) throw std::invalid_argument(std::string(ctx) + ": empty sample set");
  const std::size_t d = s.front().size();
  if (d == 0) throw std::invalid_argument(std::string(ctx) + ": zero-dimensional samples");
  for (const auto& row : s)
    if (row.size() != d) throw std::invalid_argument(std::string(ctx) + ": ragged sample set");
  return d;
}

inline double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return std::sqrt(s);
}

// Population covariance; rows below d+1 get shrunk toward the scaled
// identity so the matrix square root stays well conditioned.
struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline GaussianFit fit_gaussian(const SampleSet& s, std::size_t d) {
  const std::size_t n = s.size();
  GaussianFit fit;
  fit.mean = Eigen::VectorXd::Zero(static_cast<long>(d));
  for (const auto& row : s)
    for (std::size_t c = 0; c < d; ++c) fit.mean(static_cast<long>(c)) += row[c];
  fit.mean /= static_cast<double>(n);

  fit.cov = Eigen::MatrixXd::Zero(static_cast<long>(d), static_cast<long>(d));
  Eigen::VectorXd x(static_cast<long>(d));
  for (const auto& row : s) {
    for (std::size_t c = 0; c < d; ++c) x(static_cast<long>(c)) = row[c] - fit.mean(static_cast<long>(c));
    fit.cov.noalias() += x * x.transpose();
  }
  fit.cov /= static_cast<double>(n);

  if (n < d + 1) {
    const double gamma = 0.1;
    const double scale = fit.cov.trace() / static_cast<double>(d);
    fit.cov = (1.0 - gamma) * fit.cov +
              gamma * scale * Eigen::MatrixXd::Identity(static_cast<long>(d), static_cast<long>(d));
  }
  return fit;
}

// Symmetric PSD square root via eigendecomposition. Eigenvalues slightly
// negative from rounding are clamped; anything materially negative is a bug
// in the caller's covariance.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* ctx) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success)
    throw std::runtime_error(std::string(ctx) + ": eigensolver failed");
  const double top = std::max(1e-30, es.eigenvalues().cwiseAbs().maxCoeff());
  Eigen::VectorXd lam = es.eigenvalues();
  for (long i = 0; i < lam.size(); ++i) {
    if (lam(i) < -1e-9 * top)
      throw std::runtime_error(std::string(ctx) + ": covariance not positive semidefinite");
    lam(i) = std::sqrt(std::max(0.0, lam(i)));
  }
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Mean pairwise Euclidean distance, normalized by sqrt(dimension) so the
// score is comparable across latent sizes.
inline double diversity_score(const SampleSet& samples) {
  const std::size_t d = detail::check_sample_set(samples, "diversity_score");
  const std::size_t n = samples.size();
  if (n < 2) throw std::invalid_argument("diversity_score: need at least 2 samples");
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) sum += detail::euclid(samples[i], samples[j]);
  const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  return sum / pairs / std::sqrt(static_cast<double>(d));
}

// Squared Frechet distance between the Gaussians fitted to each set:
// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}).
inline double frechet_gaussian(const SampleSet& a, const SampleSet& b) {
  const std::size_t da = detail::check_sample_set(a, "frechet_gaussian");
  const std::size_t db = detail::check_sample_set(b, "frechet_gaussian");
  if (da != db)
    throw std::invalid_argument("frechet_gaussian: dimension mismatch " + std::to_string(da) +
                                " vs " + std::to_string(db));
  const detail::GaussianFit fa = detail::fit_gaussian(a, da);
  const detail::GaussianFit fb = detail::fit_gaussian(b, db);

  const Eigen::MatrixXd ra = detail::psd_sqrt(fa.cov, "frechet_gaussian");
  // ra * Sb * ra is similar to Sa * Sb and symmetric PSD, so its square
  // root carries the trace we need.
  Eigen::MatrixXd inner = ra * fb.cov * ra;
  inner = 0.5 * (inner + inner.transpose()).eval();
  const Eigen::MatrixXd cross = detail::psd_sqrt(inner, "frechet_gaussian");

  const double mean_term = (fa.mean - fb.mean).squaredNorm();
  const double value = mean_term + fa.cov.trace() + fb.cov.trace() - 2.0 * cross.trace();
  if (value < -1e-6)
    throw std::runtime_error("frechet_gaussian: distance came out negative (" +
                             std::to_string(value) + ")");
  return std::max(0.0, value);
}

// Union-of-balls precision/recall. Each point in the covering set owns a
// ball reaching its k-th nearest neighbor within that same set; the score is
// the fraction of the other set landing inside some ball.
struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

namespace detail {

inline std::vector<double> knn_radii(const SampleSet& s, std::size_t k) {
  const std::size_t n = s.size();
  std::vector<double> radii(n, 0.0);
  std::vector<double> dist;
  dist.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    dist.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dist.push_back(euclid(s[i], s[j]));
    std::nth_element(dist.begin(), dist.begin() + static_cast<long>(k - 1), dist.end());
    radii[i] = dist[k - 1];
  }
  return radii;
}

inline double covered_fraction(const SampleSet& points, const SampleSet& balls,
                               const std::vector<double>& radii) {
  std::size_t hit = 0;
  for (const auto& p : points) {
    for (std::size_t i = 0; i < balls.size(); ++i) {
      if (euclid(p, balls[i]) <= radii[i]) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(points.size());
}

}  // namespace detail

inline PrecisionRecall precision_recall(const SampleSet& reference, const SampleSet& generated,
                                        std::size_t k_nn = 3) {
  const std::size_t dr = detail::check_sample_set(reference, "precision_recall");
  const std::size_t dg = detail::check_sample_set(generated, "precision_recall");
  if (dr != dg)
    throw std::invalid_argument("precision_recall: dimension mismatch " + std::to_string(dr) +
                                " vs " + std::to_string(dg));
  if (k_nn == 0) throw std::invalid_argument("precision_recall: k_nn must be positive");
  if (reference.size() < k_nn + 1 || generated.size() < k_nn + 1)
    throw std::invalid_argument("precision_recall: both sets need at least k_nn + 1 = " +
                                std::to_string(k_nn + 1) + " samples");

  const std::vector<double> ref_radii = detail::knn_radii(reference, k_nn);
  const std::vector<double> gen_radii = detail::knn_radii(generated, k_nn);
  PrecisionRecall pr;
  pr.precision = detail::covered_fraction(generated, reference, ref_radii);
  pr.recall = detail::covered_fraction(reference, generated, gen_radii);
  return pr;
}

// Nearest-center mode assignment over the whole set.
inline std::vector<std::size_t> assign_modes(const SampleSet& samples, const SampleSet& centers) {
  const std::size_t ds = detail::check_sample_set(samples, "assign_modes");
  const std::size_t dc = detail::check_sample_set(centers, "assign_modes");
  if (ds != dc)
    throw std::invalid_argument("assign_modes: dimension mismatch " + std::to_string(ds) + " vs " +
                                std::to_string(dc));
  std::vector<std::size_t> out(samples.size(), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double best = detail::euclid(samples[i], centers[0]);
    for (std::size_t c = 1; c < centers.size(); ++c) {
      const double d = detail::euclid(samples[i], centers[c]);
      if (d < best) {
        best = d;
        out[i] = c;
      }
    }
  }
  return out;
}

// Share of samples landing in each mode; sums to 1.
inline std::vector<double> mode_histogram(const std::vector<std::size_t>& assignments,
                                          std::size_t n_modes) {
  if (n_modes == 0) throw std::invalid_argument("mode_histogram: n_modes must be positive");
  if (assignments.empty()) throw std::invalid_argument("mode_histogram: no assignments");
  std::vector<double> hist(n_modes, 0.0);
  for (std::size_t a : assignments) {
    if (a >= n_modes)
      throw std::invalid_argument("mode_histogram: assignment " + std::to_string(a) +
                                  " out of range for " + std::to_string(n_modes) + " modes");
    hist[a] += 1.0;
  }
  for (double& h : hist) h /= static_cast<double>(assignments.size());
  return hist;
}

// Fraction of modes whose sample share reaches min_share.
inline double mode_recall(const std::vector<double>& histogram, double min_share = 0.02) {
  if (histogram.empty()) throw std::invalid_argument("mode_recall: empty histogram");
  std::size_t covered = 0;
  for (double h : histogram)
    if (h >= min_share) ++covered;
  return static_cast<double>(covered) / static_cast<double>(histogram.size());
}

// Total variation distance between two share histograms.
inline double histogram_tv(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size() || p.empty())
    throw std::invalid_argument("histogram_tv: histograms must be same nonzero size");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

struct EvalConfig {
  std::size_t k_nn = 3;
  double min_mode_share = 0.02;
};

struct EvalReport {
  double diversity = 0.0;
  double frechet = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double mode_recall = 0.0;
  std::vector<double> mode_histogram;
};

inline EvalReport evaluate_samples(const SampleSet& generated, const SampleSet& reference,
                                   const SampleSet& centers, const EvalConfig& cfg = {}) {
  EvalReport rep;
  rep.diversity = diversity_score(generated);
  rep.frechet = frechet_gaussian(generated, reference);
  const PrecisionRecall pr = precision_recall(reference, generated, cfg.k_nn);
  rep.precision = pr.precision;
  rep.recall = pr.recall;
  rep.mode_histogram = mode_histogram(assign_modes(generated, centers), centers.size());
  rep.mode_recall = mode_recall(rep.mode_histogram, cfg.min_mode_share);
  return rep;
}

}  // namespace elrond
