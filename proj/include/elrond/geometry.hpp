#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "elrond/gradients.hpp"
#include "elrond/pca.hpp"
#include "elrond/rng.hpp"
#include "elrond/sampler.hpp"

namespace elrond {

// Self-calibrating noise floor: 3x the median of the trailing quarter of the
// spectrum. Assumes the tail is noise; inflates when signal fills more than
// three quarters of the spectrum.
inline double auto_noise_floor(std::span<const double> singular_desc) {
  if (singular_desc.empty()) throw std::invalid_argument("auto_noise_floor: empty spectrum");
  const std::size_t m = std::max<std::size_t>(1, singular_desc.size() / 4);
  const std::span<const double> tail = singular_desc.subspan(singular_desc.size() - m);
  // tail is descending, so the lower median is at the mirrored index
  return 3.0 * tail[m - 1 - (m - 1) / 2];
}

struct LidEstimate {
  std::string concept_name;
  std::vector<double> singular;  // descending
  double eps = 0.0;
  std::size_t lid = 0;  // count of singular values strictly above eps
};

// Numerical rank of the centered gradient matrix scaled by 1/sqrt(rows).
// eps = 0 self-calibrates from the spectrum tail.
inline LidEstimate estimate_lid(const GradientStore& store, double eps = 0.0) {
  const std::size_t n = store.count(), d = store.d_embed();
  if (n < 2) throw std::invalid_argument("estimate_lid: need at least 2 rows");

  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = store.row(r);
    for (std::size_t c = 0; c < d; ++c) mean[c] += row[c];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  Eigen::MatrixXd M(static_cast<long>(n), static_cast<long>(d));
  const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = store.row(r);
    for (std::size_t c = 0; c < d; ++c)
      M(static_cast<long>(r), static_cast<long>(c)) = (row[c] - mean[c]) * inv_sqrt_n;
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(M);
  LidEstimate est;
  est.concept_name = store.concept_name();
  est.singular.assign(svd.singularValues().data(),
                      svd.singularValues().data() + svd.singularValues().size());
  est.eps = eps > 0.0 ? eps : auto_noise_floor(est.singular);
  for (double s : est.singular)
    if (s > est.eps) ++est.lid;
  return est;
}

struct HierarchyLidReport {
  LidEstimate general;
  LidEstimate specific;
  long margin = 0;  // LID_general - LID_specific
  bool verdict = false;
};

// Both stores must come from one checkpoint, or the LIDs are not comparable.
inline HierarchyLidReport hierarchy_lid_compare(const GradientStore& general,
                                                const GradientStore& specific, double eps = 0.0) {
  if (!general.checkpoint_hash().empty() && !specific.checkpoint_hash().empty() &&
      general.checkpoint_hash() != specific.checkpoint_hash())
    throw std::invalid_argument("hierarchy_lid_compare: stores come from different checkpoints");
  HierarchyLidReport rep;
  rep.general = estimate_lid(general, eps);
  rep.specific = estimate_lid(specific, eps);
  rep.margin = static_cast<long>(rep.general.lid) - static_cast<long>(rep.specific.lid);
  rep.verdict = rep.general.lid > rep.specific.lid;
  return rep;
}

struct SubspaceFractions {
  double spanned = 0.0;
  double noise = 0.0;
};

namespace detail {

inline void check_orthonormal_rows(std::span<const double> rows, std::size_t count, std::size_t d,
                                   const char* which) {
  for (std::size_t a = 0; a < count; ++a)
    for (std::size_t b = a; b < count; ++b) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += rows[a * d + c] * rows[b * d + c];
      const double want = a == b ? 1.0 : 0.0;
      if (std::abs(dot - want) > 1e-8)
        throw std::invalid_argument(std::string("subspace_fractions: ") + which +
                                    " basis is not orthonormal");
    }
}

}  // namespace detail

// spanned = mean over subset components v of |P_ref v|^2; noise is the
// complement. Both inputs are row-major orthonormal row sets.
inline SubspaceFractions subspace_fractions(std::span<const double> ref, std::size_t n_ref,
                                            std::span<const double> sub, std::size_t n_sub,
                                            std::size_t d) {
  if (d == 0) throw std::invalid_argument("subspace_fractions: zero dimension");
  if (ref.size() != n_ref * d || sub.size() != n_sub * d)
    throw std::invalid_argument("subspace_fractions: row data does not match counts");
  if (n_ref == 0 || n_sub == 0)
    throw std::invalid_argument("subspace_fractions: empty basis");
  detail::check_orthonormal_rows(ref, n_ref, d, "reference");
  detail::check_orthonormal_rows(sub, n_sub, d, "subset");

  double total = 0.0;
  for (std::size_t v = 0; v < n_sub; ++v) {
    double p2 = 0.0;
    for (std::size_t r = 0; r < n_ref; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += sub[v * d + c] * ref[r * d + c];
      p2 += dot * dot;
    }
    total += p2;
  }
  SubspaceFractions f;
  f.spanned = total / static_cast<double>(n_sub);
  f.noise = 1.0 - f.spanned;
  return f;
}

inline SubspaceFractions subspace_fractions(const PcaBasis& ref, const PcaBasis& sub) {
  if (ref.d != sub.d)
    throw std::invalid_argument("subspace_fractions: basis dims " + std::to_string(ref.d) +
                                " vs " + std::to_string(sub.d));
  if (ref.retained == 0 || sub.retained == 0)
    throw std::invalid_argument("subspace_fractions: a basis retained no components");
  const std::span<const double> rc(ref.components);
  const std::span<const double> sc(sub.components);
  return subspace_fractions(rc.first(ref.retained * ref.d), ref.retained,
                            sc.first(sub.retained * sub.d), sub.retained, ref.d);
}

struct StabilityCurve {
  std::vector<std::size_t> sizes;
  std::vector<double> spanned;
  std::vector<double> noise;
};

// PCA on growing random subsets of a fixed reference pool, scored against
// the reference-pool PCA and averaged over repeats. Subsets draw from the
// pool, so size == reference_size reproduces the reference exactly.
inline StabilityCurve stability_curve(const GradientStore& store,
                                      const std::vector<std::size_t>& sizes,
                                      std::size_t reference_size, std::size_t repeats,
                                      std::uint64_t seed, double tau = 0.0) {
  if (sizes.empty()) throw std::invalid_argument("stability_curve: no subset sizes");
  if (repeats == 0) throw std::invalid_argument("stability_curve: repeats must be positive");
  if (reference_size > store.count())
    throw std::invalid_argument("stability_curve: reference size " +
                                std::to_string(reference_size) + " exceeds store count " +
                                std::to_string(store.count()));
  for (std::size_t s : sizes) {
    if (s < 2) throw std::invalid_argument("stability_curve: subset sizes must be >= 2");
    if (s > reference_size)
      throw std::invalid_argument("stability_curve: subset size " + std::to_string(s) +
                                  " exceeds reference size " + std::to_string(reference_size));
  }
  const std::size_t d = store.d_embed();
  const double tau_used = tau > 0.0 ? tau : default_tau(d);

  std::vector<std::size_t> pool;
  if (reference_size == store.count()) {
    pool.resize(reference_size);
    for (std::size_t i = 0; i < reference_size; ++i) pool[i] = i;
  } else {
    Rng prng(seed, 0);
    pool = prng.subset(store.count(), reference_size);
    std::sort(pool.begin(), pool.end());
  }

  const auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> rows;
    rows.reserve(idx.size() * d);
    for (std::size_t i : idx) {
      const auto row = store.row(i);
      rows.insert(rows.end(), row.begin(), row.end());
    }
    return rows;
  };

  const PcaBasis ref = fit_pca(gather(pool), d, tau_used);
  if (ref.retained == 0)
    throw std::runtime_error("stability_curve: reference PCA retained no components");

  StabilityCurve curve;
  curve.sizes = sizes;
  curve.spanned.assign(sizes.size(), 0.0);
  curve.noise.assign(sizes.size(), 0.0);
  for (std::size_t si = 0; si < sizes.size(); ++si) {
    for (std::size_t r = 0; r < repeats; ++r) {
      Rng rng(seed, 1 + si * repeats + r);
      std::vector<std::size_t> pick = rng.subset(pool.size(), sizes[si]);
      std::sort(pick.begin(), pick.end());
      for (auto& p : pick) p = pool[p];
      const PcaBasis sub = fit_pca(gather(pick), d, tau_used);
      if (sub.retained == 0)
        throw std::runtime_error("stability_curve: subset PCA retained no components at size " +
                                 std::to_string(sizes[si]));
      const SubspaceFractions f = subspace_fractions(ref, sub);
      curve.spanned[si] += f.spanned;
      curve.noise[si] += f.noise;
    }
    curve.spanned[si] /= static_cast<double>(repeats);
    curve.noise[si] /= static_cast<double>(repeats);
  }
  return curve;
}

inline void save_stability_csv(const std::filesystem::path& path, const StabilityCurve& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_stability_csv: cannot open " + path.string());
  out << "size,spanned,noise\n";
  out.precision(17);
  for (std::size_t i = 0; i < curve.sizes.size(); ++i)
    out << curve.sizes[i] << "," << curve.spanned[i] << "," << curve.noise[i] << "\n";
  if (!out) throw std::runtime_error("save_stability_csv: write failed for " + path.string());
}

struct LinearityReport {
  double straightness = 0.0;  // chord length over cumulative length, in (0, 1]
  double avg_cos = 0.0;       // mean cosine of consecutive nonzero steps
  double pc1_ratio = 0.0;     // first principal component's variance share
  double rmse = 0.0;          // against matched-index lerp between endpoints
};

// The four linearity metrics of an ordered point list. Degenerate paths
// (zero cumulative length, zero chord, or no pair of consecutive nonzero
// steps) are errors; callers aggregating many trajectories catch and count.
inline LinearityReport trajectory_metrics(const std::vector<std::vector<double>>& points) {
  if (points.size() < 3)
    throw std::invalid_argument("trajectory_metrics: need at least 3 points");
  const std::size_t d = points.front().size();
  if (d == 0) throw std::invalid_argument("trajectory_metrics: zero-dimensional points");
  for (const auto& p : points)
    if (p.size() != d) throw std::invalid_argument("trajectory_metrics: ragged point list");
  const std::size_t n = points.size();

  std::vector<std::vector<double>> steps(n - 1, std::vector<double>(d));
  std::vector<double> step_norm(n - 1, 0.0);
  double cum = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    double s2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      steps[i][c] = points[i + 1][c] - points[i][c];
      s2 += steps[i][c] * steps[i][c];
    }
    step_norm[i] = std::sqrt(s2);
    cum += step_norm[i];
  }
  if (cum <= 0.0) throw std::runtime_error("trajectory_metrics: zero-length trajectory");

  double chord2 = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double dv = points[n - 1][c] - points[0][c];
    chord2 += dv * dv;
  }
  const double chord = std::sqrt(chord2);
  if (chord <= 0.0)
    throw std::runtime_error("trajectory_metrics: degenerate trajectory with zero chord");

  LinearityReport rep;
  rep.straightness = chord / cum;

  double cos_sum = 0.0;
  std::size_t cos_pairs = 0;
  for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
    if (step_norm[i] <= 0.0 || step_norm[i + 1] <= 0.0) continue;
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += steps[i][c] * steps[i + 1][c];
    cos_sum += std::clamp(dot / (step_norm[i] * step_norm[i + 1]), -1.0, 1.0);
    ++cos_pairs;
  }
  if (cos_pairs == 0)
    throw std::runtime_error("trajectory_metrics: no consecutive nonzero steps");
  rep.avg_cos = cos_sum / static_cast<double>(cos_pairs);

  std::vector<double> mean(d, 0.0);
  for (const auto& p : points)
    for (std::size_t c = 0; c < d; ++c) mean[c] += p[c];
  for (double& m : mean) m /= static_cast<double>(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<long>(d), static_cast<long>(d));
  Eigen::VectorXd x(static_cast<long>(d));
  for (const auto& p : points) {
    for (std::size_t c = 0; c < d; ++c) x(static_cast<long>(c)) = p[c] - mean[c];
    cov.noalias() += x * x.transpose();
  }
  cov /= static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("trajectory_metrics: eigensolver failed");
  const double total_var = std::max(0.0, es.eigenvalues().sum());
  const double top_var = std::max(0.0, es.eigenvalues().maxCoeff());
  rep.pc1_ratio = total_var > 0.0 ? top_var / total_var : 0.0;

  double se = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(n - 1);
    for (std::size_t c = 0; c < d; ++c) {
      const double lerp = (1.0 - u) * points[0][c] + u * points[n - 1][c];
      const double dv = points[i][c] - lerp;
      se += dv * dv;
    }
  }
  rep.rmse = std::sqrt(se / static_cast<double>(n));
  return rep;
}

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;
};

struct MotivationReport {
  MetricSummary straightness;
  MetricSummary avg_cos;
  MetricSummary pc1_ratio;
  MetricSummary rmse;
  std::size_t n_trajectories = 0;  // trajectories that produced metrics
  std::size_t degenerate = 0;      // excluded (zero chord or zero length)
};

namespace detail {

inline MetricSummary summarize(const std::vector<double>& v) {
  MetricSummary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double acc = 0.0;
    for (double x : v) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(v.size() - 1));
  }
  return s;
}

}  // namespace detail

// Linearity metrics aggregated over fixed-noise interpolation trajectories
// between two conditionings. Degenerate trajectories are counted, not fatal.
template <typename Model>
MotivationReport motivation_experiment(const Model& model, std::span<const double> c_start,
                                       std::span<const double> c_end, std::size_t n_traj,
                                       std::size_t n_points, const NoiseSchedule& sched,
                                       std::uint64_t seed) {
  if (n_traj == 0) throw std::invalid_argument("motivation_experiment: need trajectories");
  std::vector<double> si, co, pc, rm;
  MotivationReport rep;
  for (std::size_t k = 0; k < n_traj; ++k) {
    const TrajectoryRecord rec =
        interpolate_trajectory(model, c_start, c_end, n_points, sched, mix_seed(seed, k));
    try {
      const LinearityReport lr = trajectory_metrics(rec.latents);
      si.push_back(lr.straightness);
      co.push_back(lr.avg_cos);
      pc.push_back(lr.pc1_ratio);
      rm.push_back(lr.rmse);
    } catch (const std::runtime_error&) {
      ++rep.degenerate;
    }
  }
  rep.n_trajectories = si.size();
  rep.straightness = detail::summarize(si);
  rep.avg_cos = detail::summarize(co);
  rep.pc1_ratio = detail::summarize(pc);
  rep.rmse = detail::summarize(rm);
  return rep;
}

}  // namespace elrond
