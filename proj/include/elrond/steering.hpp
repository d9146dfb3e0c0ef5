#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "elrond/concepts.hpp"
#include "elrond/directions.hpp"
#include "elrond/gradients.hpp"
#include "elrond/metrics.hpp"
#include "elrond/pca.hpp"
#include "elrond/sampler.hpp"

namespace elrond {

// One additive edit to the conditioning. slot picks which token of a
// composite embedding is shifted (slots are equal-width chunks); skip_steps
// holds the edit back through the first reverse steps, where the chain is
// still near pure noise.
struct SteeringSpec {
  std::size_t slot = 0;
  std::vector<double> direction;  // unit norm, one slot wide
  double lambda = 0.0;
  std::size_t skip_steps = 0;
};

namespace detail {

inline void check_specs(std::size_t e_size, const std::vector<SteeringSpec>& specs) {
  for (std::size_t s = 0; s < specs.size(); ++s) {
    const auto& sp = specs[s];
    const std::size_t dim = sp.direction.size();
    if (dim == 0)
      throw std::invalid_argument("steer_embedding: spec " + std::to_string(s) +
                                  " has an empty direction");
    if (e_size % dim != 0)
      throw std::invalid_argument("steer_embedding: direction size " + std::to_string(dim) +
                                  " does not divide embedding size " + std::to_string(e_size));
    if ((sp.slot + 1) * dim > e_size)
      throw std::invalid_argument("steer_embedding: slot " + std::to_string(sp.slot) +
                                  " out of range for embedding size " + std::to_string(e_size));
    double nrm = 0.0;
    for (double v : sp.direction) nrm += v * v;
    if (std::abs(std::sqrt(nrm) - 1.0) > 1e-10)
      throw std::invalid_argument("steer_embedding: spec " + std::to_string(s) +
                                  " direction is not unit norm");
  }
}

}  // namespace detail

// Hook applying e' = e + lambda * d on the owning slot once past skip_steps.
// Edits live on disjoint slots or add commutatively on a shared one, so spec
// order never matters.
inline EmbeddingHook steer_embedding(std::span<const double> e_tok,
                                     std::vector<SteeringSpec> specs) {
  if (e_tok.empty()) throw std::invalid_argument("steer_embedding: empty embedding");
  detail::check_specs(e_tok.size(), specs);
  return [specs = std::move(specs)](std::size_t step, std::span<const double> e) {
    std::vector<double> out(e.begin(), e.end());
    for (const auto& sp : specs) {
      if (step <= sp.skip_steps) continue;
      const std::size_t off = sp.slot * sp.direction.size();
      if (off + sp.direction.size() > out.size())
        throw std::invalid_argument("steer_embedding: hook called with mismatched embedding");
      for (std::size_t i = 0; i < sp.direction.size(); ++i)
        out[off + i] += sp.lambda * sp.direction[i];
    }
    return out;
  };
}

// Default steering magnitude: 8x the median gradient norm in the whitened
// retained basis. A starting point only; experiments tune lambda on a grid
// and pass their own value.
inline double default_lambda_max(const GradientStore& store, const PcaBasis& basis) {
  if (basis.retained == 0)
    throw std::invalid_argument("default_lambda_max: no retained components");
  if (store.d_embed() != basis.d)
    throw std::invalid_argument("default_lambda_max: store dim " +
                                std::to_string(store.d_embed()) + " != basis dim " +
                                std::to_string(basis.d));
  if (store.count() == 0) throw std::invalid_argument("default_lambda_max: empty store");
  std::vector<double> norms;
  norms.reserve(store.count());
  for (std::size_t r = 0; r < store.count(); ++r) {
    const auto g = store.row(r);
    double s = 0.0;
    for (std::size_t k = 0; k < basis.retained; ++k) {
      const double lam = basis.ratios[k] * basis.total_variance;
      if (lam <= 0.0) continue;
      const auto v = basis.component(k);
      double c = 0.0;
      for (std::size_t i = 0; i < basis.d; ++i) c += (g[i] - basis.mean[i]) * v[i];
      s += c * c / lam;
    }
    norms.push_back(std::sqrt(s));
  }
  const std::size_t mid = (norms.size() - 1) / 2;
  std::nth_element(norms.begin(), norms.begin() + mid, norms.end());
  return 8.0 * norms[mid];
}

// Paired comparison of sample-space shift under a discovered direction vs a
// random unit direction of equal magnitude. Each trial reuses one noise seed
// across the three chains, so the difference is purely the conditioning.
struct ShiftReport {
  double discovered = 0.0;  // mean Euclidean shift from the unsteered sample
  double random = 0.0;
  std::size_t trials = 0;

  double ratio() const {
    if (random > 0.0) return discovered / random;
    return discovered > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  }
};

template <typename Model>
ShiftReport discovered_vs_random(const Model& model, std::span<const double> e_tok,
                                 const DirectionSet& dirs, const NoiseSchedule& sched,
                                 std::size_t trials, double lambda, std::size_t skip_steps,
                                 std::uint64_t seed) {
  if (trials == 0) throw std::invalid_argument("discovered_vs_random: trials must be positive");
  dirs.validate();
  if (dirs.count() == 0)
    throw std::invalid_argument("discovered_vs_random: empty direction set");
  if (dirs.d_embed != e_tok.size())
    throw std::invalid_argument("discovered_vs_random: direction dim " +
                                std::to_string(dirs.d_embed) + " != embedding size " +
                                std::to_string(e_tok.size()));

  ShiftReport rep;
  rep.trials = trials;
  for (std::size_t tr = 0; tr < trials; ++tr) {
    Rng trng(seed, tr);
    const std::size_t pick = trng.index(dirs.count());
    const std::vector<double> u = detail::random_unit(trng, dirs.d_embed);
    const std::uint64_t sseed = trng.raw();

    const std::vector<double> base = sample(model, e_tok, sched, sseed);
    const auto steered = [&](std::span<const double> d) {
      SteeringSpec sp;
      sp.direction.assign(d.begin(), d.end());
      sp.lambda = lambda;
      sp.skip_steps = skip_steps;
      std::vector<SteeringSpec> specs;
      specs.push_back(std::move(sp));
      return sample(model, e_tok, sched, sseed, steer_embedding(e_tok, std::move(specs)));
    };
    rep.discovered += detail::euclid(steered(dirs.dir(pick)), base);
    rep.random += detail::euclid(steered(u), base);
  }
  rep.discovered /= static_cast<double>(trials);
  rep.random /= static_cast<double>(trials);
  return rep;
}

struct MitigationConfig {
  std::size_t n_samples = 300;
  double lambda_max = 1.0;
  std::size_t skip_steps = 0;
  std::uint64_t seed = 1;
  EvalConfig eval;
};

struct MitigationReport {
  EvalReport student_plain;
  EvalReport student_steered;
  EvalReport teacher;
};

// Student samples with and without random 3-direction steering combinations,
// both scored against a fresh teacher reference batch. The teacher arm is a
// second independent teacher batch: the floor any student arm is chasing.
// Plain and steered student chains share noise seeds, so steering is the
// only difference between those two arms.
template <typename TeacherModel, typename StudentModel>
MitigationReport mitigation_experiment(const TeacherModel& teacher, const StudentModel& student,
                                       std::span<const double> e_tok, const DirectionSet& dirs,
                                       const SampleSet& centers, const NoiseSchedule& sched,
                                       const MitigationConfig& cfg) {
  dirs.validate();
  if (dirs.count() == 0)
    throw std::invalid_argument("mitigation_experiment: empty direction set");
  if (dirs.d_embed != e_tok.size())
    throw std::invalid_argument("mitigation_experiment: direction dim " +
                                std::to_string(dirs.d_embed) + " != embedding size " +
                                std::to_string(e_tok.size()));
  if (cfg.n_samples < cfg.eval.k_nn + 1)
    throw std::invalid_argument("mitigation_experiment: n_samples below k_nn + 1");
  if (!(cfg.lambda_max >= 0.0))
    throw std::invalid_argument("mitigation_experiment: lambda_max must be nonnegative");
  if (dirs.count() < 3)
    std::cerr << "mitigation_experiment: only " << dirs.count()
              << " directions, drawing combinations with replacement\n";

  const std::size_t n = cfg.n_samples;
  SampleSet teacher_ref(n), teacher_gen(n), plain(n), steered(n);
  for (std::size_t i = 0; i < n; ++i) {
    teacher_ref[i] = sample(teacher, e_tok, sched, mix_seed(cfg.seed, i));
    teacher_gen[i] = sample(teacher, e_tok, sched, mix_seed(cfg.seed, 3000000 + i));

    const std::uint64_t gseed = mix_seed(cfg.seed, 1000000 + i);
    plain[i] = sample(student, e_tok, sched, gseed);

    Rng drng(cfg.seed, 2000000 + i);
    std::vector<std::size_t> picks;
    if (dirs.count() >= 3) {
      picks = drng.subset(dirs.count(), 3);
    } else {
      picks = {drng.index(dirs.count()), drng.index(dirs.count()), drng.index(dirs.count())};
    }
    std::vector<SteeringSpec> specs;
    specs.reserve(picks.size());
    for (std::size_t p : picks) {
      SteeringSpec sp;
      sp.direction.assign(dirs.dir(p).begin(), dirs.dir(p).end());
      sp.lambda = drng.uniform(-cfg.lambda_max, cfg.lambda_max);
      sp.skip_steps = cfg.skip_steps;
      specs.push_back(std::move(sp));
    }
    steered[i] = sample(student, e_tok, sched, gseed, steer_embedding(e_tok, std::move(specs)));
  }

  MitigationReport rep;
  rep.student_plain = evaluate_samples(plain, teacher_ref, centers, cfg.eval);
  rep.student_steered = evaluate_samples(steered, teacher_ref, centers, cfg.eval);
  rep.teacher = evaluate_samples(teacher_gen, teacher_ref, centers, cfg.eval);
  return rep;
}

struct ComposabilityConfig {
  double lambda = 1.0;
  std::size_t skip_steps = 5;
  std::size_t n_samples = 200;
  std::uint64_t seed = 1;
};

struct InterferenceArm {
  double own = 0.0;    // TV shift of the steered subject's mode histogram
  double cross = 0.0;  // TV shift of the untouched subject's histogram

  double ratio() const {
    if (own <= 0.0)
      throw std::runtime_error("interference ratio undefined: steering moved its own subject by 0");
    return cross / own;
  }
};

struct InterferenceReport {
  InterferenceArm arm_a;  // steering slot 0
  InterferenceArm arm_b;  // steering slot 1
  std::vector<double> base_hist_a;
  std::vector<double> base_hist_b;
};

// Two-subject concept: the latent splits into an A half and a B half, the
// embedding into two slots. Each arm steers one slot only and measures how
// much both halves' mode histograms move against the unsteered baseline
// under identical noise seeds.
template <typename Model>
InterferenceReport composability_experiment(const Model& model, std::span<const double> e_tok,
                                            std::span<const double> dir_a,
                                            std::span<const double> dir_b,
                                            std::size_t latent_split, const ModeAssigner& assign_a,
                                            const ModeAssigner& assign_b, std::size_t n_modes_a,
                                            std::size_t n_modes_b, const NoiseSchedule& sched,
                                            const ComposabilityConfig& cfg) {
  if (cfg.n_samples == 0)
    throw std::invalid_argument("composability_experiment: n_samples must be positive");
  if (e_tok.size() % 2 != 0)
    throw std::invalid_argument("composability_experiment: composite embedding must split in two");
  const std::size_t slot_dim = e_tok.size() / 2;
  if (dir_a.size() != slot_dim || dir_b.size() != slot_dim)
    throw std::invalid_argument("composability_experiment: directions must be one slot wide");
  const std::size_t d_latent = model.latent_dim();
  if (latent_split == 0 || latent_split >= d_latent)
    throw std::invalid_argument("composability_experiment: latent split " +
                                std::to_string(latent_split) + " out of range for latent dim " +
                                std::to_string(d_latent));
  if (!assign_a || !assign_b)
    throw std::invalid_argument("composability_experiment: both mode assigners are required");

  const auto run = [&](const EmbeddingHook& hook) {
    std::vector<std::size_t> ca(cfg.n_samples), cb(cfg.n_samples);
    for (std::size_t i = 0; i < cfg.n_samples; ++i) {
      const std::vector<double> z = sample(model, e_tok, sched, mix_seed(cfg.seed, i), hook);
      const std::span<const double> zs(z);
      ca[i] = assign_a(zs.first(latent_split));
      cb[i] = assign_b(zs.subspan(latent_split));
    }
    return std::make_pair(mode_histogram(ca, n_modes_a), mode_histogram(cb, n_modes_b));
  };

  const auto make_spec = [&](std::size_t slot, std::span<const double> d) {
    SteeringSpec sp;
    sp.slot = slot;
    sp.direction.assign(d.begin(), d.end());
    sp.lambda = cfg.lambda;
    sp.skip_steps = cfg.skip_steps;
    std::vector<SteeringSpec> specs;
    specs.push_back(std::move(sp));
    return specs;
  };

  const auto [ha0, hb0] = run({});
  const auto [haA, hbA] = run(steer_embedding(e_tok, make_spec(0, dir_a)));
  const auto [haB, hbB] = run(steer_embedding(e_tok, make_spec(1, dir_b)));

  InterferenceReport rep;
  rep.base_hist_a = ha0;
  rep.base_hist_b = hb0;
  rep.arm_a.own = histogram_tv(haA, ha0);
  rep.arm_a.cross = histogram_tv(hbA, hb0);
  rep.arm_b.own = histogram_tv(hbB, hb0);
  rep.arm_b.cross = histogram_tv(haB, ha0);
  return rep;
}

}  // namespace elrond
