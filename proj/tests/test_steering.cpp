#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "elrond/concepts.hpp"
#include "elrond/denoiser.hpp"
#include "elrond/directions.hpp"
#include "elrond/gradients.hpp"
#include "elrond/metrics.hpp"
#include "elrond/pca.hpp"
#include "elrond/sampler.hpp"
#include "elrond/schedule.hpp"
#include "elrond/steering.hpp"
#include "testutil.hpp"

using namespace elrond;
using Catch::Matchers::ContainsSubstring;

namespace {

SampleSet gaussian_cloud(Rng& rng, std::size_t n, const std::vector<double>& center, double sd) {
  SampleSet out(n);
  for (auto& row : out) {
    row = center;
    for (auto& v : row) v += sd * rng.normal();
  }
  return out;
}

}  // namespace

TEST_CASE("diversity score matches closed forms") {
  // identical samples have zero spread
  SampleSet same(5, std::vector<double>(4, 1.25));
  CHECK(diversity_score(same) == 0.0);

  // two points sqrt(D) apart normalize to exactly 1
  const std::size_t d = 9;
  std::vector<double> u(d, 0.0);
  u[2] = 3.0;  // |u| = 3 = sqrt(9)
  CHECK_THAT(diversity_score({std::vector<double>(d, 0.0), u}),
             Catch::Matchers::WithinAbs(1.0, 1e-12));

  // i.i.d. standard normals: mean pairwise distance concentrates near
  // sqrt(2 * (D - 1/2)) in high dimension, so the score sits near sqrt(2)
  Rng rng(42);
  const std::size_t dim = 64;
  SampleSet cloud = gaussian_cloud(rng, 400, std::vector<double>(dim, 0.0), 1.0);
  const double expect = std::sqrt(2.0 * (static_cast<double>(dim) - 0.5) / static_cast<double>(dim));
  CHECK_THAT(diversity_score(cloud), Catch::Matchers::WithinAbs(expect, 0.02));

  CHECK_THROWS_AS(diversity_score({}), std::invalid_argument);
  CHECK_THROWS_AS(diversity_score({{1.0, 2.0}}), std::invalid_argument);
  CHECK_THROWS_AS(diversity_score({{1.0, 2.0}, {1.0}}), std::invalid_argument);
}

TEST_CASE("frechet distance recovers the mean separation of equal covariances") {
  Rng rng(7);
  const std::size_t d = 8, n = 4000;
  SampleSet a = gaussian_cloud(rng, n, std::vector<double>(d, 0.0), 1.0);
  std::vector<double> mu(d, 0.5);  // |mu|^2 = 2
  SampleSet b = gaussian_cloud(rng, n, mu, 1.0);

  const double fd = frechet_gaussian(a, b);
  CHECK_THAT(fd, Catch::Matchers::WithinAbs(2.0, 0.2));

  // symmetric up to eigensolver rounding
  CHECK_THAT(frechet_gaussian(b, a), Catch::Matchers::WithinAbs(fd, 1e-8));

  // a set against itself collapses every term
  CHECK(frechet_gaussian(a, a) <= 1e-8);

  CHECK_THROWS_AS(frechet_gaussian(a, gaussian_cloud(rng, 10, std::vector<double>(3, 0.0), 1.0)),
                  std::invalid_argument);
}

TEST_CASE("frechet shrinkage keeps tiny sets finite") {
  Rng rng(11);
  const std::size_t d = 8;
  // five samples in eight dimensions: covariance is rank deficient
  SampleSet tiny_a = gaussian_cloud(rng, 5, std::vector<double>(d, 0.0), 1.0);
  SampleSet tiny_b = gaussian_cloud(rng, 5, std::vector<double>(d, 2.0), 1.0);

  CHECK(frechet_gaussian(tiny_a, tiny_a) <= 1e-8);
  const double fd = frechet_gaussian(tiny_a, tiny_b);
  CHECK(std::isfinite(fd));
  CHECK(fd > 0.0);

  // single points reduce to squared mean distance exactly
  SampleSet pa = {{0.0, 0.0}}, pb = {{3.0, 4.0}};
  CHECK_THAT(frechet_gaussian(pa, pb), Catch::Matchers::WithinAbs(25.0, 1e-12));
}

TEST_CASE("precision and recall on constructed clouds") {
  Rng rng(3);
  const std::size_t d = 4;

  SECTION("a set against itself is perfect") {
    SampleSet ref = gaussian_cloud(rng, 40, std::vector<double>(d, 0.0), 1.0);
    const PrecisionRecall pr = precision_recall(ref, ref, 3);
    CHECK(pr.precision == 1.0);
    CHECK(pr.recall == 1.0);
  }

  SECTION("far disjoint clusters share nothing") {
    SampleSet ref = gaussian_cloud(rng, 30, std::vector<double>(d, 0.0), 0.1);
    SampleSet gen = gaussian_cloud(rng, 30, std::vector<double>(d, 100.0), 0.1);
    const PrecisionRecall pr = precision_recall(ref, gen, 3);
    CHECK(pr.precision == 0.0);
    CHECK(pr.recall == 0.0);
  }

  SECTION("covering one of three modes recovers a third") {
    std::vector<double> c0(d, 0.0), c1(d, 20.0), c2(d, -20.0);
    SampleSet ref;
    for (const auto& c : {c0, c1, c2})
      for (auto& row : gaussian_cloud(rng, 50, c, 0.3)) ref.push_back(std::move(row));
    SampleSet gen = gaussian_cloud(rng, 100, c0, 0.3);
    const PrecisionRecall pr = precision_recall(ref, gen, 3);
    CHECK(pr.precision >= 0.9);
    CHECK_THAT(pr.recall, Catch::Matchers::WithinAbs(1.0 / 3.0, 0.1));
  }

  SECTION("scores never drop as k_nn grows") {
    SampleSet ref = gaussian_cloud(rng, 40, std::vector<double>(d, 0.0), 1.0);
    SampleSet gen = gaussian_cloud(rng, 40, std::vector<double>(d, 1.0), 1.0);
    double prev_p = 0.0, prev_r = 0.0;
    for (std::size_t k = 1; k <= 6; ++k) {
      const PrecisionRecall pr = precision_recall(ref, gen, k);
      CHECK(pr.precision >= prev_p);
      CHECK(pr.recall >= prev_r);
      prev_p = pr.precision;
      prev_r = pr.recall;
    }
  }

  SECTION("preconditions") {
    SampleSet small = gaussian_cloud(rng, 3, std::vector<double>(d, 0.0), 1.0);
    SampleSet big = gaussian_cloud(rng, 10, std::vector<double>(d, 0.0), 1.0);
    CHECK_THROWS_AS(precision_recall(small, big, 3), std::invalid_argument);
    CHECK_THROWS_AS(precision_recall(big, small, 3), std::invalid_argument);
    CHECK_THROWS_AS(precision_recall(big, big, 0), std::invalid_argument);
  }
}

TEST_CASE("mode assignment, histograms and total variation") {
  SampleSet centers = {{0.0, 0.0}, {10.0, 0.0}, {0.0, 10.0}};
  SampleSet pts = {{1.0, 0.0}, {9.0, 1.0}, {0.5, 9.0}, {0.2, 0.1}};
  const auto assign = assign_modes(pts, centers);
  CHECK(assign == std::vector<std::size_t>{0, 1, 2, 0});

  const auto hist = mode_histogram(assign, 3);
  CHECK_THAT(hist[0], Catch::Matchers::WithinAbs(0.5, 1e-15));
  CHECK_THAT(hist[1], Catch::Matchers::WithinAbs(0.25, 1e-15));
  CHECK_THAT(hist[2], Catch::Matchers::WithinAbs(0.25, 1e-15));
  CHECK(mode_recall(hist, 0.02) == 1.0);
  CHECK(mode_recall(hist, 0.3) == Catch::Approx(1.0 / 3.0));

  CHECK(histogram_tv(hist, hist) == 0.0);
  CHECK(histogram_tv({1.0, 0.0}, {0.0, 1.0}) == 1.0);
  CHECK(histogram_tv({0.7, 0.3}, {0.3, 0.7}) == Catch::Approx(0.4));

  CHECK_THROWS_AS(mode_histogram({5}, 3), std::invalid_argument);
  CHECK_THROWS_AS(mode_histogram({}, 3), std::invalid_argument);
  CHECK_THROWS_AS(mode_recall({}, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(histogram_tv({1.0}, {0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("evaluate_samples assembles a coherent report") {
  Rng rng(19);
  const std::size_t d = 4;
  SampleSet centers = {std::vector<double>(d, 0.0), std::vector<double>(d, 15.0),
                       std::vector<double>(d, -15.0)};
  SampleSet ref;
  for (const auto& c : centers)
    for (auto& row : gaussian_cloud(rng, 40, c, 0.4)) ref.push_back(std::move(row));

  SECTION("reference against itself") {
    const EvalReport rep = evaluate_samples(ref, ref, centers);
    CHECK(rep.precision == 1.0);
    CHECK(rep.recall == 1.0);
    CHECK(rep.frechet <= 1e-8);
    CHECK(rep.mode_recall == 1.0);
    double hsum = 0.0;
    for (double h : rep.mode_histogram) hsum += h;
    CHECK_THAT(hsum, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }

  SECTION("collapse onto one mode is visible in every field") {
    SampleSet gen = gaussian_cloud(rng, 60, centers[0], 0.4);
    const EvalReport rep = evaluate_samples(gen, ref, centers);
    CHECK(rep.mode_recall == Catch::Approx(1.0 / 3.0));
    CHECK(rep.mode_histogram[0] == 1.0);
    CHECK(rep.frechet > 1.0);
    CHECK(rep.diversity < diversity_score(ref));
    CHECK_THAT(rep.recall, Catch::Matchers::WithinAbs(1.0 / 3.0, 0.1));
  }
}

TEST_CASE("steer_embedding validates and applies slot edits") {
  std::vector<double> e = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};

  SECTION("validation") {
    SteeringSpec sp;
    sp.direction = {};
    CHECK_THROWS_WITH(steer_embedding(e, {sp}), ContainsSubstring("empty direction"));
    sp.direction = {1.0, 1.0, 0.0};  // norm sqrt(2)
    CHECK_THROWS_WITH(steer_embedding(e, {sp}), ContainsSubstring("not unit norm"));
    sp.direction = {1.0, 0.0, 0.0, 0.0};  // 4 does not divide 6
    CHECK_THROWS_WITH(steer_embedding(e, {sp}), ContainsSubstring("does not divide"));
    sp.direction = {1.0, 0.0, 0.0};
    sp.slot = 2;  // slots are 0 and 1 at width 3
    CHECK_THROWS_WITH(steer_embedding(e, {sp}), ContainsSubstring("out of range"));
  }

  SECTION("skip_steps gates the edit") {
    SteeringSpec sp;
    sp.direction = {0.0, 1.0, 0.0, 0.0, 0.0, 0.0};
    sp.lambda = 2.0;
    sp.skip_steps = 5;
    const EmbeddingHook hook = steer_embedding(e, {sp});
    for (std::size_t step = 1; step <= 5; ++step)
      CHECK(testutil::bitwise_equal(hook(step, e), e));
    const auto shifted = hook(6, e);
    CHECK(shifted[1] == Catch::Approx(e[1] + 2.0));
    for (std::size_t i = 0; i < e.size(); ++i)
      if (i != 1) CHECK(shifted[i] == e[i]);
  }

  SECTION("slot edits are local and order independent") {
    SteeringSpec sa, sb;
    sa.slot = 0;
    sa.direction = {1.0, 0.0, 0.0};
    sa.lambda = 0.5;
    sb.slot = 1;
    sb.direction = {0.0, 0.0, 1.0};
    sb.lambda = -0.25;
    const auto ab = steer_embedding(e, {sa, sb})(1, e);
    const auto ba = steer_embedding(e, {sb, sa})(1, e);
    CHECK(testutil::bitwise_equal(ab, ba));
    CHECK(ab[0] == Catch::Approx(e[0] + 0.5));
    CHECK(ab[5] == Catch::Approx(e[5] - 0.25));
    CHECK(ab[1] == e[1]);
    CHECK(ab[3] == e[3]);

    // two edits on one slot add up
    SteeringSpec s2 = sa;
    s2.lambda = 0.75;
    const auto twice = steer_embedding(e, {sa, s2})(1, e);
    CHECK(twice[0] == Catch::Approx(e[0] + 1.25));
  }
}

TEST_CASE("steering moves samples exactly when the model is sensitive") {
  Rng arng(31);
  const std::size_t de = 6, dl = 4;
  Tensor A = testutil::random_normal_tensor(arng, {de, dl});
  testutil::LinearOracle model(A);
  const NoiseSchedule sched = NoiseSchedule::cosine(20);
  std::vector<double> e = detail::random_unit(arng, de);

  SteeringSpec sp;
  sp.direction = detail::random_unit(arng, de);
  sp.lambda = 0.0;

  // lambda zero adds literal zeros: bit-identical chain
  const auto base = sample(model, e, sched, 99);
  const auto hooked = sample(model, e, sched, 99, steer_embedding(e, {sp}));
  CHECK(testutil::bitwise_equal(base, hooked));

  // opposite signs split the chain
  sp.lambda = 1.5;
  const auto plus = sample(model, e, sched, 99, steer_embedding(e, {sp}));
  sp.lambda = -1.5;
  const auto minus = sample(model, e, sched, 99, steer_embedding(e, {sp}));
  CHECK_FALSE(testutil::bitwise_equal(plus, minus));
  double gap = 0.0;
  for (std::size_t i = 0; i < plus.size(); ++i) gap += std::abs(plus[i] - minus[i]);
  CHECK(gap > 1e-6);

  // skipping every step is a no-op
  sp.skip_steps = sched.T();
  const auto skipped = sample(model, e, sched, 99, steer_embedding(e, {sp}));
  CHECK(testutil::bitwise_equal(base, skipped));
}

TEST_CASE("discovered directions beat random ones through a low-rank model") {
  // model sensitivity lives in a planted 3-dim embedding subspace; the
  // direction set holds exactly that basis
  Rng rng(53);
  const std::size_t de = 32, dl = 8, k = 3;
  const std::vector<double> u = detail::random_orthonormal_columns(rng, de, k);
  Tensor C = testutil::random_normal_tensor(rng, {k, dl});
  std::vector<double> a(de * dl, 0.0);
  for (std::size_t r = 0; r < de; ++r)
    for (std::size_t d = 0; d < dl; ++d) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += u[r * k + c] * C[c * dl + d];
      a[r * dl + d] = acc;
    }
  testutil::LinearOracle model(Tensor({de, dl}, std::move(a)));

  DirectionSet dirs;
  dirs.source = "pca";
  dirs.d_embed = de;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t r = 0; r < de; ++r) dirs.dirs.push_back(u[r * k + c]);
    dirs.weights.push_back(1.0);
  }
  dirs.validate();

  const NoiseSchedule sched = NoiseSchedule::cosine(20);
  const std::vector<double> e = detail::random_unit(rng, de);

  const ShiftReport rep =
      discovered_vs_random(model, e, dirs, sched, /*trials=*/60, /*lambda=*/2.0,
                           /*skip_steps=*/0, /*seed=*/5);
  CHECK(rep.trials == 60);
  CHECK(rep.discovered > 0.0);
  CHECK(rep.random > 0.0);
  // a random unit direction only projects sqrt(3/32) of its mass onto the
  // sensitive subspace, so the discovered arm should lead by far
  CHECK(rep.ratio() >= 2.0);

  const ShiftReport zero =
      discovered_vs_random(model, e, dirs, sched, 10, 0.0, 0, 5);
  CHECK(zero.discovered == 0.0);
  CHECK(zero.random == 0.0);
  CHECK(zero.ratio() == 0.0);

  CHECK_THROWS_AS(discovered_vs_random(model, e, dirs, sched, 0, 1.0, 0, 5),
                  std::invalid_argument);
  CHECK_THROWS_AS(discovered_vs_random(model, e, DirectionSet{}, sched, 5, 1.0, 0, 5),
                  std::runtime_error);
}

TEST_CASE("default lambda max is positive and scale free") {
  Rng rng(61);
  const std::size_t d = 16, k = 3;
  const std::vector<double> u = detail::random_orthonormal_columns(rng, d, k);
  GradientStore store(d, LossKind::kMse);
  GradientStore scaled(d, LossKind::kMse);
  for (std::size_t n = 0; n < 400; ++n) {
    std::vector<double> row(d, 0.0), big(d, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      const double w = rng.normal();
      for (std::size_t r = 0; r < d; ++r) row[r] += w * u[r * k + c];
    }
    for (std::size_t r = 0; r < d; ++r) big[r] = 7.0 * row[r];
    store.append(row);
    scaled.append(big);
  }
  const PcaBasis basis = fit_pca(store, default_tau(d));
  REQUIRE(basis.retained == k);
  const double lam = default_lambda_max(store, basis);
  // whitened coordinates are near standard normal, so the median norm sits
  // near the chi median sqrt(k (1 - 2/(9k))^3) and the result near 8x that
  CHECK(lam > 8.0);
  CHECK(lam < 16.0);

  const PcaBasis basis7 = fit_pca(scaled, default_tau(d));
  CHECK_THAT(default_lambda_max(scaled, basis7), Catch::Matchers::WithinAbs(lam, 1e-9));

  PcaBasis none = basis;
  none.retained = 0;
  CHECK_THROWS_AS(default_lambda_max(store, none), std::invalid_argument);
  GradientStore empty(d, LossKind::kMse);
  CHECK_THROWS_AS(default_lambda_max(empty, basis), std::invalid_argument);
  GradientStore narrow(d - 1, LossKind::kMse);
  narrow.append(std::vector<double>(d - 1, 1.0));
  CHECK_THROWS_AS(default_lambda_max(narrow, basis), std::invalid_argument);
}

TEST_CASE("composability keeps block-separable subjects independent") {
  // block-diagonal linear model: slot a drives the first latent half only,
  // slot b the second; steering one slot must leave the other half bitwise
  // unchanged under shared noise seeds
  const std::size_t slot = 4, half = 3;
  std::vector<double> a(2 * slot * 2 * half, 0.0);
  const auto at = [&](std::size_t r, std::size_t c) -> double& { return a[r * 2 * half + c]; };
  at(0, 0) = 5.0;            // e[0] pushes z[0]
  at(slot, half) = 5.0;      // e[4] pushes z[3]
  at(1, 1) = 1.0;            // mild extra structure
  at(slot + 1, half + 1) = 1.0;
  testutil::LinearOracle model(Tensor({2 * slot, 2 * half}, std::move(a)));

  const NoiseSchedule sched = NoiseSchedule::cosine(30);
  std::vector<double> e(2 * slot, 1.0 / std::sqrt(static_cast<double>(2 * slot)));

  std::vector<double> da(slot, 0.0), db(slot, 0.0);
  da[0] = 1.0;
  db[0] = 1.0;

  // unsteered z[0] sits near 5 e[0] ~ 1.8 with unit-scale spread; a +3
  // lambda shift moves it by ~15, so a midpoint threshold separates the
  // arms with enormous margin
  const ModeAssigner assign_a = [](std::span<const double> z) -> std::size_t {
    return z[0] > 9.0 ? 1 : 0;
  };
  const ModeAssigner assign_b = [](std::span<const double> z) -> std::size_t {
    return z[0] > 9.0 ? 1 : 0;
  };

  ComposabilityConfig cfg;
  cfg.lambda = 3.0;
  cfg.skip_steps = 5;
  cfg.n_samples = 40;
  cfg.seed = 17;

  const InterferenceReport rep = composability_experiment(
      model, e, da, db, half, assign_a, assign_b, 2, 2, sched, cfg);
  CHECK(rep.arm_a.own == 1.0);
  CHECK(rep.arm_a.cross == 0.0);
  CHECK(rep.arm_a.ratio() == 0.0);
  CHECK(rep.arm_b.own == 1.0);
  CHECK(rep.arm_b.cross == 0.0);
  CHECK(rep.arm_b.ratio() == 0.0);
  CHECK(rep.base_hist_a == std::vector<double>{1.0, 0.0});
  CHECK(rep.base_hist_b == std::vector<double>{1.0, 0.0});

  SECTION("lambda zero moves nothing and has no ratio") {
    ComposabilityConfig z = cfg;
    z.lambda = 0.0;
    z.n_samples = 10;
    const InterferenceReport rz = composability_experiment(
        model, e, da, db, half, assign_a, assign_b, 2, 2, sched, z);
    CHECK(rz.arm_a.own == 0.0);
    CHECK(rz.arm_a.cross == 0.0);
    CHECK_THROWS_WITH(rz.arm_a.ratio(), ContainsSubstring("undefined"));
  }

  SECTION("preconditions") {
    ComposabilityConfig c = cfg;
    c.n_samples = 0;
    CHECK_THROWS_AS(composability_experiment(model, e, da, db, half, assign_a, assign_b, 2, 2,
                                             sched, c),
                    std::invalid_argument);
    CHECK_THROWS_AS(composability_experiment(model, e, std::vector<double>(slot - 1, 1.0), db,
                                             half, assign_a, assign_b, 2, 2, sched, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(composability_experiment(model, e, da, db, 0, assign_a, assign_b, 2, 2, sched,
                                             cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(composability_experiment(model, e, da, db, 2 * half, assign_a, assign_b, 2, 2,
                                             sched, cfg),
                    std::invalid_argument);
    CHECK_THROWS_AS(composability_experiment(model, e, da, db, half, {}, assign_b, 2, 2, sched,
                                             cfg),
                    std::invalid_argument);
  }
}

TEST_CASE("mitigation experiment scores a collapsed student against its teacher") {
  // teacher learns a two-mode concept; student starts from the teacher and
  // fine-tunes on mode-0 data only, collapsing its coverage
  ConceptParams p;
  p.name = "duo";
  p.d_latent = 8;
  p.d_embed = 8;
  p.n_modes = 2;
  p.k_factors = 2;
  p.factor_scale = 0.3;
  p.eta = 0.02;
  p.mode_separation = 8.0;
  const ConceptSpec spec = make_concept(p, 401);

  const auto samples = sample_concept(spec, 800, 11);
  TrainingSet all;
  all.embeddings = {spec.e_tok};
  TrainingSet collapsed;
  collapsed.embeddings = {spec.e_tok};
  for (const auto& s : samples) {
    all.latents.push_back(s.z0);
    all.concept_of.push_back(0);
    if (s.mode_id == 0) {
      collapsed.latents.push_back(s.z0);
      collapsed.concept_of.push_back(0);
    }
  }
  REQUIRE(collapsed.latents.size() > 200);

  DenoiserConfig dcfg;
  dcfg.d_latent = 8;
  dcfg.d_embed = 8;
  dcfg.hidden = {64, 64};
  DenoiserModel teacher(dcfg, 7);
  const NoiseSchedule sched = NoiseSchedule::cosine(50);
  TrainConfig tc;
  tc.steps = 1500;
  tc.batch = 32;
  tc.lr = 2e-3;
  train_denoiser(teacher, all, sched, tc);

  const std::string teacher_hash = teacher.parameter_hash();
  DenoiserModel student = teacher;
  TrainConfig ft = tc;
  ft.steps = 900;
  ft.seed = 2;
  train_denoiser(student, collapsed, sched, ft);
  // fine-tuning the copy must not touch the teacher weights
  CHECK(teacher.parameter_hash() == teacher_hash);
  CHECK(student.parameter_hash() != teacher_hash);

  // direction set: top principal components of teacher semantic gradients
  std::vector<std::vector<double>> z0s;
  for (std::size_t i = 0; i < 200; ++i) z0s.push_back(samples[i].z0);
  CollectConfig cc;
  cc.pairs = 200;
  cc.seed = 13;
  cc.workers = 1;
  const GradientStore store = collect_dataset(teacher, z0s, spec.e_tok, sched, cc);
  const PcaBasis basis = fit_pca(store, default_tau(8));
  DirectionSet dirs;
  dirs.source = "pca";
  dirs.d_embed = 8;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto comp = basis.component(c);
    dirs.dirs.insert(dirs.dirs.end(), comp.begin(), comp.end());
    dirs.weights.push_back(basis.ratios[c]);
  }
  dirs.validate();

  SampleSet centers;
  for (const auto& m : spec.modes) centers.push_back(m.center);

  MitigationConfig mc;
  mc.n_samples = 60;
  mc.lambda_max = 1.0;
  mc.skip_steps = 5;
  mc.seed = 23;
  const MitigationReport rep =
      mitigation_experiment(teacher, student, spec.e_tok, dirs, centers, sched, mc);

  // the teacher arm is the floor: a collapsed student scores worse
  CHECK(rep.teacher.frechet < rep.student_plain.frechet);
  CHECK(rep.teacher.mode_recall == 1.0);
  CHECK(rep.student_plain.mode_recall <= 0.5);
  CHECK(rep.student_plain.mode_histogram.size() == 2);
  CHECK(rep.student_steered.mode_histogram.size() == 2);
  for (const EvalReport* r : {&rep.student_plain, &rep.student_steered, &rep.teacher}) {
    CHECK(std::isfinite(r->frechet));
    CHECK(std::isfinite(r->diversity));
    double hsum = 0.0;
    for (double h : r->mode_histogram) hsum += h;
    CHECK_THAT(hsum, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }

  // an undersized direction set still runs, drawing with replacement
  DirectionSet one;
  one.source = "pca";
  one.d_embed = 8;
  const auto comp = basis.component(0);
  one.dirs.assign(comp.begin(), comp.end());
  one.weights.push_back(1.0);
  MitigationConfig small = mc;
  small.n_samples = 8;
  const MitigationReport r1 =
      mitigation_experiment(teacher, student, spec.e_tok, one, centers, sched, small);
  CHECK(std::isfinite(r1.student_steered.frechet));

  MitigationConfig bad = mc;
  bad.n_samples = 2;
  CHECK_THROWS_AS(mitigation_experiment(teacher, student, spec.e_tok, dirs, centers, sched, bad),
                  std::invalid_argument);
  bad = mc;
  bad.lambda_max = -1.0;
  CHECK_THROWS_AS(mitigation_experiment(teacher, student, spec.e_tok, dirs, centers, sched, bad),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      mitigation_experiment(teacher, student, spec.e_tok, DirectionSet{}, centers, sched, mc),
      std::runtime_error);
}
