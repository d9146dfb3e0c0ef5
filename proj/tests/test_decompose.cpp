#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "elrond/concepts.hpp"
#include "elrond/directions.hpp"
#include "elrond/pca.hpp"
#include "elrond/sae.hpp"
#include "testutil.hpp"

using namespace elrond;
using testutil::LinearOracle;

namespace {

struct Rank3Data {
  GradientStore store;
  std::vector<double> u;  // 32 x 3 row-major, orthonormal columns
};

// Distinct factor scales keep the top eigenvalues separated, so PCA can
// identify the individual planted directions, not just their span.
Rank3Data make_rank3(std::uint64_t seed, double sigma, std::size_t rows) {
  Rng rng(seed);
  const std::size_t d = 32, k = 3;
  Rank3Data data{GradientStore(d, LossKind::kMse), detail::random_orthonormal_columns(rng, d, k)};
  std::vector<double> x(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double c[3] = {2.0 * rng.normal(), 1.3 * rng.normal(), 0.9 * rng.normal()};
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = sigma * rng.normal();
      for (std::size_t j = 0; j < k; ++j) x[i] += c[j] * data.u[i * k + j];
    }
    data.store.append(x);
  }
  return data;
}

double abs_cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::abs(dot) / std::sqrt(na * nb);
}

double pca_truncation_mse(const GradientStore& s, std::size_t rank,
                          std::span<const std::size_t> rows) {
  const PcaBasis b = fit_pca(s, 0.0);
  const std::size_t d = s.d_embed();
  double total = 0.0;
  for (std::size_t r : rows) {
    const auto x = s.row(r);
    std::vector<double> rec(b.mean);
    for (std::size_t i = 0; i < rank; ++i) {
      const auto comp = b.component(i);
      double coef = 0.0;
      for (std::size_t c = 0; c < d; ++c) coef += (x[c] - b.mean[c]) * comp[c];
      for (std::size_t c = 0; c < d; ++c) rec[c] += coef * comp[c];
    }
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += (rec[c] - x[c]) * (rec[c] - x[c]);
    total += acc / static_cast<double>(d);
  }
  return total / static_cast<double>(rows.size());
}

double relative_recon_error(const SaeModel& m, const GradientStore& s,
                            std::span<const std::size_t> rows) {
  double num = 0.0, den = 0.0;
  for (std::size_t r : rows) {
    const auto x = s.row(r);
    const std::vector<double> rec = m.reconstruct(x);
    for (std::size_t c = 0; c < x.size(); ++c) {
      num += (rec[c] - x[c]) * (rec[c] - x[c]);
      den += x[c] * x[c];
    }
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("fit_pca recovers a constructed rank-3 basis") {
  const Rank3Data data = make_rank3(42, 1e-3, 2000);
  const double tau = default_tau(32);
  const PcaBasis basis = fit_pca(data.store, tau);

  CHECK(basis.d == 32);
  CHECK(basis.retained == 3);
  CHECK(basis.tau == tau);

  double ratio_sum = 0.0;
  for (std::size_t i = 0; i < basis.count(); ++i) {
    ratio_sum += basis.ratios[i];
    if (i > 0) CHECK(basis.ratios[i] <= basis.ratios[i - 1]);
    for (std::size_t j = i; j < basis.count(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < 32; ++c)
        dot += basis.components[i * 32 + c] * basis.components[j * 32 + c];
      CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-8);
    }
  }
  CHECK(ratio_sum <= 1.0 + 1e-9);

  // Every planted factor aligns with some retained component.
  for (std::size_t j = 0; j < 3; ++j) {
    std::vector<double> truth(32);
    for (std::size_t c = 0; c < 32; ++c) truth[c] = data.u[c * 3 + j];
    double best = 0.0;
    for (std::size_t i = 0; i < basis.retained; ++i)
      best = std::max(best, abs_cosine(truth, basis.component(i)));
    CHECK(best > 0.95);
  }

  CHECK(default_tau(2048) == 2.5 / 2048.0);
  CHECK_THROWS_AS(default_tau(0), std::invalid_argument);
}

TEST_CASE("fit_pca treats constant stores as rank zero") {
  GradientStore zeros(8, LossKind::kMse);
  for (int r = 0; r < 5; ++r) zeros.append(std::vector<double>(8, 0.0));
  const PcaBasis zb = fit_pca(zeros, default_tau(8));
  CHECK(zb.retained == 0);
  for (double r : zb.ratios) CHECK(r == 0.0);

  GradientStore constant(8, LossKind::kMse);
  const std::vector<double> row = {1.5, -0.25, 3.0, 0.125, -2.0, 0.75, 1.0, -1.0};
  for (int r = 0; r < 7; ++r) constant.append(row);
  const PcaBasis cb = fit_pca(constant, default_tau(8));
  CHECK(cb.retained == 0);

  GradientStore single(4, LossKind::kMse);
  single.append(std::vector<double>(4, 1.0));
  CHECK_THROWS_AS(fit_pca(single, 0.1), std::invalid_argument);
  const std::vector<double> ragged = {1.0, 2.0, 3.0};
  CHECK_THROWS_AS(fit_pca(ragged, 2, 0.1), std::invalid_argument);
}

TEST_CASE("fit_pca is row-order invariant up to component sign") {
  Rng rng(555);
  const std::size_t d = 8, rows = 200;
  std::vector<double> fwd(rows * d);
  for (auto& v : fwd) v = rng.normal();
  std::vector<double> rev(rows * d);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(fwd.begin() + static_cast<long>(r * d), d,
                rev.begin() + static_cast<long>((rows - 1 - r) * d));

  const PcaBasis a = fit_pca(fwd, d, 0.0);
  const PcaBasis b = fit_pca(rev, d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    CHECK(a.ratios[i] == Catch::Approx(b.ratios[i]).margin(1e-9));
    CHECK(abs_cosine(a.component(i), b.component(i)) > 1.0 - 1e-6);
  }

  // Same data refit gives bit-identical output under the sign convention.
  const PcaBasis c = fit_pca(fwd, d, 0.0);
  CHECK(testutil::bitwise_equal(a.components, c.components));
  CHECK(testutil::bitwise_equal(a.ratios, c.ratios));
}

TEST_CASE("topk keeps the k largest signed entries") {
  const std::vector<double> pre = {0.1, 0.9, -0.5, 0.3};
  CHECK(topk_activate(pre, 2) == std::vector<double>{0.0, 0.9, 0.0, 0.3});
  CHECK(topk_activate(pre, 4) == pre);

  const std::vector<double> tied = {1.0, 1.0, 0.0, 1.0};
  CHECK(topk_activate(tied, 2) == std::vector<double>{1.0, 1.0, 0.0, 0.0});

  CHECK_THROWS_AS(topk_activate(pre, 0), std::invalid_argument);
  CHECK_THROWS_AS(topk_activate(pre, 5), std::invalid_argument);

  Rng rng(88);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 2 + rng.index(10);
    const std::size_t k = 1 + rng.index(n);
    const std::vector<double> v = rng.normal_vec(n);
    const std::vector<double> h = topk_activate(v, k);
    std::size_t nz = 0;
    for (double x : h) nz += x != 0.0;
    CHECK(nz <= k);
  }
}

TEST_CASE("batched topk matches the per-row rule and its gradient") {
  Rng rng(99);
  const std::size_t batch = 3, n = 6, k = 2;
  Tensor pre = testutil::random_normal_tensor(rng, {batch, n});
  const Tensor h = detail::topk_rows_graph(pre, k);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::vector<double> want = topk_activate(pre.values().subspan(b * n, n), k);
    CHECK(testutil::bitwise_equal(h.values().subspan(b * n, n), want));
  }

  auto build = [&](Tape&, std::span<const Tensor> leaves) {
    return sum(square(detail::topk_rows_graph(leaves[0], k)));
  };
  const GradCheckReport rep = grad_check(build, {pre}, 1e-6, 1e-4);
  INFO("rel_err=" << rep.max_rel_err);
  CHECK(rep.ok());
}

TEST_CASE("sae trains to reconstruct low-rank gradient data") {
  const Rank3Data clean = make_rank3(42, 1e-3, 1500);
  SaeModel model(32, 32, 4, 7);

  // Untrained with zero b_pre: the zero vector encodes and decodes to zero.
  const std::vector<double> zero(32, 0.0);
  CHECK(model.reconstruct(zero) == zero);

  SaeConfig cfg;
  cfg.steps = 4000;
  cfg.batch = 64;
  cfg.lr = 1e-3;
  const SaeTrainResult res = train_sae(model, clean.store, cfg);
  REQUIRE(res.loss_curve.size() == cfg.steps);
  CHECK(res.holdout_after < res.holdout_before);
  CHECK(res.holdout_rows.size() == 150);

  const double rel = relative_recon_error(model, clean.store, res.holdout_rows);
  INFO("holdout relative error " << rel);
  CHECK(rel < 0.05);

  // Decoder atoms stay unit norm through training.
  for (std::size_t j = 0; j < model.dict_size(); ++j) {
    double nrm = 0.0;
    for (double v : model.decoder_atom(j)) nrm += v * v;
    CHECK(std::abs(std::sqrt(nrm) - 1.0) < 1e-9);
  }

  CHECK(sae_eval_loss(model, clean.store, res.holdout_rows) <=
        1.5 * pca_truncation_mse(clean.store, 4, res.holdout_rows));

  // The bound holds on visibly noisy low-rank data too.
  const Rank3Data noisy = make_rank3(43, 0.1, 1500);
  SaeModel nmodel(32, 32, 4, 7);
  const SaeTrainResult nres = train_sae(nmodel, noisy.store, cfg);
  CHECK(nres.holdout_after < nres.holdout_before);
  CHECK(sae_eval_loss(nmodel, noisy.store, nres.holdout_rows) <=
        1.5 * pca_truncation_mse(noisy.store, 4, nres.holdout_rows));

  CHECK_THROWS_AS(SaeModel(32, 4, 5, 1), std::invalid_argument);
  GradientStore tiny(32, LossKind::kMse);
  tiny.append(std::vector<double>(32, 1.0));
  CHECK_THROWS_AS(train_sae(model, tiny, cfg), std::invalid_argument);
}

TEST_CASE("sae codes are exactly sparse and densities account for k") {
  const Rank3Data data = make_rank3(11, 0.05, 400);
  SaeModel model(32, 32, 4, 3);
  SaeConfig cfg;
  cfg.steps = 300;
  const SaeTrainResult res = train_sae(model, data.store, cfg);
  (void)res;

  std::size_t nonzero_total = 0;
  for (std::size_t r = 0; r < data.store.count(); ++r) {
    const std::vector<double> h = model.encode(data.store.row(r));
    std::size_t nz = 0;
    for (double v : h) nz += v != 0.0;
    CHECK(nz <= 4);
    nonzero_total += nz;
  }
  CHECK(nonzero_total == 4 * data.store.count());

  const AliveReport alive = alive_features(model, data.store);
  CHECK(alive.alive.size() <= model.dict_size());
  double density_sum = 0.0;
  for (double d : alive.density) {
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    density_sum += d;
  }
  CHECK(density_sum * static_cast<double>(data.store.count()) ==
        Catch::Approx(4.0 * static_cast<double>(data.store.count())).margin(1e-6));
  for (std::size_t j : alive.alive) CHECK(alive.density[j] > 0.0);
}

TEST_CASE("direction sets carry unit directions with attached weights") {
  const Rank3Data data = make_rank3(42, 1e-3, 2000);
  const PcaBasis basis = fit_pca(data.store, default_tau(32));
  REQUIRE(basis.retained == 3);

  const DirectionSet pca_set = directions_from(basis, "rank3");
  CHECK(pca_set.source == "pca");
  CHECK(pca_set.concept_name == "rank3");
  CHECK(pca_set.count() == basis.retained);
  CHECK_NOTHROW(pca_set.validate());
  double wsum = 0.0;
  for (std::size_t i = 0; i < pca_set.count(); ++i) {
    CHECK(pca_set.weights[i] == basis.ratios[i]);
    wsum += pca_set.weights[i];
  }
  CHECK(wsum <= 1.0 + 1e-9);
  for (std::size_t j = 0; j < 3; ++j) {
    std::vector<double> truth(32);
    for (std::size_t c = 0; c < 32; ++c) truth[c] = data.u[c * 3 + j];
    double best = 0.0;
    for (std::size_t i = 0; i < pca_set.count(); ++i)
      best = std::max(best, abs_cosine(truth, pca_set.dir(i)));
    CHECK(best > 0.95);
  }

  // A threshold above every ratio yields an explicit empty set.
  const PcaBasis none = fit_pca(data.store, 1.1);
  const DirectionSet empty_set = directions_from(none, "rank3");
  CHECK(empty_set.count() == 0);
  CHECK(empty_set.d_embed == 32);

  SaeModel model(32, 32, 4, 7);
  SaeConfig cfg;
  cfg.steps = 300;
  train_sae(model, data.store, cfg);
  const AliveReport alive = alive_features(model, data.store);
  const DirectionSet sae_set = directions_from(model, alive, "rank3");
  CHECK(sae_set.source == "sae");
  CHECK(sae_set.count() == alive.alive.size());
  CHECK_NOTHROW(sae_set.validate());
  for (std::size_t i = 0; i < sae_set.count(); ++i)
    CHECK(sae_set.weights[i] == alive.density[alive.alive[i]]);
}

TEST_CASE("direction files round-trip through both formats") {
  const auto dir = testutil::temp_dir("elds");
  const Rank3Data data = make_rank3(42, 1e-3, 500);
  const DirectionSet ds = directions_from(fit_pca(data.store, default_tau(32)), "rank3");
  REQUIRE(ds.count() == 3);

  const auto jpath = dir / "dirs.json";
  save_directions_json(jpath, ds);
  const DirectionSet jset = load_directions(jpath);
  CHECK(jset.source == ds.source);
  CHECK(jset.concept_name == ds.concept_name);
  CHECK(jset.d_embed == ds.d_embed);
  CHECK(testutil::bitwise_equal(jset.dirs, ds.dirs));
  CHECK(testutil::bitwise_equal(jset.weights, ds.weights));

  const auto bpath = dir / "dirs.elds";
  save_directions_elds(bpath, ds);
  const DirectionSet bset = load_directions(bpath);
  CHECK(bset.source == ds.source);
  CHECK(bset.concept_name == ds.concept_name);
  CHECK(testutil::bitwise_equal(bset.dirs, ds.dirs));
  CHECK(testutil::bitwise_equal(bset.weights, ds.weights));

  // Re-saving a loaded set reproduces both artifacts byte for byte.
  const auto jpath2 = dir / "dirs2.json";
  save_directions_json(jpath2, jset);
  CHECK(io::file_hash(jpath) == io::file_hash(jpath2));
  const auto bpath2 = dir / "dirs2.elds";
  save_directions_elds(bpath2, bset);
  CHECK(io::file_hash(bpath) == io::file_hash(bpath2));
  CHECK(io::file_hash(store_sidecar_path(bpath)) == io::file_hash(store_sidecar_path(bpath2)));

  SECTION("corrupted binary magic is rejected") {
    const auto bad = dir / "bad.elds";
    std::filesystem::copy_file(bpath, bad);
    std::fstream f(bad, std::ios::binary | std::ios::in | std::ios::out);
    f.write("ELDX", 4);
    f.close();
    std::filesystem::copy_file(store_sidecar_path(bpath), store_sidecar_path(bad));
    // A broken magic no longer names a binary file, so the JSON parse fails.
    CHECK_THROWS_AS(load_directions(bad), std::runtime_error);
  }

  SECTION("non-unit directions are rejected on load") {
    nlohmann::json j = io::load_json(jpath);
    j["directions"][0][0] = j["directions"][0][0].get<double>() + 0.5;
    const auto tampered = dir / "tampered.json";
    io::save_json(tampered, j);
    CHECK_THROWS_WITH(load_directions(tampered),
                      Catch::Matchers::ContainsSubstring("unit norm"));
  }

  SECTION("empty sets survive both formats") {
    DirectionSet empty;
    empty.source = "sae";
    empty.concept_name = "none";
    empty.d_embed = 16;
    save_directions_json(dir / "empty.json", empty);
    save_directions_elds(dir / "empty.elds", empty);
    CHECK(load_directions(dir / "empty.json").count() == 0);
    CHECK(load_directions(dir / "empty.elds").count() == 0);
  }
}

TEST_CASE("pca on rank-limited model gradients concentrates their energy") {
  Rng rng(2718);
  const std::size_t d_embed = 32, d_latent = 8, rank = 3;
  const std::vector<double> u = detail::random_orthonormal_columns(rng, d_embed, rank);
  std::vector<double> a_vals(d_embed * d_latent, 0.0);
  std::vector<double> v_vals(d_latent * rank);
  for (auto& v : v_vals) v = rng.normal();
  for (std::size_t r = 0; r < d_embed; ++r)
    for (std::size_t c = 0; c < d_latent; ++c)
      for (std::size_t k = 0; k < rank; ++k)
        a_vals[r * d_latent + c] += u[r * rank + k] * v_vals[c * rank + k];
  LinearOracle model(Tensor({d_embed, d_latent}, a_vals));
  NoiseSchedule sched = NoiseSchedule::cosine(20);

  std::vector<std::vector<double>> z0s;
  for (int i = 0; i < 30; ++i) z0s.push_back(rng.normal_vec(d_latent));
  const std::vector<double> e = rng.normal_vec(d_embed);

  CollectConfig cc;
  cc.pairs = 300;
  cc.workers = 1;
  const GradientStore store = collect_dataset(model, z0s, e, sched, cc);
  const PcaBasis basis = fit_pca(store, default_tau(d_embed));
  CHECK(basis.retained == rank);

  for (std::size_t r = 0; r < store.count(); ++r) {
    const auto g = store.row(r);
    double kept = 0.0, total = 0.0;
    for (std::size_t i = 0; i < rank; ++i) {
      const auto comp = basis.component(i);
      double coef = 0.0;
      for (std::size_t c = 0; c < d_embed; ++c) coef += comp[c] * g[c];
      kept += coef * coef;
    }
    for (double v : g) total += v * v;
    if (total > 1e-20) CHECK(kept >= 0.95 * total);
  }
}
