#pragma once

#include <cmath>
#include <fstream>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "elrond/io.hpp"
#include "elrond/losses.hpp"
#include "elrond/rng.hpp"
#include "elrond/sampler.hpp"
#include "elrond/schedule.hpp"
#include "elrond/tensor.hpp"

namespace elrond {

// Stored gradients point uphill in loss; steering toward the scoring target
// uses the negative direction.
struct SemanticGradient {
  std::vector<double> g;
  std::size_t pair_i = 0;
  std::size_t pair_j = 0;
  std::size_t timestep = 0;
  LossKind kind = LossKind::kMse;
  double loss = 0.0;
  double norm = 0.0;
};

class GradientStore {
 public:
  GradientStore(std::size_t d_embed, LossKind kind) : d_embed_(d_embed), kind_(kind) {
    if (d_embed_ == 0) throw std::invalid_argument("GradientStore: d_embed must be positive");
  }

  void append(std::span<const double> row) {
    if (row.size() != d_embed_)
      throw std::invalid_argument("GradientStore: row size " + std::to_string(row.size()) +
                                  " != d_embed " + std::to_string(d_embed_));
    rows_.insert(rows_.end(), row.begin(), row.end());
  }

  std::size_t count() const { return rows_.size() / d_embed_; }
  std::size_t d_embed() const { return d_embed_; }
  LossKind kind() const { return kind_; }

  std::span<const double> row(std::size_t i) const {
    if (i >= count()) throw std::out_of_range("GradientStore: row " + std::to_string(i));
    return std::span<const double>(rows_).subspan(i * d_embed_, d_embed_);
  }
  const std::vector<double>& raw() const { return rows_; }

  const std::string& concept_name() const { return concept_name_; }
  const std::string& checkpoint_hash() const { return checkpoint_hash_; }
  std::size_t timestep() const { return timestep_; }
  std::uint64_t seed() const { return seed_; }

  void set_concept_name(std::string v) { concept_name_ = std::move(v); }
  void set_checkpoint_hash(std::string v) { checkpoint_hash_ = std::move(v); }
  void set_timestep(std::size_t v) { timestep_ = v; }
  void set_seed(std::uint64_t v) { seed_ = v; }

 private:
  std::size_t d_embed_;
  LossKind kind_;
  std::string concept_name_;
  std::string checkpoint_hash_;
  std::size_t timestep_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<double> rows_;
};

inline std::filesystem::path store_sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

inline void save_store(const std::filesystem::path& path, const GradientStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  io::write_magic(out, "ELGD");
  io::write_u32(out, 1);
  io::write_u32(out, static_cast<std::uint32_t>(store.d_embed()));
  io::write_u64(out, store.count());
  io::write_u8(out, loss_kind_code(store.kind()));
  io::write_f64_span(out, store.raw());
  if (!out) throw std::runtime_error("write failed for " + path.string());
  out.close();

  nlohmann::json side;
  side["concept"] = store.concept_name();
  side["checkpoint_hash"] = store.checkpoint_hash();
  side["timestep"] = store.timestep();
  side["seed"] = store.seed();
  io::save_json(store_sidecar_path(path), side);
}

inline GradientStore load_store(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  io::check_magic_version(in, "ELGD", 1, path.string());
  const std::uint32_t d_embed = io::read_u32(in, "d_embed");
  const std::uint64_t count = io::read_u64(in, "count");
  const LossKind kind = loss_kind_from_code(io::read_u8(in, "loss kind"));
  GradientStore store(d_embed, kind);
  std::vector<double> rows(count * d_embed);
  io::read_f64_span(in, rows, "gradient rows");
  if (in.peek() != std::ifstream::traits_type::eof())
    throw std::runtime_error("trailing bytes after " + std::to_string(count) + " rows in " +
                             path.string());
  for (std::uint64_t i = 0; i < count; ++i)
    store.append(std::span<const double>(rows).subspan(i * d_embed, d_embed));

  const nlohmann::json side = io::load_json(store_sidecar_path(path));
  store.set_concept_name(side.at("concept").get<std::string>());
  store.set_checkpoint_hash(side.at("checkpoint_hash").get<std::string>());
  store.set_timestep(side.at("timestep").get<std::size_t>());
  store.set_seed(side.at("seed").get<std::uint64_t>());
  return store;
}

// One semantic gradient: noise z0_i to level t, predict z0 conditioned on
// e_tok, score against z0_j, pull back to the embedding. Model parameters
// stay untouched; only the embedding leaf is on the tape.
template <typename Model>
SemanticGradient collect_gradient(const Model& model, std::span<const double> z0_i,
                                  std::span<const double> z0_j, std::span<const double> e_tok,
                                  std::size_t t, LossKind kind, std::uint64_t seed,
                                  const NoiseSchedule& sched) {
  if (z0_i.size() != z0_j.size())
    throw std::invalid_argument("collect_gradient: latent sizes differ, " +
                                std::to_string(z0_i.size()) + " vs " +
                                std::to_string(z0_j.size()));
  Rng rng(seed);
  const std::vector<double> eps = rng.normal_vec(z0_i.size());
  const std::vector<double> z_t = forward_diffuse(z0_i, t, eps, sched);

  Tape tape;
  Tensor e_row = tape.leaf(Tensor::row(e_tok));
  Tensor zhat = predict_z0_graph(model, tape, z_t, t, e_row, sched);
  Tensor loss = semantic_loss_graph(tape, kind, zhat, z0_j);
  const double lval = loss.value();
  if (!std::isfinite(lval))
    throw std::runtime_error(std::string("non-finite ") + loss_kind_name(kind) +
                             " loss at t=" + std::to_string(t));

  GradientMap grads = tape.backward(loss);
  const Tensor ge = grads.grad(e_row);
  SemanticGradient sg;
  sg.g.assign(ge.values().begin(), ge.values().end());
  sg.timestep = t;
  sg.kind = kind;
  sg.loss = lval;
  double acc = 0.0;
  for (double v : sg.g) acc += v * v;
  sg.norm = std::sqrt(acc);
  if (!std::isfinite(sg.norm))
    throw std::runtime_error(std::string("non-finite ") + loss_kind_name(kind) +
                             " gradient at t=" + std::to_string(t));
  return sg;
}

struct CollectConfig {
  std::size_t pairs = 5000;
  std::size_t timestep = 0;  // 0 picks the schedule's last step
  LossKind kind = LossKind::kMse;
  std::uint64_t seed = 7;
  std::size_t workers = 0;  // 0 defers to worker_count()
};

// Pairs draw (i, j), i != j, uniformly; one fresh noise vector per pair.
// Per-pair RNG streams make the result independent of the worker split.
template <typename Model>
GradientStore collect_dataset(const Model& model, const std::vector<std::vector<double>>& z0s,
                              std::span<const double> e_tok, const NoiseSchedule& sched,
                              const CollectConfig& cfg, const std::string& concept_name = "",
                              const std::string& checkpoint_hash = "") {
  if (cfg.pairs < 1) throw std::invalid_argument("collect_dataset: need at least one pair");
  if (z0s.size() < 2) throw std::invalid_argument("collect_dataset: need at least two samples");
  const std::size_t t = cfg.timestep == 0 ? sched.T() : cfg.timestep;
  if (t < 1 || t > sched.T())
    throw std::invalid_argument("collect_dataset: timestep " + std::to_string(t) +
                                " outside schedule of length " + std::to_string(sched.T()));

  const std::size_t n = z0s.size();
  std::vector<std::optional<SemanticGradient>> results(cfg.pairs);
  std::vector<std::string> dropped(cfg.pairs);

  auto run_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p) {
      Rng prng(cfg.seed, 1000 + p);
      const std::size_t i = prng.index(n);
      std::size_t j = prng.index(n - 1);
      if (j >= i) ++j;
      const std::uint64_t eps_seed = prng.raw();
      try {
        SemanticGradient sg =
            collect_gradient(model, z0s[i], z0s[j], e_tok, t, cfg.kind, eps_seed, sched);
        sg.pair_i = i;
        sg.pair_j = j;
        results[p] = std::move(sg);
      } catch (const std::runtime_error& e) {
        dropped[p] = "pair " + std::to_string(p) + " (" + std::to_string(i) + ", " +
                     std::to_string(j) + "): " + e.what();
      }
    }
  };

  std::size_t workers = cfg.workers == 0 ? io::worker_count() : cfg.workers;
  workers = std::min(workers, cfg.pairs);
  if (workers <= 1) {
    run_range(0, cfg.pairs);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (cfg.pairs + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(cfg.pairs, begin + chunk);
      pool.emplace_back([&, w, begin, end] {
        try {
          run_range(begin, end);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
  }

  GradientStore store(e_tok.size(), cfg.kind);
  store.set_concept_name(concept_name);
  store.set_checkpoint_hash(checkpoint_hash);
  store.set_timestep(t);
  store.set_seed(cfg.seed);
  std::size_t failed = 0;
  for (std::size_t p = 0; p < cfg.pairs; ++p) {
    if (results[p]) {
      store.append(results[p]->g);
    } else {
      ++failed;
      std::cerr << "elrond: dropped " << dropped[p] << "\n";
    }
  }
  if (failed > 0)
    std::cerr << "elrond: store holds " << store.count() << " of " << cfg.pairs
              << " requested gradients\n";
  return store;
}

struct TimestepReport {
  std::vector<std::size_t> timesteps;
  std::vector<double> mean_norm;
  std::vector<double> steer_success;  // empty without a mode assigner
};

using ModeAssigner = std::function<std::size_t(std::span<const double>)>;

// Per-timestep mean gradient norm, plus the rate at which one descent step
// of size lambda lands a fresh sample in the scoring target's mode.
template <typename Model>
TimestepReport gradient_norm_by_timestep(const Model& model,
                                         const std::vector<std::vector<double>>& z0s,
                                         std::span<const double> e_tok,
                                         const NoiseSchedule& sched,
                                         std::span<const std::size_t> timesteps, LossKind kind,
                                         std::uint64_t seed, std::size_t pairs,
                                         double lambda = 2.0, const ModeAssigner& assign = {}) {
  if (z0s.size() < 2)
    throw std::invalid_argument("gradient_norm_by_timestep: need at least two samples");
  if (pairs < 1) throw std::invalid_argument("gradient_norm_by_timestep: need at least one pair");
  for (std::size_t t : timesteps)
    if (t < 1 || t > sched.T())
      throw std::invalid_argument("gradient_norm_by_timestep: timestep " + std::to_string(t) +
                                  " outside schedule of length " + std::to_string(sched.T()));

  TimestepReport report;
  report.timesteps.assign(timesteps.begin(), timesteps.end());
  const std::size_t n = z0s.size();
  for (std::size_t t : timesteps) {
    double norm_sum = 0.0;
    std::size_t used = 0;
    std::size_t landed = 0;
    for (std::size_t p = 0; p < pairs; ++p) {
      Rng prng(mix_seed(seed, t), p);
      const std::size_t i = prng.index(n);
      std::size_t j = prng.index(n - 1);
      if (j >= i) ++j;
      const std::uint64_t eps_seed = prng.raw();
      const std::uint64_t sample_seed = prng.raw();
      SemanticGradient sg;
      try {
        sg = collect_gradient(model, z0s[i], z0s[j], e_tok, t, kind, eps_seed, sched);
      } catch (const std::runtime_error&) {
        continue;
      }
      norm_sum += sg.norm;
      ++used;
      if (assign) {
        std::vector<double> steered(e_tok.begin(), e_tok.end());
        if (sg.norm > 1e-15)
          for (std::size_t c = 0; c < steered.size(); ++c)
            steered[c] -= lambda * sg.g[c] / sg.norm;
        const std::vector<double> z = sample(model, steered, sched, sample_seed);
        if (assign(z) == assign(z0s[j])) ++landed;
      }
    }
    report.mean_norm.push_back(used ? norm_sum / static_cast<double>(used) : 0.0);
    if (assign)
      report.steer_success.push_back(used ? static_cast<double>(landed) /
                                                static_cast<double>(used)
                                          : 0.0);
  }
  return report;
}

}  // namespace elrond
