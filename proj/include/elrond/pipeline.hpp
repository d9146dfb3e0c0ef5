#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "elrond/concepts.hpp"
#include "elrond/denoiser.hpp"
#include "elrond/directions.hpp"
#include "elrond/geometry.hpp"
#include "elrond/gradients.hpp"
#include "elrond/io.hpp"
#include "elrond/metrics.hpp"
#include "elrond/pca.hpp"
#include "elrond/rng.hpp"
#include "elrond/sae.hpp"
#include "elrond/sampler.hpp"
#include "elrond/schedule.hpp"
#include "elrond/steering.hpp"

namespace elrond {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kManifestFormat = 1;

namespace detail {

inline LossKind parse_loss_kind(const std::string& name) {
  if (name == "mse") return LossKind::kMse;
  if (name == "chamfer") return LossKind::kChamfer;
  if (name == "mmd") return LossKind::kMmd;
  throw std::invalid_argument("unknown loss kind '" + name + "' (mse, chamfer, mmd)");
}

// Strict key check: a typoed config key should fail loudly, not silently
// fall back to a default.
inline void reject_unknown_keys(const nlohmann::json& j, std::span<const char* const> known,
                                const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) {
        ok = true;
        break;
      }
    if (!ok) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace detail

// One JSON document drives every stage; defaults give a small run that
// finishes in minutes on one core.
struct RunConfig {
  std::filesystem::path out = "run";
  std::uint64_t seed = 1;

  std::string concept_path;  // nonempty: load this spec instead of generating
  ConceptParams concept_params{
      .name = "demo", .d_embed = 16, .d_latent = 8, .n_modes = 3, .k_factors = 3,
      .mode_separation = 8.0, .factor_scale = 0.4, .eta = 0.02};

  std::size_t schedule_T = 50;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t time_features = 8;

  std::size_t train_steps = 3000;
  std::size_t train_batch = 64;
  double train_lr = 2e-3;
  std::size_t train_per_concept = 400;

  std::size_t n_samples = 300;

  std::size_t grad_pairs = 3000;
  std::size_t grad_timestep = 0;  // 0 picks the schedule's last step
  std::string grad_loss = "mse";
  std::size_t workers = 0;  // 0 defers to the environment cap

  double tau = 0.0;  // 0 picks the dimension-scaled default

  std::size_t sae_dict = 0;  // 0 picks 2 * d_embed
  std::size_t sae_k = 4;
  std::size_t sae_steps = 3000;
  std::size_t sae_batch = 64;
  double sae_lr = 1e-3;

  std::vector<double> lambda_grid = {0.25, 0.5, 1.0, 2.0, 4.0};
  std::size_t skip_steps = 5;
  std::size_t steer_trials = 100;

  std::size_t eval_k_nn = 3;
  double min_mode_share = 0.02;

  double lid_eps = 0.0;  // 0 picks the automatic floor

  std::vector<std::size_t> stability_sizes;  // empty: derived from grad_pairs
  std::size_t stability_repeats = 10;

  std::size_t linearity_trajectories = 24;
  std::size_t linearity_points = 9;

  void validate() const {
    if (out.empty()) throw std::invalid_argument("config: out directory must be set");
    if (concept_path.empty()) {
      if (concept_params.n_modes < 2)
        throw std::invalid_argument("config: concept.n_modes must be >= 2");
      if (concept_params.k_factors < 1 || concept_params.k_factors > concept_params.d_latent)
        throw std::invalid_argument("config: concept.k_factors outside [1, d_latent]");
      if (concept_params.d_embed < 2 || concept_params.d_latent < 2)
        throw std::invalid_argument("config: concept dims must be >= 2");
    }
    if (schedule_T < 2) throw std::invalid_argument("config: model.schedule_T must be >= 2");
    if (hidden.empty()) throw std::invalid_argument("config: model.hidden must be nonempty");
    for (std::size_t h : hidden)
      if (h < 1) throw std::invalid_argument("config: model.hidden widths must be positive");
    if (train_steps < 1 || train_batch < 1)
      throw std::invalid_argument("config: train.steps and train.batch must be positive");
    if (!(train_lr > 0.0)) throw std::invalid_argument("config: train.lr must be positive");
    if (train_per_concept < 2)
      throw std::invalid_argument("config: train.per_concept must be >= 2");
    if (n_samples < 2) throw std::invalid_argument("config: sample.count must be >= 2");
    if (grad_pairs < 2) throw std::invalid_argument("config: grads.pairs must be >= 2");
    detail::parse_loss_kind(grad_loss);
    if (tau < 0.0 || tau >= 1.0) throw std::invalid_argument("config: pca.tau outside [0, 1)");
    if (sae_k < 1) throw std::invalid_argument("config: sae.k must be positive");
    if (sae_dict != 0 && sae_dict < sae_k)
      throw std::invalid_argument("config: sae.dict must be >= sae.k");
    if (sae_steps < 1 || sae_batch < 1)
      throw std::invalid_argument("config: sae.steps and sae.batch must be positive");
    if (!(sae_lr > 0.0)) throw std::invalid_argument("config: sae.lr must be positive");
    if (lambda_grid.empty()) throw std::invalid_argument("config: steer.lambda_grid is empty");
    for (double l : lambda_grid)
      if (!(l > 0.0)) throw std::invalid_argument("config: steer.lambda_grid must be positive");
    if (steer_trials < 1) throw std::invalid_argument("config: steer.trials must be positive");
    if (eval_k_nn < 1) throw std::invalid_argument("config: eval.k_nn must be positive");
    if (min_mode_share < 0.0 || min_mode_share >= 1.0)
      throw std::invalid_argument("config: eval.min_mode_share outside [0, 1)");
    if (lid_eps < 0.0) throw std::invalid_argument("config: lid.eps must be >= 0");
    for (std::size_t s : stability_sizes)
      if (s < 2) throw std::invalid_argument("config: stability.sizes entries must be >= 2");
    if (stability_repeats < 1)
      throw std::invalid_argument("config: stability.repeats must be positive");
    if (linearity_trajectories < 1)
      throw std::invalid_argument("config: linearity.trajectories must be positive");
    if (linearity_points < 3)
      throw std::invalid_argument("config: linearity.points must be >= 3");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["out"] = out.string();
    j["seed"] = seed;
    j["concept"] = {{"path", concept_path},
                    {"name", concept_params.name},
                    {"d_embed", concept_params.d_embed},
                    {"d_latent", concept_params.d_latent},
                    {"n_modes", concept_params.n_modes},
                    {"k_factors", concept_params.k_factors},
                    {"mode_separation", concept_params.mode_separation},
                    {"factor_scale", concept_params.factor_scale},
                    {"eta", concept_params.eta}};
    j["model"] = {{"schedule_T", schedule_T}, {"hidden", hidden}, {"time_features", time_features}};
    j["train"] = {{"steps", train_steps},
                  {"batch", train_batch},
                  {"lr", train_lr},
                  {"per_concept", train_per_concept}};
    j["sample"] = {{"count", n_samples}};
    j["grads"] = {{"pairs", grad_pairs},
                  {"timestep", grad_timestep},
                  {"loss", grad_loss},
                  {"workers", workers}};
    j["pca"] = {{"tau", tau}};
    j["sae"] = {{"dict", sae_dict},
                {"k", sae_k},
                {"steps", sae_steps},
                {"batch", sae_batch},
                {"lr", sae_lr}};
    j["steer"] = {{"lambda_grid", lambda_grid},
                  {"skip_steps", skip_steps},
                  {"trials", steer_trials}};
    j["eval"] = {{"k_nn", eval_k_nn}, {"min_mode_share", min_mode_share}};
    j["lid"] = {{"eps", lid_eps}};
    j["stability"] = {{"sizes", stability_sizes}, {"repeats", stability_repeats}};
    j["linearity"] = {{"trajectories", linearity_trajectories}, {"points", linearity_points}};
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j) {
    static constexpr const char* top[] = {"out",  "seed", "concept", "model",     "train",
                                          "sample", "grads", "pca",   "sae",       "steer",
                                          "eval", "lid",  "stability", "linearity"};
    detail::reject_unknown_keys(j, top, "config");
    RunConfig c;
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    detail::read_field(j, "seed", c.seed);
    if (j.contains("concept")) {
      const auto& s = j.at("concept");
      static constexpr const char* keys[] = {"path",      "name",           "d_embed",
                                             "d_latent",  "n_modes",        "k_factors",
                                             "mode_separation", "factor_scale", "eta"};
      detail::reject_unknown_keys(s, keys, "config.concept");
      detail::read_field(s, "path", c.concept_path);
      detail::read_field(s, "name", c.concept_params.name);
      detail::read_field(s, "d_embed", c.concept_params.d_embed);
      detail::read_field(s, "d_latent", c.concept_params.d_latent);
      detail::read_field(s, "n_modes", c.concept_params.n_modes);
      detail::read_field(s, "k_factors", c.concept_params.k_factors);
      detail::read_field(s, "mode_separation", c.concept_params.mode_separation);
      detail::read_field(s, "factor_scale", c.concept_params.factor_scale);
      detail::read_field(s, "eta", c.concept_params.eta);
    }
    if (j.contains("model")) {
      const auto& s = j.at("model");
      static constexpr const char* keys[] = {"schedule_T", "hidden", "time_features"};
      detail::reject_unknown_keys(s, keys, "config.model");
      detail::read_field(s, "schedule_T", c.schedule_T);
      detail::read_field(s, "hidden", c.hidden);
      detail::read_field(s, "time_features", c.time_features);
    }
    if (j.contains("train")) {
      const auto& s = j.at("train");
      static constexpr const char* keys[] = {"steps", "batch", "lr", "per_concept"};
      detail::reject_unknown_keys(s, keys, "config.train");
      detail::read_field(s, "steps", c.train_steps);
      detail::read_field(s, "batch", c.train_batch);
      detail::read_field(s, "lr", c.train_lr);
      detail::read_field(s, "per_concept", c.train_per_concept);
    }
    if (j.contains("sample")) {
      const auto& s = j.at("sample");
      static constexpr const char* keys[] = {"count"};
      detail::reject_unknown_keys(s, keys, "config.sample");
      detail::read_field(s, "count", c.n_samples);
    }
    if (j.contains("grads")) {
      const auto& s = j.at("grads");
      static constexpr const char* keys[] = {"pairs", "timestep", "loss", "workers"};
      detail::reject_unknown_keys(s, keys, "config.grads");
      detail::read_field(s, "pairs", c.grad_pairs);
      detail::read_field(s, "timestep", c.grad_timestep);
      detail::read_field(s, "loss", c.grad_loss);
      detail::read_field(s, "workers", c.workers);
    }
    if (j.contains("pca")) {
      const auto& s = j.at("pca");
      static constexpr const char* keys[] = {"tau"};
      detail::reject_unknown_keys(s, keys, "config.pca");
      detail::read_field(s, "tau", c.tau);
    }
    if (j.contains("sae")) {
      const auto& s = j.at("sae");
      static constexpr const char* keys[] = {"dict", "k", "steps", "batch", "lr"};
      detail::reject_unknown_keys(s, keys, "config.sae");
      detail::read_field(s, "dict", c.sae_dict);
      detail::read_field(s, "k", c.sae_k);
      detail::read_field(s, "steps", c.sae_steps);
      detail::read_field(s, "batch", c.sae_batch);
      detail::read_field(s, "lr", c.sae_lr);
    }
    if (j.contains("steer")) {
      const auto& s = j.at("steer");
      static constexpr const char* keys[] = {"lambda_grid", "skip_steps", "trials"};
      detail::reject_unknown_keys(s, keys, "config.steer");
      detail::read_field(s, "lambda_grid", c.lambda_grid);
      detail::read_field(s, "skip_steps", c.skip_steps);
      detail::read_field(s, "trials", c.steer_trials);
    }
    if (j.contains("eval")) {
      const auto& s = j.at("eval");
      static constexpr const char* keys[] = {"k_nn", "min_mode_share"};
      detail::reject_unknown_keys(s, keys, "config.eval");
      detail::read_field(s, "k_nn", c.eval_k_nn);
      detail::read_field(s, "min_mode_share", c.min_mode_share);
    }
    if (j.contains("lid")) {
      const auto& s = j.at("lid");
      static constexpr const char* keys[] = {"eps"};
      detail::reject_unknown_keys(s, keys, "config.lid");
      detail::read_field(s, "eps", c.lid_eps);
    }
    if (j.contains("stability")) {
      const auto& s = j.at("stability");
      static constexpr const char* keys[] = {"sizes", "repeats"};
      detail::reject_unknown_keys(s, keys, "config.stability");
      detail::read_field(s, "sizes", c.stability_sizes);
      detail::read_field(s, "repeats", c.stability_repeats);
    }
    if (j.contains("linearity")) {
      const auto& s = j.at("linearity");
      static constexpr const char* keys[] = {"trajectories", "points"};
      detail::reject_unknown_keys(s, keys, "config.linearity");
      detail::read_field(s, "trajectories", c.linearity_trajectories);
      detail::read_field(s, "points", c.linearity_points);
    }
    c.validate();
    return c;
  }

  std::string hash() const {
    const std::string s = to_json().dump();
    return io::hash_hex(io::fnv1a_64(s.data(), s.size()));
  }
};

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw std::invalid_argument("config file not found: " + path.string());
  return RunConfig::from_json(io::load_json(path));
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  io::save_json(path, cfg.to_json());
}

// Per-stage record: wall seconds plus a content hash for every artifact the
// stage wrote, keyed by path relative to the run directory.
struct StageRecord {
  double seconds = 0.0;
  std::map<std::string, std::string> artifacts;
};

struct RunManifest {
  std::string tool_version = kToolVersion;
  std::string config_hash;
  nlohmann::json config;
  std::map<std::string, StageRecord> stages;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = kManifestFormat;
    j["tool_version"] = tool_version;
    j["config_hash"] = config_hash;
    j["config"] = config;
    nlohmann::json st = nlohmann::json::object();
    for (const auto& [name, rec] : stages) {
      nlohmann::json r;
      r["seconds"] = rec.seconds;
      r["artifacts"] = rec.artifacts;
      st[name] = std::move(r);
    }
    j["stages"] = std::move(st);
    return j;
  }

  static RunManifest from_json(const nlohmann::json& j) {
    if (j.at("format").get<int>() != kManifestFormat)
      throw std::runtime_error("manifest: unsupported format " + j.at("format").dump());
    RunManifest m;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    for (const auto& [name, r] : j.at("stages").items()) {
      StageRecord rec;
      rec.seconds = r.at("seconds").get<double>();
      rec.artifacts = r.at("artifacts").get<std::map<std::string, std::string>>();
      m.stages[name] = std::move(rec);
    }
    return m;
  }
};

inline std::filesystem::path manifest_path(const RunConfig& cfg) {
  return cfg.out / "manifest.json";
}

inline void save_manifest(const std::filesystem::path& path, const RunManifest& m) {
  io::save_json(path, m.to_json());
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  return RunManifest::from_json(io::load_json(path));
}

// Loads the run directory's manifest when it matches the current config;
// any mismatch or parse failure starts a fresh record instead.
inline RunManifest open_manifest(const RunConfig& cfg) {
  RunManifest fresh;
  fresh.config_hash = cfg.hash();
  fresh.config = cfg.to_json();
  const auto path = manifest_path(cfg);
  if (!std::filesystem::exists(path)) return fresh;
  try {
    RunManifest m = load_manifest(path);
    if (m.config_hash != fresh.config_hash) return fresh;
    if (m.tool_version != fresh.tool_version) return fresh;
    return m;
  } catch (const std::exception&) {
    return fresh;
  }
}

// A stage is current when the manifest lists it and every artifact is still
// present with an unchanged content hash.
inline bool stage_current(const RunManifest& m, const std::string& stage,
                          const std::filesystem::path& out) {
  const auto it = m.stages.find(stage);
  if (it == m.stages.end() || it->second.artifacts.empty()) return false;
  for (const auto& [rel, hash] : it->second.artifacts) {
    const auto p = out / rel;
    if (!std::filesystem::exists(p)) return false;
    if (io::file_hash(p) != hash) return false;
  }
  return true;
}

namespace detail {

// Runs one stage unless its artifacts are already current, then records
// timing and artifact hashes and persists the manifest.
template <typename Fn>
bool run_stage(const RunConfig& cfg, RunManifest& man, const std::string& name,
               const std::vector<std::string>& artifacts, bool force, Fn&& body) {
  std::filesystem::create_directories(cfg.out);
  if (!force && stage_current(man, name, cfg.out)) return false;
  const auto t0 = std::chrono::steady_clock::now();
  body();
  const auto t1 = std::chrono::steady_clock::now();
  StageRecord rec;
  rec.seconds = std::chrono::duration<double>(t1 - t0).count();
  for (const auto& rel : artifacts) {
    const auto p = cfg.out / rel;
    if (!std::filesystem::exists(p))
      throw std::runtime_error("stage " + name + " did not produce " + p.string());
    rec.artifacts[rel] = io::file_hash(p);
  }
  man.stages[name] = std::move(rec);
  save_manifest(manifest_path(cfg), man);
  return true;
}

inline std::string sidecar_rel(const std::filesystem::path& rel) {
  return store_sidecar_path(rel).string();
}

// Contrast parameters mirror a loaded spec so the second concept matches
// its shape even when the original generation knobs are unknown.
inline ConceptParams params_like(const ConceptSpec& spec) {
  ConceptParams p;
  p.name = spec.name + "-alt";
  p.d_embed = spec.d_embed;
  p.d_latent = spec.d_latent;
  p.n_modes = std::max<std::size_t>(spec.modes.size(), 2);
  p.k_factors = spec.k_factors;
  double sep = 0.0;
  for (const auto& m : spec.modes) {
    double nrm = 0.0;
    for (double v : m.center) nrm += v * v;
    sep += std::sqrt(nrm);
  }
  p.mode_separation = spec.modes.empty() ? 6.0 : sep / static_cast<double>(spec.modes.size());
  double fs = 0.0;
  for (double v : spec.factor_scale) fs += v;
  p.factor_scale = spec.factor_scale.empty() ? 0.4 : fs / static_cast<double>(spec.factor_scale.size());
  p.eta = spec.eta;
  return p;
}

inline SampleSet load_sample_set(const std::filesystem::path& path, std::size_t expect_d) {
  const nlohmann::json j = io::load_json(path);
  const auto d = j.at("d_latent").get<std::size_t>();
  if (expect_d != 0 && d != expect_d)
    throw std::runtime_error(path.string() + ": latent dimension " + std::to_string(d) +
                             " does not match the model's " + std::to_string(expect_d));
  SampleSet s = j.at("samples").get<SampleSet>();
  if (s.size() != j.at("count").get<std::size_t>())
    throw std::runtime_error(path.string() + ": sample count does not match header");
  for (const auto& row : s)
    if (row.size() != d) throw std::runtime_error(path.string() + ": ragged sample row");
  return s;
}

inline nlohmann::json summary_json(const MetricSummary& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}};
}

}  // namespace detail

// Artifact names are fixed relative to the run directory so stages can find
// each other's outputs without extra plumbing.
namespace artifact {
inline constexpr const char* kConcept = "concept.json";
inline constexpr const char* kConceptB = "concept_b.json";
inline constexpr const char* kModel = "model.elck";
inline constexpr const char* kTrainLoss = "train_loss.csv";
inline constexpr const char* kSamples = "samples.json";
inline constexpr const char* kGrads = "grads.elgd";
inline constexpr const char* kPca = "pca.json";
inline constexpr const char* kDirectionsPca = "directions_pca.elds";
inline constexpr const char* kSae = "sae.json";
inline constexpr const char* kDirectionsSae = "directions_sae.elds";
inline constexpr const char* kSteer = "steer.json";
inline constexpr const char* kEval = "eval.json";
inline constexpr const char* kLid = "lid.json";
inline constexpr const char* kStabilityCsv = "stability.csv";
inline constexpr const char* kStabilityJson = "stability.json";
inline constexpr const char* kLinearity = "linearity.json";
}  // namespace artifact

// Writes the primary concept and a contrast concept with matching shape;
// the contrast supplies the second conditioning endpoint downstream.
inline bool stage_gen_concept(const RunConfig& cfg, RunManifest& man, bool force) {
  return detail::run_stage(
      cfg, man, "gen-concept", {artifact::kConcept, artifact::kConceptB}, force, [&] {
        ConceptSpec a;
        ConceptParams alt;
        if (!cfg.concept_path.empty()) {
          a = load_concept(cfg.concept_path);
          alt = detail::params_like(a);
        } else {
          a = make_concept(cfg.concept_params, mix_seed(cfg.seed, 101));
          alt = cfg.concept_params;
          alt.name += "-alt";
        }
        const ConceptSpec b = make_concept(alt, mix_seed(cfg.seed, 102));
        save_concept((cfg.out / artifact::kConcept).string(), a);
        save_concept((cfg.out / artifact::kConceptB).string(), b);
      });
}

inline bool stage_train_diffusion(const RunConfig& cfg, RunManifest& man, bool force) {
  return detail::run_stage(
      cfg, man, "train-diffusion", {artifact::kModel, artifact::kTrainLoss}, force, [&] {
        const ConceptSpec a = load_concept((cfg.out / artifact::kConcept).string());
        const ConceptSpec b = load_concept((cfg.out / artifact::kConceptB).string());
        TrainingSet data;
        data.embeddings = {a.e_tok, b.e_tok};
        const auto rows_a = sample_concept(a, cfg.train_per_concept, mix_seed(cfg.seed, 21));
        const auto rows_b = sample_concept(b, cfg.train_per_concept, mix_seed(cfg.seed, 22));
        for (const auto& r : rows_a) {
          data.latents.push_back(r.z0);
          data.concept_of.push_back(0);
        }
        for (const auto& r : rows_b) {
          data.latents.push_back(r.z0);
          data.concept_of.push_back(1);
        }
        DenoiserConfig dc;
        dc.d_latent = a.d_latent;
        dc.d_embed = a.d_embed;
        dc.hidden = cfg.hidden;
        dc.time_features = cfg.time_features;
        DenoiserModel model(dc, mix_seed(cfg.seed, 2));
        const NoiseSchedule sched = NoiseSchedule::cosine(cfg.schedule_T);
        TrainConfig tc;
        tc.steps = cfg.train_steps;
        tc.batch = cfg.train_batch;
        tc.lr = cfg.train_lr;
        tc.seed = mix_seed(cfg.seed, 3);
        const TrainResult res = train_denoiser(model, data, sched, tc);
        save_checkpoint(cfg.out / artifact::kModel, model, cfg.schedule_T);
        std::ofstream csv(cfg.out / artifact::kTrainLoss);
        if (!csv) throw std::runtime_error("cannot open train loss csv for writing");
        csv << "step,loss\n";
        for (std::size_t i = 0; i < res.loss_curve.size(); ++i)
          csv << i << "," << res.loss_curve[i] << "\n";
        if (!csv) throw std::runtime_error("train loss csv write failed");
      });
}

inline bool stage_sample(const RunConfig& cfg, RunManifest& man, bool force) {
  return detail::run_stage(cfg, man, "sample", {artifact::kSamples}, force, [&] {
    const ConceptSpec a = load_concept((cfg.out / artifact::kConcept).string());
    const LoadedCheckpoint lc = load_checkpoint(cfg.out / artifact::kModel);
    const NoiseSchedule sched = NoiseSchedule::cosine(lc.schedule_T);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < cfg.n_samples; ++i)
      rows.push_back(sample(lc.model, a.e_tok, sched, mix_seed(cfg.seed, 300000 + i)));
    nlohmann::json j;
    j["concept"] = a.name;
    j["d_latent"] = lc.model.latent_dim();
    j["count"] = cfg.n_samples;
    j["seed"] = cfg.seed;
    j["samples"] = std::move(rows);
    io::save_json(cfg.out / artifact::kSamples, j);
  });
}

inline bool stage_collect_grads(const RunConfig& cfg, RunManifest& man, bool force) {
  const std::vector<std::string> arts = {artifact::kGrads, detail::sidecar_rel(artifact::kGrads)};
  return detail::run_stage(cfg, man, "collect-grads", arts, force, [&] {
    const ConceptSpec a = load_concept((cfg.out / artifact::kConcept).string());
    const LoadedCheckpoint lc = load_checkpoint(cfg.out / artifact::kModel);
    const NoiseSchedule sched = NoiseSchedule::cosine(lc.schedule_T);
    const SampleSet z0s =
        detail::load_sample_set(cfg.out / artifact::kSamples, lc.model.latent_dim());
    CollectConfig cc;
    cc.pairs = cfg.grad_pairs;
    cc.timestep = cfg.grad_timestep;
    cc.kind = detail::parse_loss_kind(cfg.grad_loss);
    cc.seed = mix_seed(cfg.seed, 4);
    cc.workers = cfg.workers;
    const std::string ck_hash = io::file_hash(cfg.out / artifact::kModel);
    const GradientStore store =
        collect_dataset(lc.model, z0s, a.e_tok, sched, cc, a.name, ck_hash);
    save_store(cfg.out / artifact::kGrads, store);
  });
}

inline bool stage_decompose_pca(const RunConfig& cfg, RunManifest& man, bool force) {
  const std::vector<std::string> arts = {artifact::kPca, artifact::kDirectionsPca,
                                         detail::sidecar_rel(artifact::kDirectionsPca)};
  return detail::run_stage(cfg, man, "decompose-pca", arts, force, [&] {
    const GradientStore store = load_store(cfg.out / artifact::kGrads);
    const double tau = cfg.tau > 0.0 ? cfg.tau : default_tau(store.d_embed());
    const PcaBasis basis = fit_pca(store, tau);
    nlohmann::json j;
    j["concept"] = store.concept_name();
    j["d"] = basis.d;
    j["tau"] = basis.tau;
    j["retained"] = basis.retained;
    j["total_variance"] = basis.total_variance;
    j["ratios"] = basis.ratios;
    j["mean"] = basis.mean;
    nlohmann::json comps = nlohmann::json::array();
    for (std::size_t i = 0; i < basis.retained; ++i) {
      const auto c = basis.component(i);
      comps.push_back(std::vector<double>(c.begin(), c.end()));
    }
    j["components"] = std::move(comps);
    io::save_json(cfg.out / artifact::kPca, j);
    const DirectionSet ds = directions_from(basis, store.concept_name());
    save_directions_elds(cfg.out / artifact::kDirectionsPca, ds);
  });
}

inline bool stage_train_sae(const RunConfig& cfg, RunManifest& man, bool force) {
  const std::vector<std::string> arts = {artifact::kSae, artifact::kDirectionsSae,
                                         detail::sidecar_rel(artifact::kDirectionsSae)};
  return detail::run_stage(cfg, man, "train-sae", arts, force, [&] {
    const GradientStore store = load_store(cfg.out / artifact::kGrads);
    const std::size_t d = store.d_embed();
    const std::size_t dict = cfg.sae_dict != 0 ? cfg.sae_dict : 2 * d;
    SaeModel model(d, dict, cfg.sae_k, mix_seed(cfg.seed, 5));
    SaeConfig sc;
    sc.steps = cfg.sae_steps;
    sc.batch = cfg.sae_batch;
    sc.lr = cfg.sae_lr;
    sc.seed = mix_seed(cfg.seed, 5);
    const SaeTrainResult res = train_sae(model, store, sc);
    double denom = 0.0;
    for (std::size_t r : res.holdout_rows) {
      const auto x = store.row(r);
      double acc = 0.0;
      for (double v : x) acc += v * v;
      denom += acc / static_cast<double>(x.size());
    }
    denom /= static_cast<double>(res.holdout_rows.size());
    const double rel = denom > 0.0 ? res.holdout_after / denom : 0.0;
    const AliveReport alive = alive_features(model, store);
    nlohmann::json j;
    j["concept"] = store.concept_name();
    j["d"] = d;
    j["dict"] = dict;
    j["k"] = cfg.sae_k;
    j["steps"] = cfg.sae_steps;
    j["holdout_before"] = res.holdout_before;
    j["holdout_after"] = res.holdout_after;
    j["rel_recon_error"] = rel;
    j["alive_count"] = alive.alive.size();
    j["density"] = alive.density;
    nlohmann::json params = nlohmann::json::object();
    params["enc_t"] = std::vector<double>(model.enc_t().values().begin(),
                                          model.enc_t().values().end());
    params["dec_t"] = std::vector<double>(model.dec_t().values().begin(),
                                          model.dec_t().values().end());
    params["b_pre"] = std::vector<double>(model.b_pre().values().begin(),
                                          model.b_pre().values().end());
    j["params"] = std::move(params);
    io::save_json(cfg.out / artifact::kSae, j);
    const DirectionSet ds = directions_from(model, alive, store.concept_name());
    save_directions_elds(cfg.out / artifact::kDirectionsSae, ds);
  });
}

// Rebuilds an SAE from the weights persisted by stage_train_sae.
inline SaeModel load_sae_model(const std::filesystem::path& sae_json) {
  const nlohmann::json j = io::load_json(sae_json);
  const auto d = j.at("d").get<std::size_t>();
  const auto dict = j.at("dict").get<std::size_t>();
  const auto k = j.at("k").get<std::size_t>();
  SaeModel model(d, dict, k, 0);
  const char* names[] = {"enc_t", "dec_t", "b_pre"};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto v = j.at("params").at(names[i]).get<std::vector<double>>();
    auto dst = model.parameters()[i].mutable_values();
    if (v.size() != dst.size())
      throw std::runtime_error(sae_json.string() + ": parameter block '" + names[i] +
                               "' has wrong size");
    std::copy(v.begin(), v.end(), dst.begin());
  }
  return model;
}

inline bool stage_steer(const RunConfig& cfg, RunManifest& man, bool force) {
  return detail::run_stage(cfg, man, "steer", {artifact::kSteer}, force, [&] {
    const ConceptSpec a = load_concept((cfg.out / artifact::kConcept).string());
    const LoadedCheckpoint lc = load_checkpoint(cfg.out / artifact::kModel);
    const NoiseSchedule sched = NoiseSchedule::cosine(lc.schedule_T);
    const DirectionSet dirs = load_directions(cfg.out / artifact::kDirectionsPca);
    if (dirs.count() == 0)
      throw std::runtime_error("steer: the decomposition retained no directions");
    nlohmann::json grid = nlohmann::json::array();
    double best_lambda = 0.0, best_ratio = -1.0;
    for (double lambda : cfg.lambda_grid) {
      const ShiftReport rep =
          discovered_vs_random(lc.model, a.e_tok, dirs, sched, cfg.steer_trials, lambda,
                               cfg.skip_steps, mix_seed(cfg.seed, 6));
      grid.push_back({{"lambda", lambda},
                      {"discovered", rep.discovered},
                      {"random", rep.random},
                      {"ratio", rep.ratio()}});
      if (rep.ratio() > best_ratio) {
        best_ratio = rep.ratio();
        best_lambda = lambda;
      }
    }
    nlohmann::json j;
    j["concept"] = a.name;
    j["trials"] = cfg.steer_trials;
    j["skip_steps"] = cfg.skip_steps;
    j["directions"] = dirs.count();
    j["grid"] = std::move(grid);
    j["best_lambda"] = best_lambda;
    j["best_ratio"] = best_ratio;
    io::save_json(cfg.out / artifact::kSteer, j);
  });
}

inline bool stage_eval(const RunConfig& cfg, RunManifest& man, bool force) {
  return detail::run_stage(cfg, man, "eval", {artifact::kEval}, force, [&] {
    const ConceptSpec a = load_concept((cfg.out / artifact::kConcept).string());
    const SampleSet generated = detail::load_sample_set(cfg.out / artifact::kSamples, a.d_latent);
    const auto truth = sample_concept(a, generated.size(), mix_seed(cfg.seed, 9));
    SampleSet reference;
    reference.reserve(truth.size());
    for (const auto& r : truth) reference.push_back(r.z0);
    SampleSet centers;
    centers.reserve(a.modes.size());
    for (const auto& m : a.modes) centers.push_back(m.center);
    EvalConfig ec;
    ec.k_nn = cfg.eval_k_nn;
    ec.min_mode_share = cfg.min_mode_share;
    const EvalReport rep = evaluate_samples(generated, reference, centers, ec);
    nlohmann::json j;
    j["concept"] = a.name;
    j["count"] = generated.size();
    j["diversity"] = rep.diversity;
    j["frechet"] = rep.frechet;
    j["precision"] = rep.precision;
    j["recall"] = rep.recall;
    j["mode_recall"] = rep.mode_recall;
    j["mode_histogram"] = rep.mode_histogram;
    io::save_json(cfg.out / artifact::kEval, j);
  });
}

inline bool stage_lid(const RunConfig& cfg, RunManifest& man, bool force) {
  return detail::run_stage(cfg, man, "lid", {artifact::kLid}, force, [&] {
    const GradientStore store = load_store(cfg.out / artifact::kGrads);
    const LidEstimate est = estimate_lid(store, cfg.lid_eps);
    nlohmann::json j;
    j["concept"] = est.concept_name;
    j["lid"] = est.lid;
    j["eps"] = est.eps;
    j["singular"] = est.singular;
    io::save_json(cfg.out / artifact::kLid, j);
  });
}

inline bool stage_stability(const RunConfig& cfg, RunManifest& man, bool force) {
  const std::vector<std::string> arts = {artifact::kStabilityCsv, artifact::kStabilityJson};
  return detail::run_stage(cfg, man, "stability", arts, force, [&] {
    const GradientStore store = load_store(cfg.out / artifact::kGrads);
    std::vector<std::size_t> sizes = cfg.stability_sizes;
    if (sizes.empty()) {
      const std::size_t n = store.count();
      for (std::size_t div : {16, 8, 4, 2, 1}) {
        const std::size_t s = std::max<std::size_t>(2, n / div);
        if (sizes.empty() || sizes.back() != s) sizes.push_back(s);
      }
    }
    for (std::size_t s : sizes)
      if (s > store.count())
        throw std::invalid_argument("stability: subset size " + std::to_string(s) +
                                    " exceeds store count " + std::to_string(store.count()));
    const std::size_t reference = *std::max_element(sizes.begin(), sizes.end());
    const double tau = cfg.tau > 0.0 ? cfg.tau : default_tau(store.d_embed());
    const StabilityCurve curve =
        stability_curve(store, sizes, reference, cfg.stability_repeats, mix_seed(cfg.seed, 8), tau);
    save_stability_csv(cfg.out / artifact::kStabilityCsv, curve);
    nlohmann::json j;
    j["concept"] = store.concept_name();
    j["reference_size"] = reference;
    j["repeats"] = cfg.stability_repeats;
    j["sizes"] = curve.sizes;
    j["spanned"] = curve.spanned;
    j["noise"] = curve.noise;
    io::save_json(cfg.out / artifact::kStabilityJson, j);
  });
}

inline bool stage_linearity(const RunConfig& cfg, RunManifest& man, bool force) {
  return detail::run_stage(cfg, man, "linearity", {artifact::kLinearity}, force, [&] {
    const ConceptSpec a = load_concept((cfg.out / artifact::kConcept).string());
    const ConceptSpec b = load_concept((cfg.out / artifact::kConceptB).string());
    const LoadedCheckpoint lc = load_checkpoint(cfg.out / artifact::kModel);
    const NoiseSchedule sched = NoiseSchedule::cosine(lc.schedule_T);
    const MotivationReport rep =
        motivation_experiment(lc.model, a.e_tok, b.e_tok, cfg.linearity_trajectories,
                              cfg.linearity_points, sched, mix_seed(cfg.seed, 7));
    nlohmann::json j;
    j["c_start"] = a.name;
    j["c_end"] = b.name;
    j["n_trajectories"] = rep.n_trajectories;
    j["degenerate"] = rep.degenerate;
    j["points"] = cfg.linearity_points;
    j["straightness"] = detail::summary_json(rep.straightness);
    j["avg_cos"] = detail::summary_json(rep.avg_cos);
    j["pc1_ratio"] = detail::summary_json(rep.pc1_ratio);
    j["rmse"] = detail::summary_json(rep.rmse);
    io::save_json(cfg.out / artifact::kLinearity, j);
  });
}

struct PipelineSummary {
  std::vector<std::string> ran;
  std::vector<std::string> skipped;
  double seconds = 0.0;
};

// All stages in dependency order. Stages whose artifacts are current are
// skipped, so a rerun over a finished directory does no work.
inline PipelineSummary run_pipeline(const RunConfig& cfg, bool force = false) {
  cfg.validate();
  RunManifest man = open_manifest(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const std::pair<const char*, bool (*)(const RunConfig&, RunManifest&, bool)> stages[] = {
      {"gen-concept", stage_gen_concept},   {"train-diffusion", stage_train_diffusion},
      {"sample", stage_sample},             {"collect-grads", stage_collect_grads},
      {"decompose-pca", stage_decompose_pca}, {"train-sae", stage_train_sae},
      {"steer", stage_steer},               {"eval", stage_eval},
      {"lid", stage_lid},                   {"stability", stage_stability},
      {"linearity", stage_linearity},
  };
  PipelineSummary sum;
  for (const auto& [name, fn] : stages) {
    if (fn(cfg, man, force))
      sum.ran.push_back(name);
    else
      sum.skipped.push_back(name);
  }
  sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return sum;
}

}  // namespace elrond
