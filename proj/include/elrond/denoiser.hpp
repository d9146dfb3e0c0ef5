#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "elrond/io.hpp"
#include "elrond/optim.hpp"
#include "elrond/rng.hpp"
#include "elrond/schedule.hpp"
#include "elrond/tensor.hpp"

namespace elrond {

struct DenoiserConfig {
  std::size_t d_latent = 32;
  std::size_t d_embed = 32;
  std::vector<std::size_t> hidden = {128, 128, 128};
  std::size_t time_features = 8;

  std::size_t input_dim() const { return d_latent + time_features + d_embed; }
};

// Sinusoidal features of normalized time u = t/T, frequencies doubling per
// pair. time_features must be even.
inline std::vector<double> time_embedding(std::size_t t, std::size_t T, std::size_t features) {
  if (features % 2 != 0) throw std::invalid_argument("time_embedding: feature count must be even");
  std::vector<double> out(features);
  const double u = static_cast<double>(t) / static_cast<double>(T);
  for (std::size_t p = 0; p < features / 2; ++p) {
    const double w = std::pow(2.0, static_cast<double>(p)) * std::numbers::pi * u;
    out[2 * p] = std::sin(w);
    out[2 * p + 1] = std::cos(w);
  }
  return out;
}

// Conditional feed-forward noise predictor: [z_t ; time_embedding ; e] -> eps.
// Parameters are plain tensors in declaration order (W1, b1, W2, b2, ...);
// training binds them onto a tape, gradient collection feeds them through as
// constants so only the embedding path is differentiated.
class DenoiserModel {
 public:
  DenoiserModel() = default;

  DenoiserModel(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    std::vector<std::size_t> dims;
    dims.push_back(cfg_.input_dim());
    for (auto h : cfg_.hidden) dims.push_back(h);
    dims.push_back(cfg_.d_latent);
    Rng rng(seed, 7);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
      std::vector<double> w(fan_in * fan_out);
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : w) v = sd * rng.normal();
      params_.emplace_back(Shape{fan_in, fan_out}, std::move(w));
      params_.emplace_back(Shape{1, fan_out});
    }
  }

  // Tensor copies share storage; a copied model must own its weights, or
  // fine-tuning the copy would mutate the original.
  DenoiserModel(const DenoiserModel& other) : cfg_(other.cfg_) {
    params_.reserve(other.params_.size());
    for (const auto& p : other.params_) params_.push_back(p.clone());
  }
  DenoiserModel& operator=(const DenoiserModel& other) {
    if (this != &other) {
      cfg_ = other.cfg_;
      params_.clear();
      params_.reserve(other.params_.size());
      for (const auto& p : other.params_) params_.push_back(p.clone());
    }
    return *this;
  }
  DenoiserModel(DenoiserModel&&) = default;
  DenoiserModel& operator=(DenoiserModel&&) = default;

  const DenoiserConfig& config() const { return cfg_; }
  std::size_t latent_dim() const { return cfg_.d_latent; }
  std::size_t embed_dim() const { return cfg_.d_embed; }

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }

  // Forward through explicit parameter handles; pass tape-bound leaves for
  // training, or the raw parameters for a frozen evaluation.
  Tensor forward(const Tensor& x, const std::vector<Tensor>& params) const {
    if (x.rank() != 2 || x.shape()[1] != cfg_.input_dim())
      throw std::invalid_argument("DenoiserModel: input shape " + shape_str(x.shape()) +
                                  ", expected [*x" + std::to_string(cfg_.input_dim()) + "]");
    if (params.size() != params_.size())
      throw std::invalid_argument("DenoiserModel: wrong parameter count");
    const std::size_t batch = x.shape()[0];
    Tensor ones({batch, 1}, std::vector<double>(batch, 1.0));
    Tensor h = x;
    const std::size_t n_layers = params.size() / 2;
    for (std::size_t l = 0; l < n_layers; ++l) {
      h = add(matmul(h, params[2 * l]), matmul(ones, params[2 * l + 1]));
      if (l + 1 < n_layers) h = silu(h);
    }
    return h;
  }

  Tensor forward(const Tensor& x) const { return forward(x, params_); }

  std::vector<double> assemble_input(std::span<const double> z_t, std::size_t t,
                                     std::span<const double> e, const NoiseSchedule& sched) const {
    if (z_t.size() != cfg_.d_latent)
      throw std::invalid_argument("DenoiserModel: latent size mismatch");
    if (e.size() != cfg_.d_embed)
      throw std::invalid_argument("DenoiserModel: embedding size mismatch");
    std::vector<double> x;
    x.reserve(cfg_.input_dim());
    x.insert(x.end(), z_t.begin(), z_t.end());
    auto temb = time_embedding(t, sched.T(), cfg_.time_features);
    x.insert(x.end(), temb.begin(), temb.end());
    x.insert(x.end(), e.begin(), e.end());
    return x;
  }

  std::vector<double> predict_eps(std::span<const double> z_t, std::size_t t,
                                  std::span<const double> e, const NoiseSchedule& sched) const {
    Tensor out = forward(Tensor::row(assemble_input(z_t, t, e, sched)));
    return std::vector<double>(out.values().begin(), out.values().end());
  }

  // Graph-building prediction for a single row; e_row may live on the tape,
  // weights are fed through as constants.
  Tensor predict_eps_graph(Tape&, std::span<const double> z_t, std::size_t t, const Tensor& e_row,
                           const NoiseSchedule& sched) const {
    if (e_row.rank() != 2 || e_row.shape()[0] != 1 || e_row.shape()[1] != cfg_.d_embed)
      throw std::invalid_argument("DenoiserModel: e_row must be [1x" + std::to_string(cfg_.d_embed) + "]");
    if (z_t.size() != cfg_.d_latent)
      throw std::invalid_argument("DenoiserModel: latent size mismatch");
    std::vector<double> head;
    head.reserve(cfg_.d_latent + cfg_.time_features);
    head.insert(head.end(), z_t.begin(), z_t.end());
    auto temb = time_embedding(t, sched.T(), cfg_.time_features);
    head.insert(head.end(), temb.begin(), temb.end());
    Tensor x = concat(Tensor::row(std::move(head)), e_row);
    return forward(x, params_);
  }

  std::string parameter_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params_) {
      auto v = p.values();
      h = io::fnv1a_64(v.data(), v.size() * sizeof(double), h);
    }
    return io::hash_hex(h);
  }

 private:
  DenoiserConfig cfg_;
  std::vector<Tensor> params_;
};

// Flat training corpus: latent rows plus the embedding row each latent
// conditions on.
struct TrainingSet {
  std::vector<std::vector<double>> embeddings;
  std::vector<std::vector<double>> latents;
  std::vector<std::size_t> concept_of;  // index into embeddings, one per latent

  void validate(std::size_t d_latent, std::size_t d_embed) const {
    if (latents.empty()) throw std::invalid_argument("TrainingSet: empty data");
    if (concept_of.size() != latents.size())
      throw std::invalid_argument("TrainingSet: concept_of size mismatch");
    for (const auto& e : embeddings)
      if (e.size() != d_embed) throw std::invalid_argument("TrainingSet: embedding dim mismatch");
    for (const auto& z : latents)
      if (z.size() != d_latent) throw std::invalid_argument("TrainingSet: latent dim mismatch");
    for (auto c : concept_of)
      if (c >= embeddings.size()) throw std::invalid_argument("TrainingSet: concept index out of range");
  }
};

struct TrainConfig {
  std::size_t steps = 4000;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct TrainResult {
  std::vector<double> loss_curve;

  double mean_loss(std::size_t from, std::size_t count) const {
    double s = 0.0;
    for (std::size_t i = from; i < from + count && i < loss_curve.size(); ++i) s += loss_curve[i];
    return s / static_cast<double>(std::min(count, loss_curve.size() - from));
  }
};

inline TrainResult train_denoiser(DenoiserModel& model, const TrainingSet& data,
                                  const NoiseSchedule& sched, const TrainConfig& cfg) {
  data.validate(model.latent_dim(), model.embed_dim());
  if (cfg.steps < 1 || cfg.batch < 1) throw std::invalid_argument("train_denoiser: bad config");
  const std::size_t d = model.latent_dim();
  const std::size_t in_dim = model.config().input_dim();
  Adam opt(cfg.lr);
  TrainResult result;
  result.loss_curve.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng(cfg.seed, step);
    std::vector<double> x(cfg.batch * in_dim);
    std::vector<double> target(cfg.batch * d);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t row = rng.index(data.latents.size());
      const std::size_t t = 1 + rng.index(sched.T());
      std::vector<double> eps = rng.normal_vec(d);
      const auto z_t = forward_diffuse(data.latents[row], t, eps, sched);
      const auto xin = model.assemble_input(z_t, t, data.embeddings[data.concept_of[row]], sched);
      std::copy(xin.begin(), xin.end(), x.begin() + static_cast<long>(b * in_dim));
      std::copy(eps.begin(), eps.end(), target.begin() + static_cast<long>(b * d));
    }

    Tape tape;
    std::vector<Tensor> bound;
    bound.reserve(model.parameters().size());
    for (const auto& p : model.parameters()) bound.push_back(tape.leaf(p));
    Tensor out = model.forward(Tensor({cfg.batch, in_dim}, std::move(x)), bound);
    Tensor loss = mean(square(sub(out, Tensor({cfg.batch, d}, std::move(target)))));
    const double lv = loss.value();
    if (!std::isfinite(lv))
      throw std::runtime_error("train_denoiser: loss diverged (non-finite) at step " +
                               std::to_string(step));
    result.loss_curve.push_back(lv);

    GradientMap grads = tape.backward(loss);
    opt.begin_step();
    for (std::size_t i = 0; i < bound.size(); ++i) {
      Tensor g = grads.grad(bound[i]);
      opt.update(i, model.parameters()[i].mutable_values(), g.values());
    }
  }
  return result;
}

// Mean eps-prediction loss over a row subset without touching parameters.
inline double validation_loss(const DenoiserModel& model, const TrainingSet& data,
                              const NoiseSchedule& sched, std::span<const std::size_t> rows,
                              std::uint64_t seed) {
  if (rows.empty()) throw std::invalid_argument("validation_loss: no rows");
  double total = 0.0;
  for (std::size_t idx = 0; idx < rows.size(); ++idx) {
    Rng rng(seed, idx);
    const std::size_t row = rows[idx];
    const std::size_t t = 1 + rng.index(sched.T());
    std::vector<double> eps = rng.normal_vec(model.latent_dim());
    const auto z_t = forward_diffuse(data.latents[row], t, eps, sched);
    const auto pred =
        model.predict_eps(z_t, t, data.embeddings[data.concept_of[row]], sched);
    double se = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double dv = pred[i] - eps[i];
      se += dv * dv;
    }
    total += se / static_cast<double>(pred.size());
  }
  return total / static_cast<double>(rows.size());
}

// Checkpoint layout: magic "ELCK", u32 version, u64 header length, JSON
// header (shapes and schedule T), then raw little-endian f64 parameter
// blocks in declaration order.
inline void save_checkpoint(const std::filesystem::path& path, const DenoiserModel& model,
                            std::size_t schedule_T) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  io::write_magic(out, "ELCK");
  io::write_u32(out, 1);
  nlohmann::json header;
  header["d_latent"] = model.config().d_latent;
  header["d_embed"] = model.config().d_embed;
  header["hidden"] = model.config().hidden;
  header["time_features"] = model.config().time_features;
  header["schedule_T"] = schedule_T;
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : model.parameters()) shapes.push_back(p.shape());
  header["shapes"] = shapes;
  const std::string hs = header.dump();
  io::write_u64(out, hs.size());
  io::write_bytes(out, hs.data(), hs.size());
  for (const auto& p : model.parameters()) io::write_f64_span(out, p.values());
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

struct LoadedCheckpoint {
  DenoiserModel model;
  std::size_t schedule_T = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  io::check_magic_version(in, "ELCK", 1, path.string());
  const std::uint64_t hlen = io::read_u64(in, "header length");
  std::string hs(hlen, '\0');
  io::read_bytes(in, hs.data(), hlen, "header");
  nlohmann::json header = nlohmann::json::parse(hs);
  DenoiserConfig cfg;
  cfg.d_latent = header.at("d_latent").get<std::size_t>();
  cfg.d_embed = header.at("d_embed").get<std::size_t>();
  cfg.hidden = header.at("hidden").get<std::vector<std::size_t>>();
  cfg.time_features = header.at("time_features").get<std::size_t>();
  LoadedCheckpoint lc;
  lc.schedule_T = header.at("schedule_T").get<std::size_t>();
  lc.model = DenoiserModel(cfg, 0);
  const auto shapes = header.at("shapes").get<std::vector<Shape>>();
  if (shapes.size() != lc.model.parameters().size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch in " + path.string());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Tensor& p = lc.model.parameters()[i];
    if (shapes[i] != p.shape())
      throw std::runtime_error("load_checkpoint: shape mismatch for block " + std::to_string(i) +
                               " in " + path.string());
    io::read_f64_span(in, p.mutable_values(), "parameter block");
  }
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error("load_checkpoint: trailing bytes in " + path.string());
  return lc;
}

}  // namespace elrond
