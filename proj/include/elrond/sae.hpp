#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "elrond/gradients.hpp"
#include "elrond/optim.hpp"
#include "elrond/rng.hpp"
#include "elrond/tensor.hpp"

namespace elrond {

// Keeps the k largest signed entries, zeroes the rest; ties go to the
// lowest index.
inline std::vector<double> topk_activate(std::span<const double> pre, std::size_t k) {
  if (k < 1 || k > pre.size())
    throw std::invalid_argument("topk_activate: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(pre.size()) + "]");
  std::vector<std::size_t> idx(pre.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (pre[a] != pre[b]) return pre[a] > pre[b];
                      return a < b;
                    });
  std::vector<double> h(pre.size(), 0.0);
  for (std::size_t i = 0; i < k; ++i) h[idx[i]] = pre[idx[i]];
  return h;
}

namespace detail {

// Row-wise TopK on the tape: the pull routes gradients through the selected
// entries only, which is the exact local derivative away from ties.
inline Tensor topk_rows_graph(const Tensor& pre, std::size_t k) {
  if (pre.shape().size() != 2)
    throw std::invalid_argument("topk_rows_graph: expected a rank-2 batch");
  const std::size_t batch = pre.shape()[0];
  const std::size_t n = pre.shape()[1];
  std::vector<double> out(batch * n, 0.0);
  std::vector<char> mask(batch * n, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::vector<double> h = topk_activate(pre.values().subspan(b * n, n), k);
    for (std::size_t j = 0; j < n; ++j) {
      out[b * n + j] = h[j];
      if (h[j] != 0.0) mask[b * n + j] = 1;
    }
  }
  Tensor result(pre.shape(), std::move(out));
  Tape* tape = graph_tape({&pre});
  if (!tape) return result;
  return tape->record("topk", {pre}, std::move(result),
                      [mask = std::move(mask)](std::span<const double> out_grad,
                                               Tape::Grads& grads) {
                        std::span<double> d = grads.of(0);
                        if (d.empty()) return;
                        for (std::size_t i = 0; i < out_grad.size(); ++i)
                          if (mask[i]) d[i] += out_grad[i];
                      });
}

}  // namespace detail

// TopK autoencoder over embedding-gradient rows. Parameters are stored
// pre-transposed for batch-row matmuls: enc_t is d x n, dec_t is n x d, so
// decoder dictionary atoms are the rows of dec_t.
class SaeModel {
 public:
  SaeModel(std::size_t d, std::size_t n, std::size_t k, std::uint64_t seed)
      : d_(d), n_(n), k_(k) {
    if (d < 1) throw std::invalid_argument("SaeModel: d must be positive");
    if (k < 1 || k > n)
      throw std::invalid_argument("SaeModel: need n >= k >= 1, got n=" + std::to_string(n) +
                                  " k=" + std::to_string(k));
    Rng rng(seed);
    std::vector<double> dec(n * d);
    for (std::size_t r = 0; r < n; ++r) {
      double nrm = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dec[r * d + c] = rng.normal();
        nrm += dec[r * d + c] * dec[r * d + c];
      }
      nrm = std::sqrt(nrm);
      if (nrm < 1e-12) throw std::runtime_error("SaeModel: degenerate init draw");
      for (std::size_t c = 0; c < d; ++c) dec[r * d + c] /= nrm;
    }
    // Tied init: encoder starts as the decoder transpose.
    std::vector<double> enc(d * n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) enc[c * n + r] = dec[r * d + c];
    params_.emplace_back(Shape{d, n}, std::move(enc));
    params_.emplace_back(Shape{n, d}, std::move(dec));
    params_.emplace_back(Shape{std::size_t{1}, d}, std::vector<double>(d, 0.0));
  }

  std::size_t d_embed() const { return d_; }
  std::size_t dict_size() const { return n_; }
  std::size_t sparsity() const { return k_; }

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const Tensor& enc_t() const { return params_[0]; }
  const Tensor& dec_t() const { return params_[1]; }
  const Tensor& b_pre() const { return params_[2]; }

  std::span<const double> decoder_atom(std::size_t j) const {
    if (j >= n_) throw std::out_of_range("SaeModel: atom " + std::to_string(j));
    return params_[1].values().subspan(j * d_, d_);
  }

  std::vector<double> encode(std::span<const double> v) const {
    if (v.size() != d_)
      throw std::invalid_argument("SaeModel: input size " + std::to_string(v.size()) +
                                  " != d " + std::to_string(d_));
    const auto enc = params_[0].values();
    const auto b = params_[2].values();
    std::vector<double> pre(n_, 0.0);
    for (std::size_t c = 0; c < d_; ++c) {
      const double vc = v[c] - b[c];
      for (std::size_t j = 0; j < n_; ++j) pre[j] += vc * enc[c * n_ + j];
    }
    return topk_activate(pre, k_);
  }

  std::vector<double> decode(std::span<const double> h) const {
    if (h.size() != n_)
      throw std::invalid_argument("SaeModel: code size " + std::to_string(h.size()) + " != n " +
                                  std::to_string(n_));
    const auto dec = params_[1].values();
    const auto b = params_[2].values();
    std::vector<double> out(b.begin(), b.end());
    for (std::size_t j = 0; j < n_; ++j) {
      if (h[j] == 0.0) continue;
      for (std::size_t c = 0; c < d_; ++c) out[c] += h[j] * dec[j * d_ + c];
    }
    return out;
  }

  std::vector<double> reconstruct(std::span<const double> v) const { return decode(encode(v)); }

  // Batch reconstruction graph over supplied parameter handles.
  Tensor forward(const Tensor& x, const std::vector<Tensor>& params) const {
    const std::size_t batch = x.shape()[0];
    Tensor ones(Shape{batch, std::size_t{1}}, std::vector<double>(batch, 1.0));
    Tensor bias = matmul(ones, params[2]);
    Tensor pre = matmul(sub(x, bias), params[0]);
    Tensor h = detail::topk_rows_graph(pre, k_);
    return add(matmul(h, params[1]), bias);
  }

 private:
  std::size_t d_, n_, k_;
  std::vector<Tensor> params_;
};

struct SaeConfig {
  std::size_t steps = 3000;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

struct SaeTrainResult {
  std::vector<double> loss_curve;
  double holdout_before = 0.0;
  double holdout_after = 0.0;
  std::vector<std::size_t> holdout_rows;
};

// Mean per-element squared reconstruction error over the given rows.
inline double sae_eval_loss(const SaeModel& model, const GradientStore& store,
                            std::span<const std::size_t> rows) {
  if (rows.empty()) throw std::invalid_argument("sae_eval_loss: no rows");
  double total = 0.0;
  for (std::size_t r : rows) {
    const auto x = store.row(r);
    const std::vector<double> rec = model.reconstruct(x);
    double acc = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double d = rec[c] - x[c];
      acc += d * d;
    }
    total += acc / static_cast<double>(x.size());
  }
  return total / static_cast<double>(rows.size());
}

// Adam on reconstruction MSE with a held-out tenth for honesty; decoder
// rows are pulled back to unit norm after every step.
inline SaeTrainResult train_sae(SaeModel& model, const GradientStore& store,
                                const SaeConfig& cfg) {
  if (store.d_embed() != model.d_embed())
    throw std::invalid_argument("train_sae: store d_embed " + std::to_string(store.d_embed()) +
                                " != model d " + std::to_string(model.d_embed()));
  if (store.count() < 2) throw std::invalid_argument("train_sae: need at least 2 rows");
  if (cfg.steps < 1 || cfg.batch < 1) throw std::invalid_argument("train_sae: bad config");

  const std::size_t count = store.count();
  const std::size_t d = model.d_embed();
  const std::size_t holdout_n = std::max<std::size_t>(1, count / 10);
  Rng split_rng(cfg.seed, 0x5AE5);
  std::vector<std::size_t> holdout = split_rng.subset(count, holdout_n);
  std::sort(holdout.begin(), holdout.end());
  std::vector<char> held(count, 0);
  for (std::size_t r : holdout) held[r] = 1;
  std::vector<std::size_t> train_rows;
  train_rows.reserve(count - holdout_n);
  for (std::size_t r = 0; r < count; ++r)
    if (!held[r]) train_rows.push_back(r);

  SaeTrainResult result;
  result.holdout_rows = holdout;
  result.holdout_before = sae_eval_loss(model, store, holdout);
  result.loss_curve.reserve(cfg.steps);

  Adam opt(cfg.lr);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng(cfg.seed, step);
    std::vector<double> x(cfg.batch * d);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto row = store.row(train_rows[rng.index(train_rows.size())]);
      std::copy(row.begin(), row.end(), x.begin() + static_cast<long>(b * d));
    }
    Tensor input(Shape{cfg.batch, d}, std::move(x));

    Tape tape;
    std::vector<Tensor> bound;
    bound.reserve(model.parameters().size());
    for (const auto& p : model.parameters()) bound.push_back(tape.leaf(p));
    Tensor recon = model.forward(input, bound);
    Tensor loss = mean(square(sub(recon, input)));
    const double lv = loss.value();
    if (!std::isfinite(lv))
      throw std::runtime_error("train_sae: loss diverged (non-finite) at step " +
                               std::to_string(step));
    result.loss_curve.push_back(lv);

    GradientMap grads = tape.backward(loss);
    opt.begin_step();
    for (std::size_t i = 0; i < bound.size(); ++i) {
      Tensor g = grads.grad(bound[i]);
      opt.update(i, model.parameters()[i].mutable_values(), g.values());
    }

    auto dec = model.parameters()[1].mutable_values();
    const std::size_t n = model.dict_size();
    for (std::size_t r = 0; r < n; ++r) {
      double nrm = 0.0;
      for (std::size_t c = 0; c < d; ++c) nrm += dec[r * d + c] * dec[r * d + c];
      nrm = std::sqrt(nrm);
      if (nrm > 1e-12)
        for (std::size_t c = 0; c < d; ++c) dec[r * d + c] /= nrm;
    }
  }

  result.holdout_after = sae_eval_loss(model, store, holdout);
  return result;
}

struct AliveReport {
  std::vector<std::size_t> alive;  // features with nonzero activation density
  std::vector<double> density;     // per feature, fraction of rows activating it
};

inline AliveReport alive_features(const SaeModel& model, const GradientStore& store) {
  if (store.d_embed() != model.d_embed())
    throw std::invalid_argument("alive_features: store d_embed mismatch");
  if (store.count() == 0) throw std::invalid_argument("alive_features: empty store");
  AliveReport rep;
  rep.density.assign(model.dict_size(), 0.0);
  for (std::size_t r = 0; r < store.count(); ++r) {
    const std::vector<double> h = model.encode(store.row(r));
    for (std::size_t j = 0; j < h.size(); ++j)
      if (h[j] != 0.0) rep.density[j] += 1.0;
  }
  for (std::size_t j = 0; j < rep.density.size(); ++j) {
    rep.density[j] /= static_cast<double>(store.count());
    if (rep.density[j] > 0.0) rep.alive.push_back(j);
  }
  return rep;
}

}  // namespace elrond
