#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "elrond/tensor.hpp"

namespace elrond {

enum class LossKind : std::uint8_t { kMse = 0, kChamfer = 1, kMmd = 2 };

inline const char* loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::kMse: return "mse";
    case LossKind::kChamfer: return "chamfer";
    case LossKind::kMmd: return "mmd";
  }
  throw std::invalid_argument("loss_kind_name: unknown kind code " +
                              std::to_string(static_cast<int>(kind)));
}

inline std::uint8_t loss_kind_code(LossKind kind) { return static_cast<std::uint8_t>(kind); }

inline LossKind loss_kind_from_code(std::uint8_t code) {
  if (code > 2) throw std::runtime_error("unknown loss kind code " + std::to_string(code));
  return static_cast<LossKind>(code);
}

inline LossKind loss_kind_from_name(const std::string& name) {
  if (name == "mse") return LossKind::kMse;
  if (name == "chamfer") return LossKind::kChamfer;
  if (name == "mmd") return LossKind::kMmd;
  throw std::runtime_error("unknown loss kind '" + name + "' (expected mse, chamfer or mmd)");
}

namespace detail {

// Set losses read a latent of size 2P as P planar points.
inline std::size_t point_count(std::size_t numel) {
  if (numel == 0 || numel % 2 != 0)
    throw std::invalid_argument("set loss needs an even positive dimension, got " +
                                std::to_string(numel));
  return numel / 2;
}

inline double sq_dist2(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  return dx * dx + dy * dy;
}

struct ChamferEval {
  double value = 0.0;
  std::vector<std::size_t> nn_ab;
  std::vector<std::size_t> nn_ba;
};

inline ChamferEval chamfer_eval(std::span<const double> a, std::span<const double> b) {
  const std::size_t pa = point_count(a.size());
  const std::size_t pb = point_count(b.size());
  ChamferEval ev;
  ev.nn_ab.resize(pa);
  ev.nn_ba.resize(pb);
  double sum_ab = 0.0;
  for (std::size_t i = 0; i < pa; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < pb; ++j) {
      const double d = sq_dist2(&a[2 * i], &b[2 * j]);
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    sum_ab += best;
    ev.nn_ab[i] = arg;
  }
  double sum_ba = 0.0;
  for (std::size_t j = 0; j < pb; ++j) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < pa; ++i) {
      const double d = sq_dist2(&a[2 * i], &b[2 * j]);
      if (d < best) {
        best = d;
        arg = i;
      }
    }
    sum_ba += best;
    ev.nn_ba[j] = arg;
  }
  ev.value = 0.5 * (sum_ab / static_cast<double>(pa) + sum_ba / static_cast<double>(pb));
  return ev;
}

struct MmdEval {
  double value = 0.0;
  double h2 = 1.0;
  std::size_t med_i = 0;
  std::size_t med_j = 0;
  bool h_clamped = false;
};

// Bandwidth is the median cross-set distance; the pair realizing it is kept
// so the pull can differentiate through the bandwidth as well.
inline MmdEval mmd_eval(std::span<const double> a, std::span<const double> b) {
  const std::size_t pa = point_count(a.size());
  const std::size_t pb = point_count(b.size());
  MmdEval ev;

  struct Entry {
    double d2;
    std::size_t i, j;
  };
  std::vector<Entry> cross(pa * pb);
  for (std::size_t i = 0; i < pa; ++i)
    for (std::size_t j = 0; j < pb; ++j)
      cross[i * pb + j] = {sq_dist2(&a[2 * i], &b[2 * j]), i, j};
  const std::size_t mid = (cross.size() - 1) / 2;
  std::nth_element(cross.begin(), cross.begin() + static_cast<std::ptrdiff_t>(mid), cross.end(),
                   [](const Entry& x, const Entry& y) {
                     if (x.d2 != y.d2) return x.d2 < y.d2;
                     if (x.i != y.i) return x.i < y.i;
                     return x.j < y.j;
                   });
  ev.med_i = cross[mid].i;
  ev.med_j = cross[mid].j;
  ev.h2 = cross[mid].d2;
  if (ev.h2 < 1e-12) {
    ev.h2 = 1e-12;
    ev.h_clamped = true;
  }

  const double inv2h2 = 1.0 / (2.0 * ev.h2);
  double s_aa = 0.0, s_bb = 0.0, s_ab = 0.0;
  for (std::size_t i = 0; i < pa; ++i)
    for (std::size_t j = 0; j < pa; ++j)
      s_aa += std::exp(-sq_dist2(&a[2 * i], &a[2 * j]) * inv2h2);
  for (std::size_t i = 0; i < pb; ++i)
    for (std::size_t j = 0; j < pb; ++j)
      s_bb += std::exp(-sq_dist2(&b[2 * i], &b[2 * j]) * inv2h2);
  for (std::size_t i = 0; i < pa; ++i)
    for (std::size_t j = 0; j < pb; ++j)
      s_ab += std::exp(-sq_dist2(&a[2 * i], &b[2 * j]) * inv2h2);
  const double na = static_cast<double>(pa);
  const double nb = static_cast<double>(pb);
  ev.value = s_aa / (na * na) + s_bb / (nb * nb) - 2.0 * s_ab / (na * nb);
  return ev;
}

inline void check_loss_dims(LossKind kind, std::size_t da, std::size_t db) {
  if (da != db)
    throw std::invalid_argument("semantic_loss: dimension mismatch " + std::to_string(da) +
                                " vs " + std::to_string(db));
  if (kind != LossKind::kMse) point_count(da);
}

}  // namespace detail

inline double semantic_loss(LossKind kind, std::span<const double> zhat0,
                            std::span<const double> target) {
  detail::check_loss_dims(kind, zhat0.size(), target.size());
  switch (kind) {
    case LossKind::kMse: {
      double acc = 0.0;
      for (std::size_t i = 0; i < zhat0.size(); ++i) {
        const double r = zhat0[i] - target[i];
        acc += r * r;
      }
      return acc / static_cast<double>(zhat0.size());
    }
    case LossKind::kChamfer:
      return detail::chamfer_eval(zhat0, target).value;
    case LossKind::kMmd:
      return detail::mmd_eval(zhat0, target).value;
  }
  throw std::invalid_argument("semantic_loss: unknown kind");
}

namespace detail {

inline Tensor chamfer_graph(Tape& tape, const Tensor& zhat0, std::vector<double> target) {
  const ChamferEval ev = chamfer_eval(zhat0.values(), target);
  Tensor result({1}, {ev.value});
  if (!zhat0.requires_grad()) return result;
  std::vector<double> a(zhat0.values().begin(), zhat0.values().end());
  return tape.record("chamfer", {zhat0}, std::move(result),
                     [ev, a = std::move(a), b = std::move(target)](
                         std::span<const double> out_grad, Tape::Grads& grads) {
                       std::span<double> da = grads.of(0);
                       if (da.empty()) return;
                       const double g0 = out_grad[0];
                       const std::size_t pa = a.size() / 2;
                       const std::size_t pb = b.size() / 2;
                       const double ca = g0 / static_cast<double>(pa);
                       const double cb = g0 / static_cast<double>(pb);
                       for (std::size_t i = 0; i < pa; ++i) {
                         const std::size_t j = ev.nn_ab[i];
                         da[2 * i] += ca * (a[2 * i] - b[2 * j]);
                         da[2 * i + 1] += ca * (a[2 * i + 1] - b[2 * j + 1]);
                       }
                       for (std::size_t j = 0; j < pb; ++j) {
                         const std::size_t i = ev.nn_ba[j];
                         da[2 * i] += cb * (a[2 * i] - b[2 * j]);
                         da[2 * i + 1] += cb * (a[2 * i + 1] - b[2 * j + 1]);
                       }
                     });
}

inline Tensor mmd_graph(Tape& tape, const Tensor& zhat0, std::vector<double> target) {
  const MmdEval ev = mmd_eval(zhat0.values(), target);
  Tensor result({1}, {ev.value});
  if (!zhat0.requires_grad()) return result;
  std::vector<double> a(zhat0.values().begin(), zhat0.values().end());
  return tape.record(
      "mmd", {zhat0}, std::move(result),
      [ev, a = std::move(a), b = std::move(target)](std::span<const double> out_grad,
                                                    Tape::Grads& grads) {
        std::span<double> da = grads.of(0);
        if (da.empty()) return;
        const double g0 = out_grad[0];
        const std::size_t pa = a.size() / 2;
        const std::size_t pb = b.size() / 2;
        const double na = static_cast<double>(pa);
        const double nb = static_cast<double>(pb);
        const double inv2h2 = 1.0 / (2.0 * ev.h2);

        // Direct kernel terms holding the bandwidth fixed; dL/dh2 is
        // accumulated alongside and applied to the median pair afterwards.
        double dl_dh2 = 0.0;
        for (std::size_t i = 0; i < pa; ++i)
          for (std::size_t j = 0; j < pa; ++j) {
            const double d2 = sq_dist2(&a[2 * i], &a[2 * j]);
            const double k = std::exp(-d2 * inv2h2);
            const double c = g0 / (na * na);
            const double f = -c * k * 2.0 * inv2h2;
            da[2 * i] += f * (a[2 * i] - a[2 * j]);
            da[2 * i + 1] += f * (a[2 * i + 1] - a[2 * j + 1]);
            da[2 * j] -= f * (a[2 * i] - a[2 * j]);
            da[2 * j + 1] -= f * (a[2 * i + 1] - a[2 * j + 1]);
            dl_dh2 += c * k * d2;
          }
        for (std::size_t i = 0; i < pb; ++i)
          for (std::size_t j = 0; j < pb; ++j) {
            const double d2 = sq_dist2(&b[2 * i], &b[2 * j]);
            const double k = std::exp(-d2 * inv2h2);
            dl_dh2 += (g0 / (nb * nb)) * k * d2;
          }
        for (std::size_t i = 0; i < pa; ++i)
          for (std::size_t j = 0; j < pb; ++j) {
            const double d2 = sq_dist2(&a[2 * i], &b[2 * j]);
            const double k = std::exp(-d2 * inv2h2);
            const double c = -2.0 * g0 / (na * nb);
            const double f = -c * k * 2.0 * inv2h2;
            da[2 * i] += f * (a[2 * i] - b[2 * j]);
            da[2 * i + 1] += f * (a[2 * i + 1] - b[2 * j + 1]);
            dl_dh2 += c * k * d2;
          }
        dl_dh2 *= 0.5 / (ev.h2 * ev.h2);
        if (!ev.h_clamped) {
          const std::size_t mi = ev.med_i;
          const std::size_t mj = ev.med_j;
          da[2 * mi] += dl_dh2 * 2.0 * (a[2 * mi] - b[2 * mj]);
          da[2 * mi + 1] += dl_dh2 * 2.0 * (a[2 * mi + 1] - b[2 * mj + 1]);
        }
      });
}

}  // namespace detail

// Scalar loss on the tape of zhat0; the target is a constant.
inline Tensor semantic_loss_graph(Tape& tape, LossKind kind, const Tensor& zhat0,
                                  std::span<const double> target) {
  detail::check_loss_dims(kind, zhat0.size(), target.size());
  std::vector<double> tgt(target.begin(), target.end());
  switch (kind) {
    case LossKind::kMse:
      return mean(square(sub(zhat0, Tensor(zhat0.shape(), std::move(tgt)))));
    case LossKind::kChamfer:
      return detail::chamfer_graph(tape, zhat0, std::move(tgt));
    case LossKind::kMmd:
      return detail::mmd_graph(tape, zhat0, std::move(tgt));
  }
  throw std::invalid_argument("semantic_loss_graph: unknown kind");
}

}  // namespace elrond
