#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace elrond {

// Variance-preserving noise schedule, 1-based in t: alpha(t)^2 + sigma(t)^2
// = 1 for t in 1..T, with alpha_bar(0) = 1 as the clean boundary.
class NoiseSchedule {
 public:
  static NoiseSchedule cosine(std::size_t T) {
    if (T < 2) throw std::invalid_argument("NoiseSchedule: T must be >= 2, got " + std::to_string(T));
    NoiseSchedule s;
    s.T_ = T;
    s.abar_.resize(T + 1);
    s.abar_[0] = 1.0;
    const double smooth = 0.008;
    auto f = [&](double t) {
      const double x = (t / static_cast<double>(T) + smooth) / (1.0 + smooth) * std::numbers::pi / 2.0;
      const double c = std::cos(x);
      return c * c;
    };
    const double f0 = f(0.0);
    // Floors: the tail is kept strictly above zero so 1/alpha stays usable at
    // t = T, and the head is pinned high enough that step 1 is nearly clean
    // even for tiny T. Both graded floors preserve strict monotonicity.
    const double tail_floor = 1e-4;
    for (std::size_t t = 1; t <= T; ++t) {
      const double raw = f(static_cast<double>(t)) / f0;
      const double graded = tail_floor * (1.0 + 1e-3 * static_cast<double>(T - t));
      s.abar_[t] = std::max(raw, graded);
    }
    s.abar_[1] = std::max(s.abar_[1], 0.998001);
    for (std::size_t t = 1; t <= T; ++t)
      if (s.abar_[t] >= s.abar_[t - 1])
        throw std::runtime_error("NoiseSchedule: alpha_bar not strictly decreasing at t=" +
                                 std::to_string(t));
    return s;
  }

  std::size_t T() const { return T_; }

  double alpha_bar(std::size_t t) const {
    check(t, true);
    return abar_[t];
  }

  double alpha(std::size_t t) const {
    check(t, false);
    return std::sqrt(abar_[t]);
  }

  double sigma(std::size_t t) const {
    check(t, false);
    return std::sqrt(1.0 - abar_[t]);
  }

 private:
  void check(std::size_t t, bool allow_zero) const {
    if (t > T_ || (t == 0 && !allow_zero))
      throw std::invalid_argument("NoiseSchedule: t=" + std::to_string(t) + " outside 1.." +
                                  std::to_string(T_));
  }
  std::size_t T_ = 0;
  std::vector<double> abar_;
};

inline std::vector<double> forward_diffuse(std::span<const double> z0, std::size_t t,
                                           std::span<const double> eps, const NoiseSchedule& sched) {
  if (z0.size() != eps.size())
    throw std::invalid_argument("forward_diffuse: z0/eps size mismatch");
  const double a = sched.alpha(t), s = sched.sigma(t);
  std::vector<double> z(z0.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = a * z0[i] + s * eps[i];
  return z;
}

}  // namespace elrond
