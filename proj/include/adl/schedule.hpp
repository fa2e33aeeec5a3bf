#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "adl/error.hpp"
#include "adl/numerics.hpp"

namespace adl {

/// Discrete noise schedule on the 1-based grid t = 1..T:
///   x_t = sqrt(alpha_bar_t) x0 + sigma_t eps,  sigma_t = sqrt(1 - alpha_bar_t).
/// t = 0 denotes clean data and is not stored.
class NoiseSchedule {
 public:
  /// Builds a schedule from per-step betas; alpha_bar is their cumulative product.
  static NoiseSchedule from_betas(std::vector<double> betas) {
    std::vector<double> alpha_bars(betas.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < betas.size(); ++i) {
      if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw ConfigError("NoiseSchedule: beta must lie in (0, 1)");
      prod *= 1.0 - betas[i];
      if (!(prod > 0.0)) throw NumericalError("NoiseSchedule: alpha_bar underflows to zero at t=" + std::to_string(i + 1));
      alpha_bars[i] = prod;
    }
    return NoiseSchedule(std::move(betas), std::move(alpha_bars));
  }

  /// Builds a schedule directly from cumulative alpha_bar values (strictly
  /// decreasing, inside (0, 1)); betas are recovered from consecutive ratios.
  static NoiseSchedule from_alpha_bars(std::vector<double> alpha_bars) {
    std::vector<double> betas(alpha_bars.size());
    double prev = 1.0;
    for (std::size_t i = 0; i < alpha_bars.size(); ++i) {
      if (!(alpha_bars[i] > 0.0 && alpha_bars[i] < prev))
        throw ConfigError("NoiseSchedule: alpha_bar must be strictly decreasing inside (0, 1)");
      betas[i] = 1.0 - alpha_bars[i] / prev;
      prev = alpha_bars[i];
    }
    return NoiseSchedule(std::move(betas), std::move(alpha_bars));
  }

  int steps() const { return static_cast<int>(alpha_bars_.size()); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  double alpha_bar(int t) const { return alpha_bars_[index(t)]; }
  double sigma(int t) const { return sigmas_[index(t)]; }
  double beta(int t) const { return betas_[index(t)]; }

  void check_timestep(int t) const { (void)index(t); }

 private:
  NoiseSchedule(std::vector<double> betas, std::vector<double> alpha_bars)
      : betas_(std::move(betas)), alpha_bars_(std::move(alpha_bars)) {
    if (alpha_bars_.empty()) throw ConfigError("NoiseSchedule: T must be at least 1");
    sigmas_.reserve(alpha_bars_.size());
    for (double a : alpha_bars_) sigmas_.push_back(std::sqrt(1.0 - a));
  }

  std::size_t index(int t) const {
    if (t < 1 || t > steps())
      throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  std::vector<double> sigmas_;
};

/// Betas interpolated linearly from beta_start (t = 1) to beta_end (t = T).
inline NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("linear_schedule: T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("linear_schedule: require 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

inline Vector forward_noise(const Vector& x0, const Vector& eps, int t, const NoiseSchedule& sched) {
  if (x0.size() != eps.size()) throw ConfigError("forward_noise: shape mismatch");
  return std::sqrt(sched.alpha_bar(t)) * x0 + sched.sigma(t) * eps;
}

inline constexpr double kParametrizationGuard = 1e-12;

/// Noise prediction implied by a clean-image prediction: (x - sqrt(abar) x0_hat) / sigma.
inline Vector eps_from_x0(const Vector& x, const Vector& x0_hat, int t, const NoiseSchedule& sched) {
  if (x.size() != x0_hat.size()) throw ConfigError("eps_from_x0: shape mismatch");
  const double sigma = sched.sigma(t);
  if (sigma < kParametrizationGuard) throw NumericalError("eps_from_x0: ill-defined parametrization (sigma ~ 0)");
  return (x - std::sqrt(sched.alpha_bar(t)) * x0_hat) / sigma;
}

/// Inverse of eps_from_x0: (x - sigma eps_hat) / sqrt(abar).
inline Vector x0_from_eps(const Vector& x, const Vector& eps_hat, int t, const NoiseSchedule& sched) {
  if (x.size() != eps_hat.size()) throw ConfigError("x0_from_eps: shape mismatch");
  const double root = std::sqrt(sched.alpha_bar(t));
  if (root < kParametrizationGuard) throw NumericalError("x0_from_eps: ill-defined parametrization (alpha_bar ~ 0)");
  return (x - sched.sigma(t) * eps_hat) / root;
}

}  // namespace adl
