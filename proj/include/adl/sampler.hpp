#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "adl/denoiser.hpp"
#include "adl/error.hpp"
#include "adl/rng.hpp"
#include "adl/schedule.hpp"

namespace adl {

/// Evenly spaced descending timesteps t_k = T - floor(k T / steps), k = 0..steps-1.
inline std::vector<int> timestep_grid(int total, int steps) {
  if (steps < 1 || steps > total)
    throw ConfigError("timestep_grid: steps " + std::to_string(steps) + " outside [1, " + std::to_string(total) + "]");
  std::vector<int> grid(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k)
    grid[static_cast<std::size_t>(k)] =
        total - static_cast<int>((static_cast<std::int64_t>(k) * total) / steps);
  return grid;
}

/// One DDIM chain: the visited timesteps, the state x_t entering each step,
/// and the single-step clean-image prediction made there.
struct Trajectory {
  std::vector<int> timesteps;
  std::vector<Vector> states;
  std::vector<Vector> predictions;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

/// Initial state x_T ~ N(0, I) from the counter-based generator.
inline Vector initial_noise(Eigen::Index dim, std::uint64_t seed, std::uint64_t stream = 0) {
  CounterRng rng(seed, stream);
  Vector x(dim);
  for (Eigen::Index i = 0; i < dim; ++i) x[i] = rng.normal();
  return x;
}

struct SampleResult {
  Vector image;
  Trajectory trajectory;
};

/// Deterministic DDIM (eta = 0) from a given initial state.
inline SampleResult ddim_sample_from(const Denoiser& denoiser, const NoiseSchedule& sched, int steps, Vector x) {
  if (denoiser.schedule().steps() != sched.steps())
    throw ConfigError("ddim_sample: denoiser and sampler schedules disagree on T");
  SampleResult out;
  out.trajectory.timesteps = timestep_grid(sched.steps(), steps);
  const auto& grid = out.trajectory.timesteps;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const int t = grid[k];
    Vector x0_hat = denoiser.predict_x0(x, t);
    if (!x0_hat.allFinite()) throw NumericalError("ddim_sample: non-finite prediction at t=" + std::to_string(t));
    out.trajectory.states.push_back(x);
    out.trajectory.predictions.push_back(x0_hat);
    if (k + 1 == grid.size()) {
      out.image = std::move(x0_hat);
      break;
    }
    const int next = grid[k + 1];
    const Vector eps_hat = eps_from_x0(x, x0_hat, t, sched);
    x = std::sqrt(sched.alpha_bar(next)) * x0_hat + sched.sigma(next) * eps_hat;
  }
  return out;
}

/// Deterministic DDIM from x_T drawn with (seed, stream); the final output is
/// the prediction at the smallest grid timestep.
inline SampleResult ddim_sample(const Denoiser& denoiser, const NoiseSchedule& sched, int steps, std::uint64_t seed,
                                std::uint64_t stream = 0) {
  if (steps < 1) throw ConfigError("ddim_sample: steps must be at least 1");
  SampleResult out = ddim_sample_from(denoiser, sched, steps, initial_noise(denoiser.dim(), seed, stream));
  out.trajectory.seed = seed;
  out.trajectory.stream = stream;
  return out;
}

}  // namespace adl
