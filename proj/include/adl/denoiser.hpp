#pragma once

#include <string>

#include "adl/numerics.hpp"
#include "adl/schedule.hpp"

namespace adl {

/// Anything mapping a noisy image x at timestep t to a clean-image estimate.
/// Implementations are immutable after construction and safe to call
/// concurrently.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual Vector predict_x0(const Vector& x, int t) const = 0;

  /// Name plus a configuration fingerprint, e.g. "masked(tau=0.02)".
  virtual std::string descriptor() const = 0;

  virtual const NoiseSchedule& schedule() const = 0;

  /// Flattened image size d the denoiser accepts.
  virtual Eigen::Index dim() const = 0;
};

}  // namespace adl
