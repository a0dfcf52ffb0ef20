#pragma once

#include <limits>
#include <optional>

#include "kfl/linalg.hpp"

namespace kfl {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// One logged filter or optimizer step.
struct StepRecord {
  long step = 0;
  double loss = kNaN;
  double innovation_norm = kNaN;
  double gain_norm = kNaN;
  double spectral_radius = kNaN;  // rho(I - K H), audit scale only
  double lyapunov = kNaN;         // e^T P^{-1} e against a reference
  double wall_time = 0.0;         // seconds spent in the step

  // Audit snapshots, filled only when requested.
  std::optional<Vector> mean;
  std::optional<Matrix> cov;       // posterior, dense
  std::optional<Matrix> cov_pred;  // prior, dense
  std::optional<Matrix> H;
  std::optional<Matrix> K;
};

}  // namespace kfl
