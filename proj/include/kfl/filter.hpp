#pragma once

#include <string>
#include <vector>

#include "kfl/covariance.hpp"
#include "kfl/model.hpp"
#include "kfl/record.hpp"

namespace kfl::filter {

using model::jacobian_fd;

/// N(mean, cov) after `step` filter steps.
struct GaussianBelief {
  Vector mean;
  cov::CovarianceRepr cov;
  long step = 0;
};

/// Checks that mean and covariance dimensions agree.
GaussianBelief make_belief(Vector mean, cov::CovarianceRepr cov, long step = 0);

/// Default prior N(mean, sigma0^2 I).
GaussianBelief isotropic_belief(Vector mean, double sigma0_sq = 1.0);

struct Innovation {
  Vector residual;       // y - predicted_obs
  Vector predicted_obs;  // h(mean_pred)
  Matrix H;              // Jacobian of h at mean_pred
  Matrix S;              // H P H^T + R
};

/// Propagate mean through f and covariance through its Jacobian at the mean.
GaussianBelief predict(const GaussianBelief& belief, const model::StateSpaceModel& model,
                       const Vector& input = Vector(), const cov::Options& opts = {});
GaussianBelief predict(const GaussianBelief& belief, const model::AugmentedModel& model,
                       const Vector& input = Vector(), const cov::Options& opts = {});

/// Residual and measurement Jacobian at the predicted mean.
Innovation innovate(const GaussianBelief& belief_pred, const model::StateSpaceModel& model,
                    const Vector& y, const Vector& input = Vector());

struct UpdateResult {
  GaussianBelief belief;
  cov::GainResult gain;
};

UpdateResult update(const GaussianBelief& belief_pred, const Innovation& innov, const Matrix& R,
                    const cov::Options& opts = {});

struct StepOptions {
  cov::Options cov{};
  /// Spectral radius of I - K H is logged for d up to this size.
  Index spectral_audit_max_dim = 256;
  /// When set, the step record carries V = e^T P^{-1} e with e = mean - reference.
  std::optional<Vector> lyapunov_reference;
  /// Copy mean, covariances, H and K into the step record (audit scale).
  bool snapshot = false;
};

struct StepResult {
  GaussianBelief belief;
  GaussianBelief predicted;
  Innovation innovation;
  cov::GainResult gain;
  StepRecord record;
};

/// predict -> innovate -> update.
StepResult filter_step(const GaussianBelief& belief, const model::StateSpaceModel& model,
                       const Vector& input, const Vector& y, const StepOptions& opts = {});

struct DareResult {
  Matrix P;  // steady-state prior covariance
  Matrix K;  // steady-state gain P H^T (H P H^T + R)^{-1}
  int iterations = 0;
  double residual = 0.0;  // ||P - Riccati(P)||_F
  std::vector<std::string> warnings;
};

/// One application of the prior-covariance Riccati map
/// P -> A (P - P H^T (H P H^T + R)^{-1} H P) A^T + Q.
Matrix riccati_map(const Matrix& P, const Matrix& A, const Matrix& H, const Matrix& Q,
                   const Matrix& R);

/// Fixed-point iteration of the Riccati map from P0 (defaults to Q) until
/// ||P_{k+1} - P_k||_F <= tol. Throws ConvergenceError after max_iter.
DareResult dare_solve(const Matrix& A, const Matrix& H, const Matrix& Q, const Matrix& R,
                      double tol = 1e-12, int max_iter = 100000,
                      const std::optional<Matrix>& P0 = std::nullopt);

}  // namespace kfl::filter
