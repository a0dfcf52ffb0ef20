#pragma once

#include <optional>
#include <string>

#include "kfl/covariance.hpp"
#include "kfl/linalg.hpp"

namespace kfl::geometry {

enum class FisherSource { gaussian, categorical };

/// Fisher information F together with the ridge eps used whenever F is inverted.
struct FisherMetric {
  Matrix F;
  FisherSource source = FisherSource::gaussian;
  double regularization = 0.0;

  /// F + eps I
  Matrix regularized() const;
};

/// Ridge applied to a Fisher matrix: 0 when F is numerically PD,
/// 1e-8 * trace(F) / d otherwise.
double default_regularization(const Matrix& F);

/// F = H^T R^{-1} H.
FisherMetric fisher_gaussian(const Matrix& H, const Matrix& R);

/// F_h = W^T (diag(s) - s s^T) W. Throws if s is off the simplex by more than 1e-10.
FisherMetric fisher_categorical(const Matrix& W, const Vector& s);

/// theta + eta (F + eps I)^{-1} grad.
Vector natural_gradient_step(const Vector& theta, const FisherMetric& F, const Vector& grad,
                             double eta);

/// Gaussian log-likelihood -1/2 r^T R^{-1} r - 1/2 log det(2 pi R) of residual r.
double gaussian_loglik(const Vector& residual, const Matrix& R);

/// d/dtheta of the Gaussian log-likelihood for a locally linear map: H^T R^{-1} (y - y_hat).
Vector gaussian_loglik_gradient(const Matrix& H, const Matrix& R, const Vector& residual);

struct EquivalenceGap {
  /// ||K - F^{-1} H^T R^{-1}||_F / ||K||_F with K the Kalman gain for P. Empty when
  /// H lacks full column rank.
  std::optional<double> gap_ng;
  /// Same comparison against 1/2 F^{-1} H^T R^{-1}, with K recomputed at P = F^{-1}.
  std::optional<double> gap_damped;
  /// True when H F^{-1} H^T = R holds (square invertible H), the case in which
  /// gap_damped is exactly zero in exact arithmetic.
  bool damped_identity_applies = false;
  std::string note;
};

EquivalenceGap equivalence_gap(const cov::CovarianceRepr& P, const Matrix& H, const Matrix& R);

}  // namespace kfl::geometry
