#pragma once

#include <optional>
#include <string_view>
#include <variant>
#include <vector>

#include "kfl/linalg.hpp"

namespace kfl::cov {

/// Full symmetric matrix.
struct Dense {
  Matrix P;
};

/// Ordered diagonal blocks; off-block covariances are zero.
struct BlockDiagonal {
  std::vector<Matrix> blocks;
};

/// P = U U^T + delta I with delta > 0.
struct LowRankPlusDiagonal {
  Matrix U;
  double delta = 0.0;
};

/// P = A (x) B, A is m x m, B is n x n, both positive definite.
struct KroneckerPair {
  Matrix A;
  Matrix B;
};

using CovarianceRepr = std::variant<Dense, BlockDiagonal, LowRankPlusDiagonal, KroneckerPair>;

/// scale * I_dim without storing the matrix.
struct ScaledIdentity {
  Index dim = 0;
  double scale = 0.0;
};

/// Process-noise covariance: explicit matrix or isotropic.
using NoiseCov = std::variant<Matrix, ScaledIdentity>;

Index noise_dim(const NoiseCov& q);
Matrix noise_dense(const NoiseCov& q);

/// Faults that the verification harness can switch on to prove checks bite.
struct FaultInjection {
  bool skip_symmetrization = false;
  bool drop_joseph_noise_term = false;
};

struct Options {
  /// Largest d for which d x d matrices may be formed.
  Index audit_threshold = linalg::kDefaultAuditThreshold;
  /// Materialize I - K H in GainResult (only when d <= audit_threshold).
  bool audit = true;
  /// Lower bound for the isotropic part after low-rank re-truncation.
  double delta_floor = 1e-6;
  /// Condition-number ceiling for the innovation covariance S.
  double max_condition = 1e12;
  FaultInjection faults{};
};

struct GainResult {
  Matrix K;  // d x m
  Matrix S;  // m x m, H P H^T + R
  std::optional<Matrix> contraction;  // I - K H
};

// Construction helpers that check the variant invariants.
CovarianceRepr make_dense(Matrix P);
CovarianceRepr make_block_diagonal(std::vector<Matrix> blocks);
CovarianceRepr make_low_rank(Matrix U, double delta);
CovarianceRepr make_kronecker(Matrix A, Matrix B);
CovarianceRepr isotropic(Index d, double variance, std::string_view kind = "dense",
                         Index rank = 0);

/// Throws if the representation breaks its invariants.
void validate(const CovarianceRepr& repr);

Index dim(const CovarianceRepr& repr);
std::string_view kind_name(const CovarianceRepr& repr);

/// Exact dense equivalent. Refuses when dim exceeds the audit threshold.
Matrix densify(const CovarianceRepr& repr, const Options& opts = {});

/// P * X without forming P.
Matrix apply(const CovarianceRepr& repr, const Matrix& X);

/// P^{-1} * X. Uses the Woodbury identity for the low-rank variant.
Matrix inverse_apply(const CovarianceRepr& repr, const Matrix& X);

/// Smallest eigenvalue of P. Exact for every variant at any scale where it can
/// be done without d x d work; otherwise requires audit scale.
double min_eigenvalue(const CovarianceRepr& repr, const Options& opts = {});

/// S = H P H^T + R, symmetrized.
Matrix innovation_covariance(const CovarianceRepr& P, const Matrix& H, const Matrix& R);

GainResult gain(const CovarianceRepr& P_pred, const Matrix& H, const Matrix& R,
                const Options& opts = {});

/// Posterior covariance given the gain computed from the same (P_pred, H, R).
///
/// Dense: Joseph form followed by symmetrization. BlockDiagonal: the diagonal
/// blocks of the Joseph-form posterior (cross-block terms are dropped).
/// LowRankPlusDiagonal: exact posterior re-truncated to the same rank.
/// KroneckerPair: densified and returned as Dense.
CovarianceRepr measurement_update(const CovarianceRepr& P_pred, const Matrix& K, const Matrix& H,
                                  const Matrix& R, const Options& opts = {});

/// A P A^T + Q. An empty A means the identity transition.
CovarianceRepr predict_cov(const CovarianceRepr& P, const std::optional<Matrix>& A,
                           const NoiseCov& Q, const Options& opts = {});

/// Best rank-r plus isotropic approximation of a symmetric PSD matrix.
///
/// delta = max(delta_min, mean of discarded eigenvalues); U holds the top r
/// eigenvectors scaled by sqrt(max(lambda_i - delta, 0)). For r >= d the
/// representation keeps every direction with delta = delta_min.
LowRankPlusDiagonal truncate_rank(const Matrix& P, Index r, double delta_min);

/// vec(B X A^T) for the Kronecker pair, X given column-major as an n x m matrix.
Vector kronecker_apply(const KroneckerPair& kp, const Vector& x);

}  // namespace kfl::cov
