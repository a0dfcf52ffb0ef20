#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

namespace kfl {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A matrix that must be (semi)definite is not.
class DefinitenessError : public Error {
 public:
  DefinitenessError(const std::string& what, double min_eigenvalue)
      : Error(what), min_eigenvalue_(min_eigenvalue) {}
  double min_eigenvalue() const { return min_eigenvalue_; }

 private:
  double min_eigenvalue_;
};

/// Numerically singular or ill-conditioned system.
class SingularError : public Error {
 public:
  SingularError(const std::string& what, double min_eigenvalue)
      : Error(what), min_eigenvalue_(min_eigenvalue) {}
  double min_eigenvalue() const { return min_eigenvalue_; }

 private:
  double min_eigenvalue_;
};

/// NaN or Inf appeared where a finite value is required.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Iterative method hit its iteration cap.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double last_residual)
      : Error(what), last_residual_(last_residual) {}
  double last_residual() const { return last_residual_; }

 private:
  double last_residual_;
};

namespace linalg {

/// Default ceiling on dimensions for which dense d x d audits are allowed.
inline constexpr Index kDefaultAuditThreshold = 2048;

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

/// Eigenvalues of the symmetric part, ascending.
inline Vector sym_eigenvalues(const Matrix& m) {
  if (m.size() == 0) return Vector();
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

inline double min_sym_eigenvalue(const Matrix& m) {
  const Vector ev = sym_eigenvalues(m);
  return ev.size() == 0 ? 0.0 : ev(0);
}

inline double max_sym_eigenvalue(const Matrix& m) {
  const Vector ev = sym_eigenvalues(m);
  return ev.size() == 0 ? 0.0 : ev(ev.size() - 1);
}

/// Largest eigenvalue modulus of a general square matrix.
inline double spectral_radius(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::EigenSolver<Matrix> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Largest singular value.
double spectral_norm(const Matrix& m);

/// Numerical rank from singular values with relative tolerance.
Index numerical_rank(const Matrix& m, double rel_tol = 1e-10);

/// Symmetric tolerance used for PSD checks: |tol| scaled by the matrix magnitude.
inline double psd_tolerance(const Matrix& m, double rel = 1e-10) {
  const double scale = m.size() == 0 ? 1.0 : std::max(1.0, m.cwiseAbs().maxCoeff());
  return rel * scale;
}

void require_square(const Matrix& m, const std::string& name);
void require_symmetric(const Matrix& m, const std::string& name, double rel_tol = 1e-9);

/// Throws DefinitenessError if min eigenvalue < -tolerance.
void require_psd(const Matrix& m, const std::string& name);

/// Throws DefinitenessError if min eigenvalue < floor.
void require_pd(const Matrix& m, const std::string& name, double floor = 1e-12);

/// Solve m * X = rhs for symmetric positive definite m. Throws SingularError.
Matrix spd_solve(const Matrix& m, const Matrix& rhs, const std::string& name);

/// Inverse of a symmetric positive definite matrix.
inline Matrix spd_inverse(const Matrix& m, const std::string& name) {
  return spd_solve(m, Matrix::Identity(m.rows(), m.cols()), name);
}

/// Block-diagonal assembly.
Matrix block_diag(const std::vector<Matrix>& blocks);

/// Kronecker product A (x) B.
Matrix kron(const Matrix& a, const Matrix& b);

/// Ordinary least-squares line fit y = a + b x.
struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double r_squared = 0.0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace linalg
}  // namespace kfl
