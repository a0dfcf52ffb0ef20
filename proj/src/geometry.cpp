#include "kfl/geometry.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/LU>

namespace kfl::geometry {

Matrix FisherMetric::regularized() const {
  Matrix out = F;
  out.diagonal().array() += regularization;
  return out;
}

double default_regularization(const Matrix& F) {
  const Index d = F.rows();
  if (d == 0) return 0.0;
  const Vector ev = linalg::sym_eigenvalues(F);
  const double scale = std::max(std::abs(ev(d - 1)), 1e-300);
  if (ev(0) > 1e-12 * scale) return 0.0;
  return 1e-8 * F.trace() / static_cast<double>(d);
}

FisherMetric fisher_gaussian(const Matrix& H, const Matrix& R) {
  if (R.rows() != H.rows() || R.cols() != H.rows()) {
    throw DimensionError("fisher_gaussian: R must be m x m with m = rows(H)");
  }
  FisherMetric out;
  out.source = FisherSource::gaussian;
  out.F = linalg::symmetrize(H.transpose() * linalg::spd_solve(R, H, "R"));
  out.regularization = default_regularization(out.F);
  return out;
}

FisherMetric fisher_categorical(const Matrix& W, const Vector& s) {
  if (W.rows() != s.size()) throw DimensionError("fisher_categorical: W rows must equal |s|");
  if (s.size() == 0 || s.minCoeff() < -1e-10 || std::abs(s.sum() - 1.0) > 1e-10) {
    std::ostringstream os;
    os << "fisher_categorical: s is not a probability vector (sum " << s.sum() << ", min "
       << (s.size() ? s.minCoeff() : 0.0) << ")";
    throw Error(os.str());
  }
  Matrix C = -s * s.transpose();
  C.diagonal() += s;
  FisherMetric out;
  out.source = FisherSource::categorical;
  out.F = linalg::symmetrize(W.transpose() * C * W);
  out.regularization = default_regularization(out.F);
  return out;
}

Vector natural_gradient_step(const Vector& theta, const FisherMetric& F, const Vector& grad,
                             double eta) {
  if (theta.size() != F.F.rows() || grad.size() != F.F.rows()) {
    throw DimensionError("natural_gradient_step: dimension mismatch");
  }
  const Matrix G = F.regularized();
  Eigen::LLT<Matrix> llt(G);
  if (llt.info() != Eigen::Success || linalg::min_sym_eigenvalue(G) <= 0.0) {
    const double lmin = linalg::min_sym_eigenvalue(G);
    std::ostringstream os;
    os << "natural_gradient_step: regularized Fisher is singular (min eigenvalue " << lmin << ")";
    throw SingularError(os.str(), lmin);
  }
  return theta + eta * llt.solve(grad);
}

double gaussian_loglik(const Vector& residual, const Matrix& R) {
  Eigen::LLT<Matrix> llt(R);
  if (llt.info() != Eigen::Success) {
    throw SingularError("gaussian_loglik: R not PD", linalg::min_sym_eigenvalue(R));
  }
  const double quad = residual.dot(llt.solve(residual));
  const Matrix L = llt.matrixL();
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  return -0.5 * quad - 0.5 * (logdet + static_cast<double>(R.rows()) * std::log(2.0 * M_PI));
}

Vector gaussian_loglik_gradient(const Matrix& H, const Matrix& R, const Vector& residual) {
  return H.transpose() * linalg::spd_solve(R, residual, "R");
}

EquivalenceGap equivalence_gap(const cov::CovarianceRepr& P, const Matrix& H, const Matrix& R) {
  EquivalenceGap out;
  const Index d = H.cols();
  const Matrix RinvH = linalg::spd_solve(R, H, "R");
  const Matrix F = linalg::symmetrize(H.transpose() * RinvH);
  if (linalg::numerical_rank(H, 1e-12) < d) {
    out.note = "H is not full column rank; F is singular and the gaps are undefined";
    return out;
  }
  const Matrix Finv = linalg::spd_inverse(F, "Fisher information");
  const Matrix target = Finv * RinvH.transpose();  // F^{-1} H^T R^{-1}

  const Matrix K = cov::gain(P, H, R).K;
  out.gap_ng = (K - target).norm() / K.norm();

  const Matrix Kf = cov::gain(cov::Dense{linalg::symmetrize(Finv)}, H, R).K;
  out.gap_damped = (Kf - 0.5 * target).norm() / Kf.norm();
  out.damped_identity_applies = H.rows() == d;
  if (!out.damped_identity_applies) {
    out.note = "H is not square, H F^{-1} H^T != R; gap_damped is reported, not expected to vanish";
  }
  return out;
}

}  // namespace kfl::geometry
