#include "kfl/linalg.hpp"

#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

namespace kfl::linalg {

double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

Index numerical_rank(const Matrix& m, double rel_tol) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& sv = svd.singularValues();
  const double cutoff = rel_tol * std::max(1e-300, sv(0));
  Index rank = 0;
  for (Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > cutoff) ++rank;
  }
  return rank;
}

void require_square(const Matrix& m, const std::string& name) {
  if (m.rows() != m.cols()) {
    std::ostringstream os;
    os << name << " must be square, got " << m.rows() << "x" << m.cols();
    throw DimensionError(os.str());
  }
}

void require_symmetric(const Matrix& m, const std::string& name, double rel_tol) {
  require_square(m, name);
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (m.size() > 0 && asym > psd_tolerance(m, rel_tol)) {
    std::ostringstream os;
    os << name << " is not symmetric (max |M - M^T| = " << asym << ")";
    throw DefinitenessError(os.str(), std::numeric_limits<double>::quiet_NaN());
  }
}

void require_psd(const Matrix& m, const std::string& name) {
  require_symmetric(m, name);
  if (m.size() == 0) return;
  const double lmin = min_sym_eigenvalue(m);
  if (lmin < -psd_tolerance(m)) {
    std::ostringstream os;
    os << name << " is not positive semidefinite: min eigenvalue " << lmin;
    throw DefinitenessError(os.str(), lmin);
  }
}

void require_pd(const Matrix& m, const std::string& name, double floor) {
  require_symmetric(m, name);
  if (m.size() == 0) return;
  const double lmin = min_sym_eigenvalue(m);
  if (!(lmin >= floor)) {
    std::ostringstream os;
    os << name << " is not positive definite: min eigenvalue " << lmin << " < " << floor;
    throw DefinitenessError(os.str(), lmin);
  }
}

Matrix spd_solve(const Matrix& m, const Matrix& rhs, const std::string& name) {
  Eigen::LLT<Matrix> llt(symmetrize(m));
  if (llt.info() != Eigen::Success) {
    const double lmin = min_sym_eigenvalue(m);
    std::ostringstream os;
    os << name << " is not positive definite (min eigenvalue " << lmin << ")";
    throw SingularError(os.str(), lmin);
  }
  return llt.solve(rhs);
}

Matrix block_diag(const std::vector<Matrix>& blocks) {
  Index n = 0;
  for (const auto& b : blocks) n += b.rows();
  Matrix out = Matrix::Zero(n, n);
  Index off = 0;
  for (const auto& b : blocks) {
    out.block(off, off, b.rows(), b.cols()) = b;
    off += b.rows();
  }
  return out;
}

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DimensionError("fit_line needs at least two paired samples");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LineFit fit;
  fit.slope = sxx > 0 ? sxy / sxx : 0.0;
  fit.intercept = my - fit.slope * mx;
  fit.r_squared = (sxx > 0 && syy > 0) ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

}  // namespace kfl::linalg
