#include "kfl/covariance.hpp"

#include <algorithm>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/QR>

namespace kfl::cov {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Index block_total(const BlockDiagonal& b) {
  Index n = 0;
  for (const auto& blk : b.blocks) n += blk.rows();
  return n;
}

void require_audit_scale(Index d, const Options& opts, const char* what) {
  if (d > opts.audit_threshold) {
    std::ostringstream os;
    os << what << ": dimension " << d << " exceeds audit threshold " << opts.audit_threshold;
    throw DimensionError(os.str());
  }
}

void check_pd_or_throw(const Matrix& P, const char* what) {
  const double tol = linalg::psd_tolerance(P, 1e-9);
  Eigen::LLT<Matrix> llt(P + tol * Matrix::Identity(P.rows(), P.cols()));
  if (llt.info() != Eigen::Success) {
    const double lmin = linalg::min_sym_eigenvalue(P);
    std::ostringstream os;
    os << what << ": covariance lost positive semidefiniteness (min eigenvalue " << lmin << ")";
    throw DefinitenessError(os.str(), lmin);
  }
}

Matrix finish_dense(Matrix P, const Options& opts) {
  if (!opts.faults.skip_symmetrization) P = linalg::symmetrize(P);
  return P;
}

Matrix joseph(const Matrix& P, const Matrix& K, const Matrix& H, const Matrix& Rk,
              const Options& opts) {
  const Index d = P.rows();
  const Matrix IKH = Matrix::Identity(d, d) - K * H;
  Matrix out = IKH * P * IKH.transpose();
  if (!opts.faults.drop_joseph_noise_term) out += K * Rk * K.transpose();
  return out;
}

// Best rank-r + delta' I approximation of P = Y core Y^T + delta I, for r < d,
// computed without forming any d x d matrix.
LowRankPlusDiagonal retruncate(const Matrix& Y, const Matrix& core, double delta, Index d, Index r,
                               double delta_min) {
  const Index k = Y.cols();
  const Index kq = std::min(d, k);
  const Index k2 = std::min(d, kq + r);

  Eigen::HouseholderQR<Matrix> qr(Y);
  const Matrix Qext = qr.householderQ() * Matrix::Identity(d, k2);
  const Matrix Ry = qr.matrixQR().topRows(kq).triangularView<Eigen::Upper>();

  Matrix C = Matrix::Zero(k2, k2);
  C.topLeftCorner(kq, kq) = linalg::symmetrize(Ry * core * Ry.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(C);
  const Vector& nu = es.eigenvalues();  // ascending

  const Index drop = k2 - r;
  double discarded = static_cast<double>(d - k2) * delta;
  for (Index i = 0; i < drop; ++i) discarded += nu(i) + delta;
  const double delta_new = std::max(delta_min, discarded / static_cast<double>(d - r));

  LowRankPlusDiagonal out;
  out.delta = delta_new;
  out.U.resize(d, r);
  for (Index j = 0; j < r; ++j) {
    const Index src = k2 - 1 - j;  // descending order
    const double scale = std::sqrt(std::max(nu(src) + delta - delta_new, 0.0));
    out.U.col(j) = scale * (Qext * es.eigenvectors().col(src));
  }
  return out;
}

bool is_exact_identity(const Matrix& A) {
  return A.rows() == A.cols() && A.isIdentity(0.0);
}

}  // namespace

Index noise_dim(const NoiseCov& q) {
  return std::visit(overloaded{[](const Matrix& m) { return m.rows(); },
                               [](const ScaledIdentity& s) { return s.dim; }},
                    q);
}

Matrix noise_dense(const NoiseCov& q) {
  return std::visit(
      overloaded{[](const Matrix& m) { return m; },
                 [](const ScaledIdentity& s) -> Matrix {
                   return s.scale * Matrix::Identity(s.dim, s.dim);
                 }},
      q);
}

CovarianceRepr make_dense(Matrix P) {
  CovarianceRepr r = Dense{std::move(P)};
  validate(r);
  return r;
}

CovarianceRepr make_block_diagonal(std::vector<Matrix> blocks) {
  CovarianceRepr r = BlockDiagonal{std::move(blocks)};
  validate(r);
  return r;
}

CovarianceRepr make_low_rank(Matrix U, double delta) {
  CovarianceRepr r = LowRankPlusDiagonal{std::move(U), delta};
  validate(r);
  return r;
}

CovarianceRepr make_kronecker(Matrix A, Matrix B) {
  CovarianceRepr r = KroneckerPair{std::move(A), std::move(B)};
  validate(r);
  return r;
}

CovarianceRepr isotropic(Index d, double variance, std::string_view kind, Index rank) {
  if (kind == "dense") return make_dense(variance * Matrix::Identity(d, d));
  if (kind == "lowrank") return make_low_rank(Matrix::Zero(d, rank), variance);
  throw Error("isotropic: unsupported kind '" + std::string(kind) + "'");
}

void validate(const CovarianceRepr& repr) {
  std::visit(
      overloaded{
          [](const Dense& d) {
            linalg::require_symmetric(d.P, "Dense covariance");
            if (d.P.rows() <= linalg::kDefaultAuditThreshold) {
              linalg::require_psd(d.P, "Dense covariance");
            }
          },
          [](const BlockDiagonal& b) {
            for (size_t i = 0; i < b.blocks.size(); ++i) {
              linalg::require_psd(b.blocks[i], "covariance block " + std::to_string(i));
            }
          },
          [](const LowRankPlusDiagonal& l) {
            if (!(l.delta > 0.0) || !std::isfinite(l.delta)) {
              std::ostringstream os;
              os << "low-rank covariance requires delta > 0, got " << l.delta;
              throw DefinitenessError(os.str(), l.delta);
            }
            if (!l.U.allFinite()) throw NonFiniteError("low-rank factor U is not finite", -1);
          },
          [](const KroneckerPair& k) {
            linalg::require_pd(k.A, "Kronecker factor A");
            linalg::require_pd(k.B, "Kronecker factor B");
          }},
      repr);
}

Index dim(const CovarianceRepr& repr) {
  return std::visit(overloaded{[](const Dense& d) { return d.P.rows(); },
                               [](const BlockDiagonal& b) { return block_total(b); },
                               [](const LowRankPlusDiagonal& l) { return l.U.rows(); },
                               [](const KroneckerPair& k) { return k.A.rows() * k.B.rows(); }},
                    repr);
}

std::string_view kind_name(const CovarianceRepr& repr) {
  static constexpr std::string_view names[] = {"dense", "block", "lowrank", "kronecker"};
  return names[repr.index()];
}

Matrix densify(const CovarianceRepr& repr, const Options& opts) {
  require_audit_scale(dim(repr), opts, "densify");
  return std::visit(
      overloaded{[](const Dense& d) -> Matrix { return d.P; },
                 [](const BlockDiagonal& b) -> Matrix { return linalg::block_diag(b.blocks); },
                 [](const LowRankPlusDiagonal& l) -> Matrix {
                   const Index d = l.U.rows();
                   return l.U * l.U.transpose() + l.delta * Matrix::Identity(d, d);
                 },
                 [](const KroneckerPair& k) -> Matrix { return linalg::kron(k.A, k.B); }},
      repr);
}

Vector kronecker_apply(const KroneckerPair& kp, const Vector& x) {
  const Index m = kp.A.rows();
  const Index n = kp.B.rows();
  if (x.size() != m * n) throw DimensionError("kronecker_apply: vector length mismatch");
  const Eigen::Map<const Matrix> X(x.data(), n, m);
  const Matrix Y = kp.B * X * kp.A.transpose();
  return Eigen::Map<const Vector>(Y.data(), m * n);
}

Matrix apply(const CovarianceRepr& repr, const Matrix& X) {
  if (X.rows() != dim(repr)) throw DimensionError("apply: operand rows do not match covariance");
  return std::visit(
      overloaded{[&](const Dense& d) -> Matrix { return d.P * X; },
                 [&](const BlockDiagonal& b) -> Matrix {
                   Matrix out(X.rows(), X.cols());
                   Index off = 0;
                   for (const auto& blk : b.blocks) {
                     out.middleRows(off, blk.rows()) = blk * X.middleRows(off, blk.rows());
                     off += blk.rows();
                   }
                   return out;
                 },
                 [&](const LowRankPlusDiagonal& l) -> Matrix {
                   return l.U * (l.U.transpose() * X) + l.delta * X;
                 },
                 [&](const KroneckerPair& k) -> Matrix {
                   Matrix out(X.rows(), X.cols());
                   for (Index j = 0; j < X.cols(); ++j) out.col(j) = kronecker_apply(k, X.col(j));
                   return out;
                 }},
      repr);
}

Matrix inverse_apply(const CovarianceRepr& repr, const Matrix& X) {
  if (X.rows() != dim(repr)) {
    throw DimensionError("inverse_apply: operand rows do not match covariance");
  }
  return std::visit(
      overloaded{
          [&](const Dense& d) -> Matrix { return linalg::spd_solve(d.P, X, "Dense covariance"); },
          [&](const BlockDiagonal& b) -> Matrix {
            Matrix out(X.rows(), X.cols());
            Index off = 0;
            for (const auto& blk : b.blocks) {
              out.middleRows(off, blk.rows()) =
                  linalg::spd_solve(blk, X.middleRows(off, blk.rows()), "covariance block");
              off += blk.rows();
            }
            return out;
          },
          [&](const LowRankPlusDiagonal& l) -> Matrix {
            // (U U^T + delta I)^{-1} = (I - U (delta I + U^T U)^{-1} U^T) / delta
            const Index r = l.U.cols();
            const Matrix inner = l.delta * Matrix::Identity(r, r) + l.U.transpose() * l.U;
            const Matrix corr = linalg::spd_solve(inner, l.U.transpose() * X, "Woodbury core");
            return (X - l.U * corr) / l.delta;
          },
          [&](const KroneckerPair& k) -> Matrix {
            const Index m = k.A.rows();
            const Index n = k.B.rows();
            Eigen::LLT<Matrix> la(k.A);
            Eigen::LLT<Matrix> lb(k.B);
            Matrix out(X.rows(), X.cols());
            for (Index j = 0; j < X.cols(); ++j) {
              const Vector col = X.col(j);
              const Eigen::Map<const Matrix> Xm(col.data(), n, m);
              // B^{-1} X A^{-T}
              const Matrix left = lb.solve(Xm);
              const Matrix res = la.solve(left.transpose()).transpose();
              out.col(j) = Eigen::Map<const Vector>(res.data(), m * n);
            }
            return out;
          }},
      repr);
}

double min_eigenvalue(const CovarianceRepr& repr, const Options& opts) {
  return std::visit(
      overloaded{[&](const Dense& d) { return linalg::min_sym_eigenvalue(d.P); },
                 [&](const BlockDiagonal& b) {
                   double m = std::numeric_limits<double>::infinity();
                   for (const auto& blk : b.blocks) m = std::min(m, linalg::min_sym_eigenvalue(blk));
                   return m;
                 },
                 [&](const LowRankPlusDiagonal& l) {
                   if (l.U.cols() < l.U.rows()) return l.delta;
                   return linalg::min_sym_eigenvalue(densify(CovarianceRepr{l}, opts));
                 },
                 [&](const KroneckerPair& k) {
                   return linalg::min_sym_eigenvalue(k.A) * linalg::min_sym_eigenvalue(k.B);
                 }},
      repr);
}

Matrix innovation_covariance(const CovarianceRepr& P, const Matrix& H, const Matrix& R) {
  if (H.cols() != dim(P)) {
    std::ostringstream os;
    os << "H has " << H.cols() << " columns but covariance dimension is " << dim(P);
    throw DimensionError(os.str());
  }
  if (R.rows() != H.rows() || R.cols() != H.rows()) {
    throw DimensionError("R must be m x m with m = rows(H)");
  }
  const Matrix PHt = cov::apply(P, H.transpose());
  return linalg::symmetrize(H * PHt + R);
}

GainResult gain(const CovarianceRepr& P_pred, const Matrix& H, const Matrix& R,
                const Options& opts) {
  if (H.cols() != dim(P_pred)) {
    std::ostringstream os;
    os << "gain: H has " << H.cols() << " columns but covariance dimension is " << dim(P_pred);
    throw DimensionError(os.str());
  }
  if (R.rows() != H.rows() || R.cols() != H.rows()) {
    throw DimensionError("gain: R must be m x m with m = rows(H)");
  }
  const Matrix PHt = cov::apply(P_pred, H.transpose());
  GainResult out;
  out.S = linalg::symmetrize(H * PHt + R);

  const Index m = out.S.rows();
  if (m > 0) {
    const Vector ev = linalg::sym_eigenvalues(out.S);
    const double lmin = ev(0);
    const double lmax = ev(m - 1);
    if (!(lmin > 0.0) || lmax / lmin > opts.max_condition) {
      std::ostringstream os;
      os << "innovation covariance S is numerically singular: min eigenvalue " << lmin
         << ", condition number " << (lmin > 0 ? lmax / lmin : INFINITY);
      throw SingularError(os.str(), lmin);
    }
    Eigen::LLT<Matrix> llt(out.S);
    out.K = llt.solve(PHt.transpose()).transpose();
  } else {
    out.K = Matrix::Zero(dim(P_pred), 0);
  }

  const Index d = dim(P_pred);
  if (opts.audit && d <= opts.audit_threshold) {
    out.contraction = Matrix::Identity(d, d) - out.K * H;
  }
  return out;
}

CovarianceRepr measurement_update(const CovarianceRepr& P_pred, const Matrix& K, const Matrix& H,
                                  const Matrix& R, const Options& opts) {
  const Index d = dim(P_pred);
  if (K.rows() != d || K.cols() != H.rows() || H.cols() != d) {
    throw DimensionError("measurement_update: K, H and covariance dimensions disagree");
  }
  return std::visit(
      overloaded{
          [&](const Dense& dn) -> CovarianceRepr {
            Matrix P = finish_dense(joseph(dn.P, K, H, R, opts), opts);
            check_pd_or_throw(P, "measurement_update");
            return Dense{std::move(P)};
          },
          [&](const BlockDiagonal& b) -> CovarianceRepr {
            const Index m = H.rows();
            std::vector<Matrix> hph;
            hph.reserve(b.blocks.size());
            Index off = 0;
            Matrix total = Matrix::Zero(m, m);
            for (const auto& blk : b.blocks) {
              const Matrix Hk = H.middleCols(off, blk.rows());
              hph.push_back(Hk * blk * Hk.transpose());
              total += hph.back();
              off += blk.rows();
            }
            BlockDiagonal out;
            out.blocks.reserve(b.blocks.size());
            off = 0;
            for (size_t i = 0; i < b.blocks.size(); ++i) {
              const Matrix& blk = b.blocks[i];
              const Index n = blk.rows();
              const Matrix Hk = H.middleCols(off, n);
              const Matrix Kk = K.middleRows(off, n);
              // effective noise seen by this block: R plus the other blocks' signal
              const Matrix Rk = R + (total - hph[i]);
              Matrix Pk = finish_dense(joseph(blk, Kk, Hk, Rk, opts), opts);
              check_pd_or_throw(Pk, "measurement_update (block)");
              out.blocks.push_back(std::move(Pk));
              off += n;
            }
            return out;
          },
          [&](const LowRankPlusDiagonal& l) -> CovarianceRepr {
            const Index r = l.U.cols();
            if (r >= d) {
              require_audit_scale(d, opts, "measurement_update (full-rank low-rank)");
              const Matrix P = densify(CovarianceRepr{l}, opts);
              const Matrix post = finish_dense(joseph(P, K, H, R, opts), opts);
              return truncate_rank(post, r, opts.delta_floor);
            }
            // P+ = U U^T - K S K^T + delta I with S = H P H^T + R
            const Matrix S = innovation_covariance(P_pred, H, R);
            const Index m = H.rows();
            Matrix Y(d, r + m);
            Y << l.U, K;
            Matrix core = Matrix::Zero(r + m, r + m);
            core.topLeftCorner(r, r).setIdentity();
            core.bottomRightCorner(m, m) = -S;
            return retruncate(Y, core, l.delta, d, r, opts.delta_floor);
          },
          [&](const KroneckerPair& k) -> CovarianceRepr {
            const Matrix P = densify(CovarianceRepr{k}, opts);
            Matrix post = finish_dense(joseph(P, K, H, R, opts), opts);
            check_pd_or_throw(post, "measurement_update (kronecker)");
            return Dense{std::move(post)};
          }},
      P_pred);
}

CovarianceRepr predict_cov(const CovarianceRepr& P, const std::optional<Matrix>& A,
                           const NoiseCov& Q, const Options& opts) {
  const Index d = dim(P);
  if (noise_dim(Q) != d) throw DimensionError("predict_cov: Q dimension mismatch");
  if (A && (A->rows() != d || A->cols() != d)) {
    throw DimensionError("predict_cov: transition Jacobian must be d x d");
  }
  const bool identity = !A || is_exact_identity(*A);
  const auto* iso = std::get_if<ScaledIdentity>(&Q);
  const auto* qmat = std::get_if<Matrix>(&Q);
  const bool zero_q = (iso && iso->scale == 0.0) || (qmat && qmat->isZero(0.0));
  if (iso && iso->scale < 0.0) throw DefinitenessError("predict_cov: negative isotropic Q", iso->scale);

  return std::visit(
      overloaded{
          [&](const Dense& dn) -> CovarianceRepr {
            Matrix out = identity ? dn.P : Matrix((*A) * dn.P * A->transpose());
            if (iso) {
              out.diagonal().array() += iso->scale;
            } else {
              out += *qmat;
            }
            return Dense{finish_dense(std::move(out), opts)};
          },
          [&](const BlockDiagonal& b) -> CovarianceRepr {
            BlockDiagonal out;
            Index off_k = 0;
            for (const auto& blk : b.blocks) {
              const Index nk = blk.rows();
              Matrix Pk;
              if (identity) {
                Pk = blk;
              } else {
                Pk = Matrix::Zero(nk, nk);
                Index off_j = 0;
                for (const auto& bj : b.blocks) {
                  const Matrix Akj = A->block(off_k, off_j, nk, bj.rows());
                  Pk += Akj * bj * Akj.transpose();
                  off_j += bj.rows();
                }
              }
              if (iso) {
                Pk.diagonal().array() += iso->scale;
              } else {
                Pk += qmat->block(off_k, off_k, nk, nk);
              }
              out.blocks.push_back(finish_dense(std::move(Pk), opts));
              off_k += nk;
            }
            return out;
          },
          [&](const LowRankPlusDiagonal& l) -> CovarianceRepr {
            if (identity && zero_q) return l;
            if (identity && iso) return LowRankPlusDiagonal{l.U, l.delta + iso->scale};
            if (identity && qmat) {
              const double q0 = d > 0 ? (*qmat)(0, 0) : 0.0;
              if (*qmat == q0 * Matrix::Identity(d, d)) {
                return LowRankPlusDiagonal{l.U, l.delta + q0};
              }
            }
            require_audit_scale(d, opts, "predict_cov (low-rank, general transition)");
            const Matrix P0 = densify(CovarianceRepr{l}, opts);
            Matrix M = identity ? P0 : Matrix((*A) * P0 * A->transpose());
            M += noise_dense(Q);
            return truncate_rank(linalg::symmetrize(M), l.U.cols(), opts.delta_floor);
          },
          [&](const KroneckerPair& k) -> CovarianceRepr {
            if (identity && zero_q) return k;
            const Matrix P0 = densify(CovarianceRepr{k}, opts);
            Matrix M = identity ? P0 : Matrix((*A) * P0 * A->transpose());
            M += noise_dense(Q);
            return Dense{finish_dense(std::move(M), opts)};
          }},
      P);
}

LowRankPlusDiagonal truncate_rank(const Matrix& P, Index r, double delta_min) {
  linalg::require_symmetric(P, "truncate_rank input");
  const Index d = P.rows();
  if (r < 0) throw DimensionError("truncate_rank: negative rank");
  Eigen::SelfAdjointEigenSolver<Matrix> es(linalg::symmetrize(P));
  const Vector& lam = es.eigenvalues();  // ascending
  LowRankPlusDiagonal out;
  if (r >= d) {
    out.delta = delta_min;
    out.U.resize(d, d);
    for (Index j = 0; j < d; ++j) {
      const Index src = d - 1 - j;
      out.U.col(j) = std::sqrt(std::max(lam(src) - delta_min, 0.0)) * es.eigenvectors().col(src);
    }
    return out;
  }
  double discarded = 0.0;
  for (Index i = 0; i < d - r; ++i) discarded += lam(i);
  out.delta = std::max(delta_min, discarded / static_cast<double>(d - r));
  out.U.resize(d, r);
  for (Index j = 0; j < r; ++j) {
    const Index src = d - 1 - j;
    out.U.col(j) = std::sqrt(std::max(lam(src) - out.delta, 0.0)) * es.eigenvectors().col(src);
  }
  return out;
}

}  // namespace kfl::cov
