#include "kfl/filter.hpp"

#include <chrono>
#include <sstream>

namespace kfl::filter {

namespace {

void guard_finite(const Vector& v, long step, const char* what) {
  if (!v.allFinite()) {
    std::ostringstream os;
    os << what << " produced non-finite values at step " << step;
    throw NonFiniteError(os.str(), step);
  }
}

}  // namespace

GaussianBelief make_belief(Vector mean, cov::CovarianceRepr cov, long step) {
  if (cov::dim(cov) != mean.size()) {
    std::ostringstream os;
    os << "belief mean has length " << mean.size() << " but covariance dimension is "
       << cov::dim(cov);
    throw DimensionError(os.str());
  }
  return GaussianBelief{std::move(mean), std::move(cov), step};
}

GaussianBelief isotropic_belief(Vector mean, double sigma0_sq) {
  const Index d = mean.size();
  return make_belief(std::move(mean), cov::make_dense(sigma0_sq * Matrix::Identity(d, d)));
}

GaussianBelief predict(const GaussianBelief& belief, const model::StateSpaceModel& model,
                       const Vector& input, const cov::Options& opts) {
  if (belief.mean.size() != model.state_dim()) {
    throw DimensionError("predict: belief dimension does not match model state");
  }
  const long step = belief.step + 1;
  GaussianBelief out;
  out.step = step;
  if (model.identity_transition()) {
    out.mean = belief.mean;
    out.cov = cov::predict_cov(belief.cov, std::nullopt, model.Q(), opts);
  } else {
    out.mean = model.transition(belief.mean, input);
    guard_finite(out.mean, step, "transition");
    const Matrix A = model.transition_jacobian(belief.mean, input);
    if (!A.allFinite()) throw NonFiniteError("transition Jacobian is not finite", step);
    out.cov = cov::predict_cov(belief.cov, A, model.Q(), opts);
  }
  return out;
}

GaussianBelief predict(const GaussianBelief& belief, const model::AugmentedModel& model,
                       const Vector& input, const cov::Options& opts) {
  return predict(belief, model.state_space(), input, opts);
}

Innovation innovate(const GaussianBelief& belief_pred, const model::StateSpaceModel& model,
                    const Vector& y, const Vector& input) {
  if (!y.allFinite()) {
    std::ostringstream os;
    os << "observation is not finite at step " << belief_pred.step;
    throw NonFiniteError(os.str(), belief_pred.step);
  }
  if (y.size() != model.obs_dim()) throw DimensionError("innovate: observation length mismatch");
  Innovation inn;
  inn.predicted_obs = model.observation(belief_pred.mean, input);
  guard_finite(inn.predicted_obs, belief_pred.step, "observation map");
  inn.residual = y - inn.predicted_obs;
  inn.H = model.observation_jacobian(belief_pred.mean, input);
  inn.S = cov::innovation_covariance(belief_pred.cov, inn.H, model.R());
  return inn;
}

UpdateResult update(const GaussianBelief& belief_pred, const Innovation& innov, const Matrix& R,
                    const cov::Options& opts) {
  UpdateResult out;
  out.gain = cov::gain(belief_pred.cov, innov.H, R, opts);
  out.belief.mean = belief_pred.mean + out.gain.K * innov.residual;
  guard_finite(out.belief.mean, belief_pred.step, "measurement update");
  out.belief.cov = cov::measurement_update(belief_pred.cov, out.gain.K, innov.H, R, opts);
  out.belief.step = belief_pred.step;
  return out;
}

StepResult filter_step(const GaussianBelief& belief, const model::StateSpaceModel& model,
                       const Vector& input, const Vector& y, const StepOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  StepResult out;
  out.predicted = predict(belief, model, input, opts.cov);
  out.innovation = innovate(out.predicted, model, y, input);
  UpdateResult up = update(out.predicted, out.innovation, model.R(), opts.cov);
  out.belief = std::move(up.belief);
  out.gain = std::move(up.gain);

  StepRecord& rec = out.record;
  rec.step = out.belief.step;
  rec.innovation_norm = out.innovation.residual.norm();
  rec.gain_norm = out.gain.K.norm();
  const Index d = out.belief.mean.size();
  if (out.gain.contraction && d <= opts.spectral_audit_max_dim) {
    rec.spectral_radius = linalg::spectral_radius(*out.gain.contraction);
  }
  if (opts.lyapunov_reference) {
    const Vector e = out.belief.mean - *opts.lyapunov_reference;
    rec.lyapunov = e.dot(cov::inverse_apply(out.belief.cov, e).col(0));
  }
  if (opts.snapshot) {
    rec.mean = out.belief.mean;
    rec.cov = cov::densify(out.belief.cov, opts.cov);
    rec.cov_pred = cov::densify(out.predicted.cov, opts.cov);
    rec.H = out.innovation.H;
    rec.K = out.gain.K;
  }
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

Matrix riccati_map(const Matrix& P, const Matrix& A, const Matrix& H, const Matrix& Q,
                   const Matrix& R) {
  const Matrix PHt = P * H.transpose();
  const Matrix S = linalg::symmetrize(H * PHt + R);
  const Matrix post = P - PHt * linalg::spd_solve(S, PHt.transpose(), "innovation covariance");
  return linalg::symmetrize(A * post * A.transpose() + Q);
}

DareResult dare_solve(const Matrix& A, const Matrix& H, const Matrix& Q, const Matrix& R,
                      double tol, int max_iter, const std::optional<Matrix>& P0) {
  linalg::require_square(A, "A");
  if (H.cols() != A.rows()) throw DimensionError("dare_solve: H columns must match A");
  if (Q.rows() != A.rows() || Q.cols() != A.rows()) throw DimensionError("dare_solve: Q shape");
  if (R.rows() != H.rows() || R.cols() != H.rows()) throw DimensionError("dare_solve: R shape");
  if (!(tol > 0.0)) throw Error("dare_solve: tol must be positive");
  linalg::require_psd(Q, "Q");
  linalg::require_pd(R, "R");

  DareResult out;
  const Index n = A.rows();
  if (n <= linalg::kDefaultAuditThreshold) {
    const Index rank = linalg::numerical_rank(model::observability_matrix(A, H));
    if (rank < n) {
      std::ostringstream os;
      os << "observability matrix has rank " << rank << " < " << n
         << "; convergence is not guaranteed";
      out.warnings.push_back(os.str());
    }
  }

  Matrix P = P0 ? *P0 : Q;
  double diff = INFINITY;
  for (int k = 1; k <= max_iter; ++k) {
    Matrix next = riccati_map(P, A, H, Q, R);
    diff = (next - P).norm();
    P = std::move(next);
    if (!P.allFinite()) throw NonFiniteError("dare_solve: Riccati iterate diverged", k);
    if (diff <= tol) {
      out.iterations = k;
      break;
    }
    if (k == max_iter) {
      std::ostringstream os;
      os << "dare_solve did not converge in " << max_iter << " iterations (last step " << diff
         << ")";
      throw ConvergenceError(os.str(), diff);
    }
  }
  out.P = P;
  out.residual = (riccati_map(P, A, H, Q, R) - P).norm();
  const Matrix S = linalg::symmetrize(H * P * H.transpose() + R);
  out.K = linalg::spd_solve(S, H * P, "innovation covariance").transpose();
  return out;
}

}  // namespace kfl::filter
