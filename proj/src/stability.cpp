#include "kfl/stability.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/LU>

#include "kfl/parallel.hpp"
#include "kfl/rng.hpp"

namespace kfl::stability {

ContractionCheck contraction_check(const cov::CovarianceRepr& P_pred, const Matrix& H,
                                   const Matrix& R, const cov::Options& opts) {
  const Index d = cov::dim(P_pred);
  if (d > opts.audit_threshold) throw DimensionError("contraction_check: above audit threshold");
  cov::Options o = opts;
  o.audit = true;
  const cov::GainResult g = cov::gain(P_pred, H, R, o);

  ContractionCheck out;
  out.contraction = *g.contraction;
  const Matrix P = cov::densify(P_pred, opts);
  const Matrix info = H.transpose() * linalg::spd_solve(R, H, "R");
  const Matrix M = Matrix::Identity(d, d) + P * info;
  const Matrix alt = M.partialPivLu().inverse();
  out.identity_residual = (out.contraction - alt).norm();
  out.rho = linalg::spectral_radius(out.contraction);
  return out;
}

std::vector<ExcitationWindow> excitation_window(const std::vector<Matrix>& H_seq, const Matrix& R,
                                                int N) {
  if (N < 1) throw Error("excitation_window: N must be >= 1");
  std::vector<ExcitationWindow> out;
  if (H_seq.size() < static_cast<std::size_t>(N)) return out;
  std::vector<Matrix> info;
  info.reserve(H_seq.size());
  for (const auto& H : H_seq) info.push_back(H.transpose() * linalg::spd_solve(R, H, "R"));
  for (std::size_t s = 0; s + N <= info.size(); ++s) {
    Matrix acc = info[s];
    for (int k = 1; k < N; ++k) acc += info[s + k];
    const Vector ev = linalg::sym_eigenvalues(acc);
    out.push_back({static_cast<long>(s), ev(0), ev(ev.size() - 1)});
  }
  return out;
}

double window_product_norm(const std::vector<Matrix>& contractions, std::size_t start,
                           std::size_t N) {
  if (start + N > contractions.size()) throw DimensionError("window_product_norm: window too long");
  Matrix prod = contractions[start];
  for (std::size_t k = 1; k < N; ++k) prod = contractions[start + k] * prod;
  return linalg::spectral_norm(prod);
}

double default_lyapunov_slack(Index obs_dim) {
  const double m = static_cast<double>(obs_dim);
  return m + 3.0 * std::sqrt(2.0 * m);
}

ErrorTrace error_trace(const std::vector<StepRecord>& run, const Vector& theta_star,
                       std::optional<double> slack) {
  ErrorTrace out;
  Index obs_dim = 1;
  for (const auto& rec : run) {
    if (!rec.mean || !rec.cov) throw Error("error_trace: step records need mean and cov snapshots");
    const Vector e = *rec.mean - theta_star;
    out.errors.push_back(e.norm());
    out.lyapunov.push_back(e.dot(linalg::spd_solve(*rec.cov, e, "posterior covariance").col(0)));
    if (rec.H) obs_dim = rec.H->rows();
  }
  const double s = slack.value_or(default_lyapunov_slack(obs_dim));
  for (std::size_t t = 0; t + 1 < out.lyapunov.size(); ++t) {
    if (out.lyapunov[t + 1] - out.lyapunov[t] > s) out.flagged_steps.push_back(run[t + 1].step);
  }
  std::vector<double> ts, logs;
  for (std::size_t t = 0; t < out.errors.size(); ++t) {
    if (!(out.errors[t] > 0.0)) break;
    ts.push_back(static_cast<double>(t));
    logs.push_back(std::log(out.errors[t]));
  }
  if (ts.size() >= 2) {
    const auto fit = linalg::fit_line(ts, logs);
    out.rate = std::exp(fit.slope);
    out.fit_r_squared = fit.r_squared;
  }
  return out;
}

MeanSquareCheck mean_square_recursion_check(const std::vector<Matrix>& K_seq,
                                            const std::vector<Matrix>& H_seq, const Matrix& R,
                                            const Matrix& E0, const std::optional<Matrix>& Q,
                                            int mc_samples, std::uint64_t seed, unsigned jobs) {
  if (K_seq.size() != H_seq.size()) throw DimensionError("K_seq and H_seq lengths differ");
  const Index d = E0.rows();
  MeanSquareCheck out;
  out.E.push_back(E0);
  std::vector<Matrix> A;
  A.reserve(K_seq.size());
  for (std::size_t t = 0; t < K_seq.size(); ++t) {
    A.push_back(Matrix::Identity(d, d) - K_seq[t] * H_seq[t]);
    Matrix next = A[t] * out.E.back() * A[t].transpose() + K_seq[t] * R * K_seq[t].transpose();
    if (Q) next += *Q;
    out.E.push_back(linalg::symmetrize(next));
  }
  if (mc_samples <= 0) return out;

  const std::size_t T = K_seq.size();
  const Matrix L0 = psd_factor(E0);
  const Matrix Lr = psd_factor(R);
  const Matrix Lq = Q ? psd_factor(*Q) : Matrix();
  const unsigned chunks = std::max(1u, jobs) * 4;
  // per-chunk accumulators, summed in chunk order
  std::vector<std::vector<Matrix>> partial(chunks, std::vector<Matrix>(T + 1, Matrix::Zero(d, d)));
  parallel_for(chunks, jobs, [&](std::size_t c) {
    for (int s = static_cast<int>(c); s < mc_samples; s += static_cast<int>(chunks)) {
      NoiseStream rng(seed, static_cast<std::uint64_t>(s), 11);
      Vector e = L0 * rng.normal(d);
      partial[c][0] += e * e.transpose();
      for (std::size_t t = 0; t < T; ++t) {
        e = A[t] * e + K_seq[t] * (Lr * rng.normal(R.rows()));
        if (Q) e += Lq * rng.normal(d);
        partial[c][t + 1] += e * e.transpose();
      }
    }
  });
  double worst = 0.0;
  for (std::size_t t = 0; t <= T; ++t) {
    Matrix acc = Matrix::Zero(d, d);
    for (unsigned c = 0; c < chunks; ++c) acc += partial[c][t];
    acc /= static_cast<double>(mc_samples);
    const double denom = out.E[t].norm();
    if (denom > 0) worst = std::max(worst, (acc - out.E[t]).norm() / denom);
  }
  out.mc_relative_error = worst;
  return out;
}

double QuadraticObjective::mu() const { return linalg::min_sym_eigenvalue(hessian); }
double QuadraticObjective::L() const { return linalg::max_sym_eigenvalue(hessian); }

ConvexAuditReport convex_convergence_audit(const QuadraticObjective& objective,
                                           const std::vector<Matrix>& preconditioners,
                                           const Vector& theta0, double eta, double sigma,
                                           int replicates, std::uint64_t seed, unsigned jobs) {
  if (preconditioners.empty()) throw Error("convex_convergence_audit: empty preconditioner run");
  if (replicates < 2) throw Error("convex_convergence_audit: need at least two replicates");
  const Index d = theta0.size();
  ConvexAuditReport rep;
  rep.eta = eta;
  rep.bounds.mu = objective.mu();
  rep.bounds.L = objective.L();
  rep.bounds.sigma = sigma;
  rep.bounds.m = INFINITY;
  rep.bounds.M = 0.0;
  for (const auto& B : preconditioners) {
    const Vector ev = linalg::sym_eigenvalues(B);
    rep.bounds.m = std::min(rep.bounds.m, ev(0));
    rep.bounds.M = std::max(rep.bounds.M, ev(d - 1));
  }
  const ConvexBounds& b = rep.bounds;
  rep.step_size_ok = eta > 0.0 && b.m > 0.0 && eta <= 2.0 * b.m / (b.L * b.M * b.M);

  const std::size_t T = preconditioners.size();
  const double factor = 1.0 - eta * b.mu * b.m;
  const double floor_term = eta * eta * b.M * b.M * sigma * sigma;
  const double noise_sd = d > 0 ? sigma / std::sqrt(static_cast<double>(d)) : 0.0;

  // sq[r][t] = ||e_t||^2 for replicate r
  std::vector<std::vector<double>> sq(replicates, std::vector<double>(T + 1));
  parallel_for(static_cast<std::size_t>(replicates), jobs, [&](std::size_t r) {
    Vector theta = theta0;
    sq[r][0] = (theta - objective.minimizer).squaredNorm();
    for (std::size_t t = 0; t < T; ++t) {
      NoiseStream rng(seed, t, 1000 + r);
      const Vector g = objective.gradient(theta) + noise_sd * rng.normal(d);
      theta -= eta * (preconditioners[t] * g);
      sq[r][t + 1] = (theta - objective.minimizer).squaredNorm();
    }
  });

  rep.mean_sq_error.resize(T + 1);
  std::vector<double> col(replicates), diff(replicates);
  for (std::size_t t = 0; t <= T; ++t) {
    for (int r = 0; r < replicates; ++r) col[r] = sq[r][t];
    rep.mean_sq_error[t] = pairwise_sum(col) / replicates;
  }
  const double n = static_cast<double>(replicates);
  for (std::size_t t = 0; t < T; ++t) {
    for (int r = 0; r < replicates; ++r) {
      diff[r] = sq[r][t + 1] - factor * sq[r][t] - floor_term;
    }
    const double mean = pairwise_sum(diff) / n;
    for (int r = 0; r < replicates; ++r) diff[r] = (diff[r] - mean) * (diff[r] - mean);
    const double sd = std::sqrt(pairwise_sum(diff) / (n - 1.0));
    const double scale = 1e-12 * std::max(1.0, rep.mean_sq_error[t]);
    const bool ok = mean <= 3.0 * sd / std::sqrt(n) + scale;
    rep.step_ok.push_back(ok);
    if (!ok && !rep.first_violation) rep.first_violation = static_cast<long>(t);
  }

  Vector theta = theta0;
  double prev = (theta - objective.minimizer).squaredNorm();
  for (std::size_t t = 0; t < T && prev > 0.0; ++t) {
    theta -= eta * (preconditioners[t] * objective.gradient(theta));
    const double next = (theta - objective.minimizer).squaredNorm();
    rep.noiseless_max_ratio = std::max(rep.noiseless_max_ratio, next / prev);
    prev = next;
  }
  rep.noiseless_ok = rep.noiseless_max_ratio <= factor + 1e-10;
  return rep;
}

PerturbationMargin lowrank_perturbation_margin(const Matrix& P_exact,
                                               const cov::CovarianceRepr& P_approx,
                                               const Matrix& H, const Matrix& R) {
  const Index d = P_exact.rows();
  const Matrix K = cov::gain(cov::Dense{P_exact}, H, R).K;
  const Matrix Kt = cov::gain(P_approx, H, R).K;
  PerturbationMargin out;
  const Matrix dK = Kt - K;
  out.delta_K_norm = linalg::spectral_norm(dK);
  out.delta_P_norm = linalg::spectral_norm(cov::densify(P_approx) - P_exact);
  out.lipschitz_ratio = out.delta_P_norm > 0 ? out.delta_K_norm / out.delta_P_norm : 0.0;
  out.rho_exact = linalg::spectral_radius(Matrix::Identity(d, d) - K * H);
  out.margin = (1.0 - out.rho_exact) - linalg::spectral_norm(dK * H);
  return out;
}

StabilityReport audit_run(const std::vector<StepRecord>& run, const Matrix& R, int window) {
  StabilityReport rep;
  std::vector<Matrix> Hs;
  for (const auto& rec : run) {
    if (!rec.H || !rec.cov_pred) {
      rep.notes.push_back("step " + std::to_string(rec.step) + " lacks snapshots; skipped");
      continue;
    }
    const auto chk = contraction_check(cov::Dense{*rec.cov_pred}, *rec.H, R);
    rep.contraction_spectral_radius.push_back(chk.rho);
    rep.identity_residual.push_back(chk.identity_residual);
    rep.lyapunov.push_back(rec.lyapunov);
    Hs.push_back(*rec.H);
  }
  if (window >= 1) rep.excitation = excitation_window(Hs, R, window);
  for (double rho : rep.contraction_spectral_radius) {
    if (rho > 1.0 + 1e-12) {
      std::ostringstream os;
      os << "spectral radius " << rho << " exceeds 1";
      rep.notes.push_back(os.str());
      break;
    }
  }
  return rep;
}

}  // namespace kfl::stability
