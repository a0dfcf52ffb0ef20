#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kfl/covariance.hpp"
#include "kfl/record.hpp"

namespace kfl::stability {

struct ContractionCheck {
  double rho = 0.0;                // spectral radius of I - K H
  double identity_residual = 0.0;  // ||(I - K H) - (I + P H^T R^{-1} H)^{-1}||_F
  Matrix contraction;              // I - K H
};

/// Computes I - K H through the gain and (I + P H^T R^{-1} H)^{-1} directly,
/// and compares them.
ContractionCheck contraction_check(const cov::CovarianceRepr& P_pred, const Matrix& H,
                                   const Matrix& R, const cov::Options& opts = {});

struct ExcitationWindow {
  long start = 0;
  double alpha_hat = 0.0;  // min eigenvalue of sum_k H_k^T R^{-1} H_k
  double beta_hat = 0.0;   // max eigenvalue
};

/// Sliding windows of length N over the Jacobian sequence.
std::vector<ExcitationWindow> excitation_window(const std::vector<Matrix>& H_seq, const Matrix& R,
                                                int N);

/// ||A_{s+N-1} ... A_{s+1} A_s||_2 for a sequence of contraction matrices.
double window_product_norm(const std::vector<Matrix>& contractions, std::size_t start,
                           std::size_t N);

struct ErrorTrace {
  std::vector<double> errors;    // ||e_t||
  std::vector<double> lyapunov;  // e_t^T P_t^{-1} e_t
  double rate = 1.0;             // fitted per-step contraction of ||e_t||
  double fit_r_squared = 0.0;
  std::vector<long> flagged_steps;  // V_{t+1} - V_t above the slack
};

/// Default Lyapunov slack: chi-square(m) mean plus three standard deviations.
double default_lyapunov_slack(Index obs_dim);

/// Requires step records with mean and cov snapshots.
ErrorTrace error_trace(const std::vector<StepRecord>& run, const Vector& theta_star,
                       std::optional<double> slack = std::nullopt);

struct MeanSquareCheck {
  std::vector<Matrix> E;  // E_0 .. E_T
  std::optional<double> mc_relative_error;  // max_t ||E_hat_t - E_t||_F / ||E_t||_F
};

/// E_{t+1} = (I - K_t H_t) E_t (I - K_t H_t)^T + K_t R K_t^T + Q. Q defaults to
/// zero. With mc_samples > 0 the recursion is cross-checked against simulated
/// error outer products.
MeanSquareCheck mean_square_recursion_check(const std::vector<Matrix>& K_seq,
                                            const std::vector<Matrix>& H_seq, const Matrix& R,
                                            const Matrix& E0,
                                            const std::optional<Matrix>& Q = std::nullopt,
                                            int mc_samples = 0, std::uint64_t seed = 0,
                                            unsigned jobs = 1);

/// f(theta) = 1/2 (theta - minimizer)^T hessian (theta - minimizer).
struct QuadraticObjective {
  Matrix hessian;
  Vector minimizer;

  double mu() const;  // smallest Hessian eigenvalue
  double L() const;   // largest Hessian eigenvalue
  Vector gradient(const Vector& theta) const { return hessian * (theta - minimizer); }
};

struct ConvexBounds {
  double m = 0.0;   // min eigenvalue over the preconditioners
  double M = 0.0;   // max eigenvalue over the preconditioners
  double mu = 0.0;
  double L = 0.0;
  double sigma = 0.0;  // sqrt of E||g - grad f||^2
};

struct ConvexAuditReport {
  ConvexBounds bounds;
  double eta = 0.0;
  bool step_size_ok = false;          // eta <= 2 m / (L M^2)
  std::vector<bool> step_ok;          // expected-error recursion per step
  std::optional<long> first_violation;
  std::vector<double> mean_sq_error;  // empirical E||e_t||^2, t = 0..T
  double noiseless_max_ratio = 0.0;   // max_t ||e_{t+1}||^2 / ||e_t||^2 with sigma = 0
  bool noiseless_ok = false;          // ratio <= 1 - eta mu m + 1e-10
  bool passed() const { return step_size_ok && !first_violation && noiseless_ok; }
};

/// Runs theta_{t+1} = theta_t - eta B_t g_t with g_t = grad f + noise, noise
/// isotropic with E||noise||^2 = sigma^2, over `replicates` seeded runs, and
/// checks E||e_{t+1}||^2 <= (1 - eta mu m) E||e_t||^2 + eta^2 M^2 sigma^2 at
/// every step with 3 standard errors of slack.
ConvexAuditReport convex_convergence_audit(const QuadraticObjective& objective,
                                           const std::vector<Matrix>& preconditioners,
                                           const Vector& theta0, double eta, double sigma,
                                           int replicates, std::uint64_t seed,
                                           unsigned jobs = 1);

struct PerturbationMargin {
  double delta_K_norm = 0.0;  // ||K_approx - K_exact||_2
  double delta_P_norm = 0.0;  // ||P_approx - P_exact||_2
  double lipschitz_ratio = 0.0;
  double rho_exact = 0.0;
  double margin = 0.0;  // (1 - rho_exact) - ||Delta K H||_2
};

PerturbationMargin lowrank_perturbation_margin(const Matrix& P_exact,
                                               const cov::CovarianceRepr& P_approx,
                                               const Matrix& H, const Matrix& R);

/// Per-run diagnostics assembled from step snapshots (H, K, cov_pred required).
struct StabilityReport {
  std::vector<double> contraction_spectral_radius;
  std::vector<double> identity_residual;
  std::vector<ExcitationWindow> excitation;
  std::vector<double> lyapunov;
  std::vector<std::string> notes;
};

StabilityReport audit_run(const std::vector<StepRecord>& run, const Matrix& R, int window);

}  // namespace kfl::stability
