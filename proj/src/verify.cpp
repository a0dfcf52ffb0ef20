#include "kfl/verify.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>

#include <Eigen/LU>

#include "kfl/bench.hpp"
#include "kfl/filter.hpp"
#include "kfl/geometry.hpp"
#include "kfl/koopman.hpp"
#include "kfl/model.hpp"
#include "kfl/observer.hpp"
#include "kfl/parallel.hpp"
#include "kfl/rng.hpp"
#include "kfl/stability.hpp"

namespace kfl::verify {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Matrix randn(NoiseStream& ns, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = ns.normal();
  }
  return m;
}

/// B B^T / d + floor I
Matrix rand_spd(NoiseStream& ns, Index d, double floor) {
  const Matrix B = randn(ns, d, d);
  return B * B.transpose() / static_cast<double>(d) + floor * Matrix::Identity(d, d);
}

/// Orthogonal * diag(sv in [lo, hi]) * orthogonal.
Matrix rand_well_conditioned(NoiseStream& ns, Index d, double lo, double hi) {
  const Matrix Q1 = randn(ns, d, d).householderQr().householderQ();
  const Matrix Q2 = randn(ns, d, d).householderQr().householderQ();
  Vector sv(d);
  for (Index i = 0; i < d; ++i) sv(i) = lo + (hi - lo) * ns.uniform();
  return Q1 * sv.asDiagonal() * Q2;
}

Index rand_index(NoiseStream& ns, Index lo, Index hi) {
  return lo + static_cast<Index>(ns.bits() % static_cast<std::uint64_t>(hi - lo + 1));
}

/// Dense Kalman gain P H^T (H P H^T + R)^{-1} computed from scratch.
Matrix dense_gain(const Matrix& P, const Matrix& H, const Matrix& R) {
  const Matrix S = H * P * H.transpose() + R;
  return S.ldlt().solve(H * P).transpose();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

CriterionResult finish(CriterionResult r, Clock::time_point t0) {
  r.seconds = seconds_since(t0);
  if (r.budget_seconds > 0 && r.seconds > r.budget_seconds) {
    r.passed = false;
    r.detail += "; runtime " + fmt(r.seconds) + " s over budget " + fmt(r.budget_seconds) + " s";
  }
  return r;
}

model::StateSpaceModel regression_model(Index d, double r, double q) {
  model::StateSpaceModel::Spec s;
  s.state_dim = d;
  s.obs_dim = 1;
  s.input_dim = d;
  s.identity_transition = true;
  s.transition = [](const Vector& th, const Vector&) { return th; };
  s.observation = [](const Vector& th, const Vector& x) {
    Vector o(1);
    o(0) = x.dot(th);
    return o;
  };
  s.observation_jacobian = [](const Vector&, const Vector& x) { return Matrix(x.transpose()); };
  s.Q = cov::ScaledIdentity{d, q};
  s.R = Matrix::Constant(1, 1, r);
  return model::StateSpaceModel(std::move(s));
}

/// Log-linear fit of ||e_t|| returning exp(slope).
double fitted_rate(const std::vector<double>& norms) {
  std::vector<double> t, y;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (!(norms[i] > 1e-250)) break;
    t.push_back(static_cast<double>(i));
    y.push_back(std::log(norms[i]));
  }
  if (t.size() < 2) return 0.0;
  return std::exp(linalg::fit_line(t, y).slope);
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"filter",   "geometry",   "stability", "koopman",
                                              "observer", "covariance", "continual"};
  return names;
}

std::string format(const CriterionResult& r) {
  std::ostringstream os;
  os << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << std::fixed << std::setprecision(2)
     << r.seconds << " s): " << r.detail;
  return os.str();
}

CriterionResult contraction_identity(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"contraction-identity", false, "", 0.0, 10.0};
  const int n = 1000;
  std::vector<double> residual(n);
  parallel_for(n, opts.jobs, [&](std::size_t i) {
    NoiseStream ns(opts.seed, i, 100);
    const Index d = rand_index(ns, 1, 64);
    const Index m = rand_index(ns, 1, 64);
    const Matrix P = rand_spd(ns, d, 0.1);
    const Matrix H = randn(ns, m, d) / std::sqrt(static_cast<double>(d));
    const Matrix R = rand_spd(ns, m, 0.1);
    const Matrix K = cov::gain(cov::Dense{P}, H, R).K;
    const Matrix lhs = Matrix::Identity(d, d) - K * H;
    const Matrix M = Matrix::Identity(d, d) + P * H.transpose() * R.ldlt().solve(H);
    const Matrix rhs = M.fullPivLu().inverse();
    residual[i] = (lhs - rhs).norm();
  });
  const double worst = *std::max_element(residual.begin(), residual.end());
  r.passed = worst <= 1e-8;
  r.detail = "max ||(I-KH) - (I+PH'R^-1H)^-1||_F over 1000 instances = " + fmt(worst);
  return finish(r, t0);
}

CriterionResult golden_ratio_fixed_point(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"golden-ratio-fixed-point", false, "", 0.0, 10.0};
  const double phi = 0.5 * (1.0 + std::sqrt(5.0));
  const Matrix one = Matrix::Ones(1, 1);
  const auto sys = model::make_linear_gaussian(one, one, one, one);
  const auto traj = model::simulate(sys, 500, Vector::Zero(1), opts.seed);
  filter::StepOptions so;
  so.cov.faults = opts.faults;

  filter::GaussianBelief b = filter::isotropic_belief(Vector::Zero(1), 1.0);
  double prior40 = 0, post40 = 0, prior_long = 0;
  for (int t = 0; t < 500; ++t) {
    auto st = filter::filter_step(b, sys, Vector(), traj.observations[t], so);
    b = st.belief;
    const double prior = cov::densify(st.predicted.cov)(0, 0);
    if (t == 39) {
      prior40 = prior;
      post40 = cov::densify(b.cov)(0, 0);
    }
    prior_long = prior;
  }
  const auto dare = filter::dare_solve(one, one, one, one);
  const double e40 = std::abs(prior40 - phi);
  const double epost = std::abs(post40 - (phi - 1.0));
  const double edare = std::abs(dare.P(0, 0) - prior_long);

  // A 3-state system: DARE against the long-run filter.
  NoiseStream ns(opts.seed, 0, 200);
  Matrix A = randn(ns, 3, 3);
  A *= 0.9 / linalg::spectral_norm(A);
  const Matrix C = randn(ns, 2, 3);
  const Matrix Q = rand_spd(ns, 3, 0.05);
  const Matrix R = rand_spd(ns, 2, 0.1);
  const auto sys3 = model::make_linear_gaussian(A, C, Q, R);
  const auto traj3 = model::simulate(sys3, 400, Vector::Zero(3), opts.seed);
  filter::GaussianBelief b3 = filter::isotropic_belief(Vector::Zero(3), 1.0);
  Matrix prior3;
  for (int t = 0; t < 400; ++t) {
    auto st = filter::filter_step(b3, sys3, Vector(), traj3.observations[t], so);
    b3 = st.belief;
    prior3 = cov::densify(st.predicted.cov);
  }
  const double edare3 = (filter::dare_solve(A, C, Q, R).P - prior3).norm();

  r.passed = e40 <= 1e-9 && epost <= 1e-9 && edare <= 1e-6 && edare3 <= 1e-6;
  r.detail = "|P_40 - phi| = " + fmt(e40) + ", |posterior_40 - (phi-1)| = " + fmt(epost) +
             ", |DARE - long run| = " + fmt(edare) + " (scalar), " + fmt(edare3) + " (3-state)";
  return finish(r, t0);
}

CriterionResult covariance_symmetry(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"covariance-exact-symmetry", false, "", 0.0, 5.0};
  NoiseStream ns(opts.seed, 0, 300);
  Matrix A = randn(ns, 6, 6);
  A *= 0.95 / linalg::spectral_norm(A);
  const Matrix C = randn(ns, 3, 6);
  const auto sys = model::make_linear_gaussian(A, C, rand_spd(ns, 6, 0.01), rand_spd(ns, 3, 0.1));
  const auto traj = model::simulate(sys, 50, Vector::Zero(6), opts.seed);
  filter::StepOptions so;
  so.cov.faults = opts.faults;
  filter::GaussianBelief b = filter::isotropic_belief(Vector::Zero(6), 1.0);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    b = filter::filter_step(b, sys, Vector(), traj.observations[t], so).belief;
    const Matrix P = cov::densify(b.cov);
    worst = std::max(worst, (P - P.transpose()).cwiseAbs().maxCoeff());
  }
  r.passed = worst == 0.0;
  r.detail = "max |P - P^T| over 50 posterior updates of a 6-state system = " + fmt(worst);
  return finish(r, t0);
}

CriterionResult natural_gradient_regimes(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"natural-gradient-regimes", false, "", 0.0, 5.0};

  // (a) gap to the natural-gradient map shrinks linearly with the noise scale.
  double worst_r2 = 1.0, worst_slope_dev = 0.0;
  for (int inst = 0; inst < 5; ++inst) {
    NoiseStream ns(opts.seed, inst, 400);
    const Index d = 4;
    const Matrix P = rand_spd(ns, d, 0.5);
    const Matrix H = rand_well_conditioned(ns, d, 0.5, 2.0);
    const Matrix R0 = rand_spd(ns, d, 0.2);
    std::vector<double> lx, ly;
    for (int k = 0; k <= 14; ++k) {
      const double scale = std::pow(10.0, -8.0 + 0.5 * k);
      const Matrix R = scale * R0;
      const Matrix K = cov::gain(cov::Dense{P}, H, R).K;
      const Matrix Rinv = R.inverse();
      const Matrix F = H.transpose() * Rinv * H;
      const Matrix ng = F.fullPivLu().solve(H.transpose() * Rinv);
      const double gap = (K - ng).norm() / K.norm();
      lx.push_back(std::log10(scale));
      ly.push_back(std::log10(gap));
      const auto lib = geometry::equivalence_gap(cov::Dense{P}, H, R);
      if (!lib.gap_ng || std::abs(*lib.gap_ng - gap) > 1e-6 * gap + 1e-14) {
        r.detail = "library gap_ng disagrees with the direct computation";
        return finish(r, t0);
      }
    }
    const auto fit = linalg::fit_line(lx, ly);
    worst_r2 = std::min(worst_r2, fit.r_squared);
    worst_slope_dev = std::max(worst_slope_dev, std::abs(fit.slope - 1.0));
  }

  // (b) damped identity at P = F^{-1} for square invertible H.
  double worst_damped = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    NoiseStream ns(opts.seed, inst, 401);
    const Index d = rand_index(ns, 1, 8);
    const Matrix H = rand_well_conditioned(ns, d, 0.5, 2.0);
    const Matrix R = rand_spd(ns, d, 0.2);
    const Matrix Rinv = R.inverse();
    const Matrix Finv = (H.transpose() * Rinv * H).inverse();
    const Matrix K = cov::gain(cov::Dense{linalg::symmetrize(Finv)}, H, R).K;
    const Matrix half = 0.5 * Finv * H.transpose() * Rinv;
    worst_damped = std::max(worst_damped, (K - half).norm() / half.norm());
    const auto lib = geometry::equivalence_gap(cov::Dense{linalg::symmetrize(Finv)}, H, R);
    if (!lib.gap_damped || *lib.gap_damped > 1e-10 || !lib.damped_identity_applies) {
      r.detail = "library gap_damped missing or above 1e-10";
      return finish(r, t0);
    }
  }
  r.passed = worst_r2 >= 0.99 && worst_slope_dev <= 0.1 && worst_damped <= 1e-10;
  r.detail = "log-log fit over 7 decades: min R^2 = " + fmt(worst_r2) + ", max |slope-1| = " +
             fmt(worst_slope_dev) + "; max damped gap = " + fmt(worst_damped);
  return finish(r, t0);
}

CriterionResult structured_covariance_oracles(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"structured-covariance-oracles", false, "", 0.0, 120.0};
  double err_lr = 0, err_block = 0, err_kron = 0, err_post = 0;
  for (int inst = 0; inst < 100; ++inst) {
    NoiseStream ns(opts.seed, inst, 500);
    const Index m = rand_index(ns, 1, 5);
    {  // low rank at full rank
      const Index d = rand_index(ns, 2, 30);
      const Matrix U = 0.5 * randn(ns, d, d);
      const double delta = 0.1 + 0.9 * ns.uniform();
      const Matrix P = U * U.transpose() + delta * Matrix::Identity(d, d);
      const Matrix H = randn(ns, m, d);
      const Matrix R = rand_spd(ns, m, 0.1);
      const cov::CovarianceRepr rep = cov::LowRankPlusDiagonal{U, delta};
      const Matrix Kd = dense_gain(P, H, R);
      const Matrix K = cov::gain(rep, H, R).K;
      err_lr = std::max(err_lr, (K - Kd).norm() / Kd.norm());
      const Matrix IKH = Matrix::Identity(d, d) - Kd * H;
      const Matrix post = IKH * P * IKH.transpose() + Kd * R * Kd.transpose();
      const Matrix got = cov::densify(cov::measurement_update(rep, K, H, R));
      err_post = std::max(err_post, (got - post).norm() / post.norm());
    }
    {  // block diagonal
      const Index nb = rand_index(ns, 1, 4);
      std::vector<Matrix> blocks;
      Index d = 0;
      for (Index b = 0; b < nb; ++b) {
        blocks.push_back(rand_spd(ns, rand_index(ns, 1, 6), 0.1));
        d += blocks.back().rows();
      }
      Matrix P = Matrix::Zero(d, d);
      Index off = 0;
      for (const auto& B : blocks) {
        P.block(off, off, B.rows(), B.rows()) = B;
        off += B.rows();
      }
      const Matrix H = randn(ns, m, d);
      const Matrix R = rand_spd(ns, m, 0.1);
      const Matrix Kd = dense_gain(P, H, R);
      const Matrix K = cov::gain(cov::BlockDiagonal{blocks}, H, R).K;
      err_block = std::max(err_block, (K - Kd).norm() / Kd.norm());
    }
    {  // Kronecker
      const Index a = rand_index(ns, 1, 4), c = rand_index(ns, 1, 4);
      const Matrix A = rand_spd(ns, a, 0.2), B = rand_spd(ns, c, 0.2);
      Matrix P(a * c, a * c);
      for (Index i = 0; i < a; ++i) {
        for (Index j = 0; j < a; ++j) P.block(i * c, j * c, c, c) = A(i, j) * B;
      }
      const Matrix H = randn(ns, m, a * c);
      const Matrix R = rand_spd(ns, m, 0.1);
      const Matrix Kd = dense_gain(P, H, R);
      const Matrix K = cov::gain(cov::KroneckerPair{A, B}, H, R).K;
      err_kron = std::max(err_kron, (K - Kd).norm() / Kd.norm());
    }
  }

  // Per-step cost of the low-rank filter step at fixed rank 16 and m = 4.
  std::vector<double> dims{1e3, 1e4, 1e5}, times;
  cov::Options o;
  o.audit = false;
  for (double dd : dims) {
    const Index d = static_cast<Index>(dd);
    NoiseStream ns(opts.seed, static_cast<std::uint64_t>(d), 501);
    const cov::CovarianceRepr P0 = cov::LowRankPlusDiagonal{0.1 * randn(ns, d, 16), 1.0};
    const Matrix H = randn(ns, 4, d) / std::sqrt(dd);
    const Matrix R = Matrix::Identity(4, 4);
    const int reps = d <= 1000 ? 40 : (d <= 10000 ? 10 : 4);
    double best = INFINITY;
    for (int k = 0; k < reps; ++k) {
      const auto ts = Clock::now();
      const auto P1 = cov::predict_cov(P0, std::nullopt, cov::ScaledIdentity{d, 1e-3}, o);
      const auto g = cov::gain(P1, H, R, o);
      const auto P2 = cov::measurement_update(P1, g.K, H, R, o);
      best = std::min(best, seconds_since(ts));
      if (cov::dim(P2) != d) throw Error("low-rank step changed dimension");
    }
    times.push_back(best);
  }
  const auto fit = linalg::fit_line(dims, times);
  const double tol = 1e-8;
  r.passed = err_lr <= tol && err_block <= tol && err_kron <= tol && err_post <= tol &&
             fit.r_squared >= 0.95 && fit.slope > 0;
  r.detail = "max rel gain error lowrank " + fmt(err_lr) + ", block " + fmt(err_block) +
             ", kronecker " + fmt(err_kron) + ", lowrank posterior " + fmt(err_post) +
             "; step seconds at d=1e3/1e4/1e5: " + fmt(times[0]) + "/" + fmt(times[1]) + "/" +
             fmt(times[2]) + ", linear fit R^2 = " + fmt(fit.r_squared);
  return finish(r, t0);
}

CriterionResult rls_bayes_consistency(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"rls-bayes-consistency", false, "", 0.0, 10.0};
  double worst_mean = 0.0, worst_cov = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    NoiseStream ns(opts.seed, seed, 600);
    const Index d = 1 + seed % 8;
    const Index T = 50;
    const double rn = 0.25, s0 = 1.0;
    const Vector theta = ns.normal(d);
    const auto sys = regression_model(d, rn, 0.0);
    filter::StepOptions so;
    so.cov.faults = opts.faults;
    filter::GaussianBelief b = filter::isotropic_belief(Vector::Zero(d), s0);
    Matrix X(T, d);
    Vector y(T);
    for (Index t = 0; t < T; ++t) {
      X.row(t) = ns.normal(d).transpose();
      y(t) = X.row(t).dot(theta) + std::sqrt(rn) * ns.normal();
      b = filter::filter_step(b, sys, X.row(t).transpose(), y.segment(t, 1), so).belief;
      const Matrix Xn = X.topRows(t + 1);
      Matrix G = Xn.transpose() * Xn;
      G.diagonal().array() += rn / s0;
      const Vector ridge = G.ldlt().solve(Xn.transpose() * y.head(t + 1));
      const Matrix Pr = rn * G.inverse();
      worst_mean = std::max(worst_mean, (b.mean - ridge).norm() / std::max(1.0, ridge.norm()));
      worst_cov = std::max(worst_cov, (cov::densify(b.cov) - Pr).norm());
    }
  }
  r.passed = worst_mean <= 1e-6 && worst_cov <= 1e-6;
  r.detail = "max prefix deviation from ridge: mean " + fmt(worst_mean) + ", covariance " +
             fmt(worst_cov) + " (20 seeds, d <= 8, T = 50)";
  return finish(r, t0);
}

CriterionResult convex_convergence(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"convex-convergence-audit", false, "", 0.0, 30.0};
  const std::vector<Index> dims{2, 3, 4, 6, 8};
  bool ok = true;
  double worst_ratio_slack = -INFINITY;
  int violations = 0;
  for (std::size_t inst = 0; inst < dims.size(); ++inst) {
    const Index d = dims[inst];
    NoiseStream ns(opts.seed, inst, 700);
    Vector v(d);
    for (Index i = 0; i < d; ++i) v(i) = std::pow(4.0, static_cast<double>(i) / std::max<Index>(1, d - 1));
    // Preconditioners: Kalman posterior covariances of a regression whose
    // population Hessian is diag(v).
    const auto sys = regression_model(d, 1.0, 0.01);
    filter::GaussianBelief b = filter::isotropic_belief(Vector::Zero(d), 1.0);
    std::vector<Matrix> Bs;
    const Vector sd = v.cwiseSqrt();
    for (int t = 0; t < 100; ++t) {
      const Vector x = ns.normal(d).cwiseProduct(sd);
      Vector y(1);
      y(0) = ns.normal();
      b = filter::filter_step(b, sys, x, y).belief;
      Bs.push_back(cov::densify(b.cov));
    }
    stability::QuadraticObjective obj{Matrix(v.asDiagonal()), ns.normal(d)};
    double m = INFINITY, M = 0;
    for (const auto& B : Bs) {
      const Vector ev = linalg::sym_eigenvalues(B);
      m = std::min(m, ev(0));
      M = std::max(M, ev(d - 1));
    }
    const double eta = m * obj.mu() / (M * M * obj.L() * obj.L());
    const Vector theta0 = obj.minimizer + Vector::Ones(d) * 2.0;
    const auto rep = stability::convex_convergence_audit(obj, Bs, theta0, eta, 0.5, 100,
                                                         opts.seed + inst, opts.jobs);
    ok = ok && rep.passed();
    violations += rep.first_violation ? 1 : 0;
    worst_ratio_slack = std::max(worst_ratio_slack,
                                 rep.noiseless_max_ratio - (1.0 - eta * rep.bounds.mu * rep.bounds.m));
  }
  r.passed = ok;
  r.detail = "5 quadratics x 100 replicates: instances with a 3-sigma violation = " +
             std::to_string(violations) + ", max noiseless ratio minus bound = " +
             fmt(worst_ratio_slack);
  return finish(r, t0);
}

CriterionResult persistent_excitation(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"persistent-excitation", false, "", 0.0, 5.0};
  const Index d = 2;
  const int T = 60, N = 2;
  const Matrix R = Matrix::Identity(1, 1);

  auto run = [&](bool alternating, std::vector<Matrix>& Hs, std::vector<Matrix>& As) {
    model::StateSpaceModel::Spec s;
    s.state_dim = d;
    s.obs_dim = 1;
    s.input_dim = 1;
    s.identity_transition = true;
    s.transition = [](const Vector& x, const Vector&) { return x; };
    s.observation = [](const Vector& x, const Vector& u) {
      Vector o(1);
      o(0) = x(static_cast<Index>(u(0)));
      return o;
    };
    s.observation_jacobian = [](const Vector&, const Vector& u) {
      Matrix H = Matrix::Zero(1, 2);
      H(0, static_cast<Index>(u(0))) = 1.0;
      return H;
    };
    s.Q = cov::ScaledIdentity{d, 0.05};
    s.R = R;
    const model::StateSpaceModel sys(std::move(s));
    filter::GaussianBelief b = filter::isotropic_belief(Vector::Zero(d), 1.0);
    NoiseStream ns(opts.seed, 0, 800);
    for (int t = 0; t < T; ++t) {
      Vector u(1);
      u(0) = alternating ? static_cast<double>(t % 2) : 0.0;
      Vector y(1);
      y(0) = ns.normal();
      auto st = filter::filter_step(b, sys, u, y);
      b = st.belief;
      Hs.push_back(st.innovation.H);
      As.push_back(*st.gain.contraction);
    }
  };

  std::vector<Matrix> Ha, Aa, Hc, Ac;
  run(true, Ha, Aa);
  run(false, Hc, Ac);

  const auto wa = stability::excitation_window(Ha, R, N);
  double min_alpha = INFINITY, max_norm = 0;
  for (const auto& w : wa) min_alpha = std::min(min_alpha, w.alpha_hat);
  for (std::size_t s = 0; s + N <= Aa.size(); ++s) {
    max_norm = std::max(max_norm, stability::window_product_norm(Aa, s, N));
  }

  const auto wc = stability::excitation_window(Hc, R, N);
  double max_alpha_c = 0;
  for (const auto& w : wc) max_alpha_c = std::max(max_alpha_c, w.alpha_hat);
  Matrix prod = Matrix::Identity(d, d);
  for (const auto& A : Ac) prod = A * prod;
  const Vector e2 = Vector::Unit(d, 1);
  const double unexcited = (prod * e2).norm();
  const double rho_c = linalg::spectral_radius(prod);

  r.passed = min_alpha > 0 && max_norm < 1.0 && max_alpha_c <= 1e-14 &&
             std::abs(unexcited - 1.0) <= 1e-12 && std::abs(rho_c - 1.0) <= 1e-12;
  r.detail = "alternating: min alpha_hat = " + fmt(min_alpha) + ", max window product norm = " +
             fmt(max_norm) + "; constant: max alpha_hat = " + fmt(max_alpha_c) +
             ", ||prod e2|| = " + fmt(unexcited) + ", rho = " + fmt(rho_c);
  return finish(r, t0);
}

CriterionResult lowrank_robustness(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"lowrank-robustness", false, "", 0.0, 30.0};
  const Index d = 12, m = 16, rank = 4;
  const double q = 1.0;
  int instances = 0, attempts = 0, contracted = 0;
  double worst_rate = 0.0;
  while (instances < 50 && attempts < 500) {
    NoiseStream ns(opts.seed, attempts++, 900);
    Vector scales(d);
    for (Index i = 0; i < d; ++i) scales(i) = std::pow(0.9, static_cast<double>(i));
    const Matrix H = randn(ns, m, d) * scales.asDiagonal();
    const Matrix R = Matrix::Identity(m, m);
    const Matrix I = Matrix::Identity(d, d);
    const Matrix P_exact = filter::dare_solve(I, H, q * I, R).P;
    const cov::LowRankPlusDiagonal approx = cov::truncate_rank(P_exact, rank, 1e-6);
    const auto margin = stability::lowrank_perturbation_margin(P_exact, approx, H, R);
    if (!(margin.margin > 0)) continue;
    ++instances;

    // Twin run of the low-rank filter from two different means on one stream.
    model::StateSpaceModel::Spec s;
    s.state_dim = d;
    s.obs_dim = m;
    s.identity_transition = true;
    s.transition = [](const Vector& x, const Vector&) { return x; };
    s.observation = [H](const Vector& x, const Vector&) { return Vector(H * x); };
    s.observation_jacobian = [H](const Vector&, const Vector&) { return H; };
    s.Q = cov::ScaledIdentity{d, q};
    s.R = R;
    const model::StateSpaceModel sys(std::move(s));
    const cov::LowRankPlusDiagonal& start = approx;
    filter::GaussianBelief a = filter::make_belief(Vector::Zero(d), start);
    filter::GaussianBelief b = filter::make_belief(ns.normal(d), start);
    std::vector<double> norms{(a.mean - b.mean).norm()};
    const Vector truth = ns.normal(d);
    for (int t = 0; t < 40; ++t) {
      const Vector y = H * truth + ns.normal(m);
      a = filter::filter_step(a, sys, Vector(), y).belief;
      b = filter::filter_step(b, sys, Vector(), y).belief;
      norms.push_back((a.mean - b.mean).norm());
    }
    const double rate = fitted_rate(norms);
    worst_rate = std::max(worst_rate, rate);
    contracted += rate < 1.0 ? 1 : 0;
  }
  r.passed = instances == 50 && contracted == instances;
  r.detail = std::to_string(instances) + " positive-margin instances out of " +
             std::to_string(attempts) + " drawn; contracting twin runs " +
             std::to_string(contracted) + ", max fitted rate " + fmt(worst_rate);
  return finish(r, t0);
}

CriterionResult edmd_exactness(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"edmd-exactness", false, "", 0.0, 60.0};
  auto f = [](const Vector& x) {
    Vector o(2);
    o << 0.9 * x(0), 0.5 * x(1) + x(0) * x(0);
    return o;
  };
  const auto dict = std::make_shared<koopman::Dictionary>(
      2,
      std::vector<koopman::Observable>{{"x1", [](const Vector& x) { return x(0); }},
                                       {"x2", [](const Vector& x) { return x(1); }},
                                       {"x1^2", [](const Vector& x) { return x(0) * x(0); }}},
      std::vector<Index>{0, 1});
  std::vector<std::pair<Vector, Vector>> pairs;
  NoiseStream ns(opts.seed, 0, 1000);
  for (int i = 0; i < 200; ++i) {
    Vector x(2);
    x << 2.0 * ns.uniform() - 1.0, 2.0 * ns.uniform() - 1.0;
    pairs.emplace_back(x, f(x));
  }
  Matrix K_true(3, 3);
  K_true << 0.9, 0, 0, 0, 0.5, 1.0, 0, 0, 0.81;
  const auto fit = koopman::edmd_fit(pairs, *dict);
  const double kerr = (fit.K - K_true).cwiseAbs().maxCoeff();

  // Paired comparison: lifted filter vs EKF on pooled trajectory ensembles.
  const double s0 = 0.5, q2 = 0.01, rn = 2.0;
  const int T = 50, per_seed = 20, seeds = 50;
  model::StateSpaceModel::Spec sp;
  sp.state_dim = 2;
  sp.obs_dim = 1;
  sp.transition = [f](const Vector& x, const Vector&) { return f(x); };
  sp.transition_jacobian = [](const Vector& x, const Vector&) {
    Matrix J(2, 2);
    J << 0.9, 0, 2.0 * x(0), 0.5;
    return J;
  };
  sp.observation = [](const Vector& x, const Vector&) { return Vector(x.head(1)); };
  sp.observation_jacobian = [](const Vector&, const Vector&) {
    Matrix H(1, 2);
    H << 1, 0;
    return H;
  };
  Matrix Q = Matrix::Zero(2, 2);
  Q(1, 1) = q2;
  sp.Q = Q;
  sp.R = Matrix::Constant(1, 1, rn);
  const model::StateSpaceModel sys(sp);
  Matrix C(1, 3);
  C << 1, 0, 0;
  Matrix QL = Matrix::Zero(3, 3);
  QL(1, 1) = q2;
  const auto km = koopman::make_koopman_model(K_true, C, QL, sp.R, dict);

  // Moments of phi(x0) for x0 ~ N(0, s0^2 I).
  Vector z0 = Vector::Zero(3);
  z0(2) = s0 * s0;
  Matrix Pz0 = Matrix::Zero(3, 3);
  Pz0(0, 0) = Pz0(1, 1) = s0 * s0;
  Pz0(2, 2) = 2.0 * std::pow(s0, 4);

  std::vector<int> win(seeds, 0);
  std::vector<double> ekf_rmse(seeds), lift_rmse(seeds);
  std::vector<std::uint64_t> lin_calls(seeds, 0);
  parallel_for(seeds, opts.jobs, [&](std::size_t seed) {
    double se = 0, sl = 0;
    for (int k = 0; k < per_seed; ++k) {
      const std::uint64_t ts = derive_seed(opts.seed + seed, static_cast<std::uint64_t>(k));
      NoiseStream init(ts, 0, 7);
      const Vector x0 = s0 * init.normal(2);
      const auto traj = model::simulate(sys, T + 1, x0, ts);
      filter::GaussianBelief be = filter::isotropic_belief(Vector::Zero(2), s0 * s0);
      filter::GaussianBelief bl = filter::make_belief(z0, cov::Dense{Pz0});
      for (int t = 1; t <= T; ++t) {
        be = filter::filter_step(be, sys, Vector(), traj.observations[t]).belief;
        bl = koopman::lifted_filter_step(bl, km, traj.observations[t]).belief;
        se += (be.mean - traj.states[t]).squaredNorm();
        sl += (bl.mean.head(2) - traj.states[t]).squaredNorm();
      }
    }
    ekf_rmse[seed] = std::sqrt(se / (T * per_seed));
    lift_rmse[seed] = std::sqrt(sl / (T * per_seed));
    win[seed] = lift_rmse[seed] <= ekf_rmse[seed] ? 1 : 0;
  });
  int wins = 0;
  for (int w : win) wins += w;

  // Structural check: a lifted-only run performs no linearization.
  const auto before = model::linearization_calls();
  filter::GaussianBelief bl = filter::make_belief(z0, cov::Dense{Pz0});
  Vector y(1);
  for (int t = 0; t < 100; ++t) {
    y(0) = 0.1 * t;
    bl = koopman::lifted_filter_step(bl, km, y).belief;
  }
  const auto calls = model::linearization_calls() - before;

  r.passed = kerr <= 1e-8 && calls == 0 && wins >= 30;
  r.detail = "max |K - K_analytic| = " + fmt(kerr) + ", EDMD residual " + fmt(fit.residual) +
             "; linearization calls in lifted path = " + std::to_string(calls) +
             "; lifted RMSE <= EKF RMSE on " + std::to_string(wins) + "/50 seeds";
  return finish(r, t0);
}

CriterionResult observer_correction(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"observer-correction", false, "", 0.0, 120.0};

  // Emission Jacobian against finite differences.
  const auto dec = observer::make_random_decoder(4, 8, opts.seed, 0.9, 1.0, 2.0, 1e-3);
  double jac_err = 0;
  for (int k = 0; k < 20; ++k) {
    NoiseStream ns(opts.seed, k, 1100);
    const Vector h = ns.normal(4);
    const Matrix H = dec.emission_jacobian(h);
    const Matrix Hfd =
        model::jacobian_fd([&](const Vector& z) { return dec.probabilities(z); }, h);
    jac_err = std::max(jac_err, (H - Hfd).cwiseAbs().maxCoeff());
  }

  // Parameters untouched by any number of corrections.
  const observer::ToyDecoder snapshot = dec;
  {
    observer::ObserverState st = observer::make_observer_state(Vector::Zero(4), 0.1);
    NoiseStream ns(opts.seed, 0, 1101);
    for (int t = 0; t < 200; ++t) {
      const long tok = static_cast<long>(ns.bits() % 8);
      auto dr = observer::decode_step(st, dec, tok);
      st = observer::innovation_correct(dr.predicted, dec, static_cast<Index>(ns.bits() % 8)).state;
    }
  }
  const bool untouched = snapshot.A == dec.A && snapshot.W == dec.W &&
                         snapshot.embedding == dec.embedding && snapshot.b == dec.b &&
                         snapshot.Q == dec.Q;

  // Small-noise limit: the correction aligns with the activation natural gradient.
  double min_cos = 1.0;
  for (int k = 0; k < 20; ++k) {
    NoiseStream ns(opts.seed, k, 1102);
    const auto d3 = observer::make_random_decoder(3, 8, opts.seed + k, 0.9, 1.0, 2.0, 1e-3);
    observer::ObserverState st = observer::make_observer_state(0.5 * ns.normal(3), 1.0);
    const Index tok = static_cast<Index>(ns.bits() % 8);
    const Vector s = d3.probabilities(st.belief.mean);
    const Matrix J = model::softmax_jacobian(s);
    const Matrix R = 1e-5 * (J + 1e-3 * Matrix::Identity(8, 8));
    const auto cr = observer::innovation_correct(st, d3, tok, R);
    const Matrix Fh = d3.W.transpose() * J * d3.W;
    const double eps = Fh.fullPivLu().rank() < 3 ? 1e-8 * Fh.trace() / 3.0 : 0.0;
    const Vector ng = (Fh + eps * Matrix::Identity(3, 3)).ldlt().solve(d3.W.transpose() * cr.innovation);
    min_cos = std::min(min_cos, cr.correction.dot(ng) / (cr.correction.norm() * ng.norm()));
  }

  // Token-dropout robustness on teacher streams.
  const bench::TeacherStream ts;
  const auto teacher = observer::make_random_decoder(ts.hidden_dim, ts.vocab, ts.decoder_seed,
                                                     ts.recurrent_scale, ts.embedding_scale,
                                                     ts.emission_scale, ts.q);
  observer::ShiftConfig cfg;
  cfg.T = ts.T;
  cfg.dropout = 0.1;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < 50; ++i) seeds.push_back(opts.seed + 1000 + i);
  const auto rep = observer::shift_robustness_eval(teacher, seeds, cfg, opts.jobs);

  r.passed = jac_err <= 1e-6 && untouched && min_cos >= 0.99 && rep.perturbed.frac_improved >= 0.8;
  r.detail = "max |H - H_fd| = " + fmt(jac_err) + ", parameters " +
             (untouched ? "bit-identical" : "CHANGED") + ", min cosine = " + fmt(min_cos) +
             ", corrected NLL lower on " + fmt(100.0 * rep.perturbed.frac_improved) +
             "% of 50 dropout seeds (mean diff " + fmt(rep.perturbed.mean_diff) + " nats/token)";
  return finish(r, t0);
}

CriterionResult continual_forgetting(const VerifyOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r{"continual-forgetting", false, "", 0.0, 180.0};
  bench::PermutedFeatures task;
  task.d = 8;
  task.tasks = 5;
  task.T_per_task = 100;
  task.noise = 0.1;
  bench::FilterLearner filt;
  bench::BaselineLearner sgd;
  sgd.optimizer = bench::Optimizer::sgd;
  sgd.lr = 0.01;
  std::vector<int> win(20, 0);
  std::vector<double> ff(20), fs(20);
  parallel_for(20, opts.jobs, [&](std::size_t i) {
    bench::TrainOptions o;
    o.seed = opts.seed + i;
    ff[i] = bench::continual_eval(task, filt, o).forgetting;
    fs[i] = bench::continual_eval(task, sgd, o).forgetting;
    win[i] = ff[i] < fs[i] ? 1 : 0;
  });
  int wins = 0;
  double mf = 0, ms = 0;
  for (int i = 0; i < 20; ++i) {
    wins += win[i];
    mf += ff[i] / 20;
    ms += fs[i] / 20;
  }
  r.passed = wins >= 14;
  r.detail = "filtering forgets less than SGD on " + std::to_string(wins) +
             "/20 seeds (mean forgetting " + fmt(mf) + " vs " + fmt(ms) + ")";
  return finish(r, t0);
}

std::vector<CriterionResult> run_suite(const std::string& suite, const VerifyOptions& opts) {
  using Fn = CriterionResult (*)(const VerifyOptions&);
  const std::vector<std::pair<std::string, std::vector<Fn>>> table{
      {"filter", {golden_ratio_fixed_point, covariance_symmetry, rls_bayes_consistency}},
      {"geometry", {natural_gradient_regimes}},
      {"stability",
       {contraction_identity, convex_convergence, persistent_excitation, lowrank_robustness}},
      {"koopman", {edmd_exactness}},
      {"observer", {observer_correction}},
      {"covariance", {structured_covariance_oracles}},
      {"continual", {continual_forgetting}},
  };
  std::vector<CriterionResult> out;
  bool found = false;
  for (const auto& [name, fns] : table) {
    if (suite != "all" && suite != name) continue;
    found = true;
    for (Fn fn : fns) {
      try {
        out.push_back(fn(opts));
      } catch (const std::exception& e) {
        out.push_back({"exception in " + name + " suite", false, e.what(), 0.0, 0.0});
      }
    }
  }
  if (!found) throw Error("unknown verification suite '" + suite + "'");
  return out;
}

}  // namespace kfl::verify
