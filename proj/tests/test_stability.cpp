#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "helpers.hpp"
#include "kfl/filter.hpp"
#include "kfl/stability.hpp"

using namespace kfl;
using namespace testutil;

namespace {

std::vector<StepRecord> run_static(const Matrix& H, double q, const Vector& theta, int T,
                                   bool noiseless) {
  const Index d = theta.size();
  const auto m = model::make_linear_gaussian(Matrix::Identity(d, d), H, q * Matrix::Identity(d, d),
                                             Matrix::Identity(H.rows(), H.rows()));
  filter::StepOptions o;
  o.snapshot = true;
  auto b = filter::isotropic_belief(Vector::Zero(d), 1.0);
  std::vector<StepRecord> out;
  NoiseStream ns(1, 0, 0);
  for (int t = 0; t < T; ++t) {
    Vector y = H * theta;
    if (!noiseless) y += ns.normal(H.rows());
    auto st = filter::filter_step(b, m, Vector(), y, o);
    b = st.belief;
    out.push_back(st.record);
  }
  return out;
}

}  // namespace

TEST_CASE("contraction check examples") {
  const auto c = stability::contraction_check(cov::Dense{mat({{1}})}, mat({{1}}), mat({{1}}));
  CHECK(c.contraction(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(c.rho == doctest::Approx(0.5));

  NoiseStream ns(2, 0, 0);
  const auto z = stability::contraction_check(cov::Dense{spd(ns, 3)}, Matrix::Zero(2, 3), Matrix::Identity(2, 2));
  CHECK(z.contraction == Matrix::Identity(3, 3));
  CHECK(z.rho == doctest::Approx(1.0));

  const auto r = stability::contraction_check(cov::Dense{spd(ns, 4)}, randn(ns, 4, 4), spd(ns, 4));
  CHECK(r.identity_residual <= 1e-8);
  CHECK(r.rho < 1.0);
}

TEST_CASE("excitation windows") {
  const Matrix e1 = mat({{1, 0}}), e2 = mat({{0, 1}});
  std::vector<Matrix> alt, constant;
  for (int t = 0; t < 10; ++t) {
    alt.push_back(t % 2 ? e2 : e1);
    constant.push_back(e1);
  }
  for (const auto& w : stability::excitation_window(alt, Matrix::Identity(1, 1), 2)) {
    CHECK(w.alpha_hat == doctest::Approx(1.0));
    CHECK(w.beta_hat == doctest::Approx(1.0));
  }
  for (int N = 1; N <= 4; ++N) {
    for (const auto& w : stability::excitation_window(constant, Matrix::Identity(1, 1), N)) {
      CHECK(w.alpha_hat == 0.0);
    }
  }

  // Rotating rank-1 rows: compare against a direct eigenvalue computation.
  const Index d = 3;
  NoiseStream ns(3, 0, 0);
  std::vector<Matrix> rot;
  for (int t = 0; t < 9; ++t) rot.push_back(randn(ns, 1, d));
  const Matrix R = mat({{0.5}});
  const auto ws = stability::excitation_window(rot, R, static_cast<int>(d));
  REQUIRE(ws.size() == rot.size() - d + 1);
  for (std::size_t s = 0; s < ws.size(); ++s) {
    Matrix G = Matrix::Zero(d, d);
    for (Index k = 0; k < d; ++k) G += rot[s + k].transpose() * rot[s + k] / 0.5;
    Eigen::SelfAdjointEigenSolver<Matrix> es(G);
    CHECK(ws[s].alpha_hat > 0);
    CHECK(ws[s].alpha_hat == doctest::Approx(es.eigenvalues()(0)).epsilon(1e-9));
    CHECK(ws[s].beta_hat == doctest::Approx(es.eigenvalues()(d - 1)).epsilon(1e-9));
  }
}

TEST_CASE("window product norm multiplies in time order") {
  const Matrix A = mat({{0, 1}, {0, 0}}), B = mat({{1, 0}, {0, 0}});
  // B then A: A * B = 0; A then B: B * A = [[0,1],[0,0]].
  CHECK(stability::window_product_norm({B, A}, 0, 2) == doctest::Approx(0.0));
  CHECK(stability::window_product_norm({A, B}, 0, 2) == doctest::Approx(1.0));
}

TEST_CASE("error trace on observed and unobserved systems") {
  const Vector theta = vec({1.0, -2.0});
  const auto run = run_static(Matrix::Identity(2, 2), 0.1, theta, 40, true);
  const auto tr = stability::error_trace(run, theta);
  CHECK(tr.rate < 1.0);
  CHECK(tr.fit_r_squared >= 0.99);

  const auto blind = run_static(Matrix::Zero(1, 2), 0.1, theta, 40, false);
  const auto tb = stability::error_trace(blind, theta);
  CHECK(tb.rate == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("golden-ratio error and Lyapunov values stay bounded") {
  const auto m = model::make_linear_gaussian(mat({{1}}), mat({{1}}), mat({{1}}), mat({{1}}));
  const auto traj = model::simulate(m, 2000, vec({0.0}), 4);
  filter::StepOptions o;
  o.snapshot = true;
  auto b = filter::isotropic_belief(vec({0.0}), 1.0);
  double max_err = 0, mean_v = 0;
  for (int t = 0; t < 2000; ++t) {
    b = filter::filter_step(b, m, Vector(), traj.observations[t], o).belief;
    const double e = b.mean(0) - traj.states[t](0);
    max_err = std::max(max_err, std::abs(e));
    mean_v += e * e / cov::densify(b.cov)(0, 0) / 2000;
  }
  CHECK(max_err < 6.0 * std::sqrt(0.5 * (std::sqrt(5.0) - 1)));
  CHECK(mean_v == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("mean-square recursion") {
  const std::vector<Matrix> K0(10, Matrix::Zero(2, 1)), H0(10, mat({{1, 0}}));
  NoiseStream ns(5, 0, 0);
  const Matrix E0 = spd(ns, 2);
  for (const auto& E : stability::mean_square_recursion_check(K0, H0, mat({{1}}), E0).E) CHECK(E == E0);

  // Steady golden-ratio gain: E converges to the prior fixed point phi.
  const double phi = 0.5 * (1 + std::sqrt(5.0));
  const double k = phi / (phi + 1);
  const std::vector<Matrix> Ks(200, mat({{k}})), Hs(200, mat({{1}}));
  const auto ms = stability::mean_square_recursion_check(Ks, Hs, mat({{1}}), mat({{1}}), mat({{1}}));
  CHECK(ms.E.back()(0, 0) == doctest::Approx(phi).epsilon(1e-12));

  std::vector<Matrix> Kr, Hr;
  for (int t = 0; t < 20; ++t) {
    Kr.push_back(0.3 * randn(ns, 2, 1));
    Hr.push_back(randn(ns, 1, 2));
  }
  const auto mc = stability::mean_square_recursion_check(Kr, Hr, mat({{1}}), E0, std::nullopt, 40000, 9);
  REQUIRE(mc.mc_relative_error);
  CHECK(*mc.mc_relative_error <= 0.05);
}

TEST_CASE("convex convergence audit examples") {
  const stability::QuadraticObjective f{mat({{1}}), vec({0})};
  const std::vector<Matrix> B(50, mat({{1}}));
  const auto exact = stability::convex_convergence_audit(f, B, vec({1}), 0.5, 0.0, 4, 1);
  CHECK(exact.noiseless_max_ratio == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(exact.passed());

  const auto noisy = stability::convex_convergence_audit(f, B, vec({1}), 0.5, 0.1, 400, 2);
  CHECK(noisy.passed());
  const double bound = 0.5 * 0.1 * 0.1;  // eta M^2 sigma^2 / (mu m)
  CHECK(noisy.mean_sq_error.back() <= bound);

  // Kalman preconditioners on a 4-D quadratic.
  const Vector v = vec({1, 2, 3, 4});
  const auto m = model::make_linear_gaussian(Matrix::Identity(4, 4), Matrix::Identity(4, 4),
                                             0.01 * Matrix::Identity(4, 4), Matrix(v.cwiseInverse().asDiagonal()));
  NoiseStream ns(6, 0, 0);
  auto b = filter::isotropic_belief(Vector::Zero(4), 1.0);
  std::vector<Matrix> P;
  for (int t = 0; t < 60; ++t) {
    b = filter::filter_step(b, m, Vector(), ns.normal(4)).belief;
    P.push_back(cov::densify(b.cov));
  }
  const stability::QuadraticObjective g{Matrix(v.asDiagonal()), ns.normal(4)};
  double lo = INFINITY, hi = 0;
  for (const auto& p : P) {
    lo = std::min(lo, linalg::min_sym_eigenvalue(p));
    hi = std::max(hi, linalg::max_sym_eigenvalue(p));
  }
  const double eta = lo * g.mu() / (hi * hi * g.L() * g.L());
  CHECK(stability::convex_convergence_audit(g, P, g.minimizer + Vector::Ones(4), eta, 0.3, 100, 3).passed());
}

TEST_CASE("low-rank perturbation margin") {
  NoiseStream ns(7, 0, 0);
  const Matrix P = spd(ns, 4), H = randn(ns, 3, 4), R = Matrix::Identity(3, 3);
  const auto same = stability::lowrank_perturbation_margin(P, cov::Dense{P}, H, R);
  CHECK(same.delta_K_norm <= 1e-14);
  CHECK(same.margin == doctest::Approx(1.0 - same.rho_exact));

  const auto lossless = stability::lowrank_perturbation_margin(P, cov::truncate_rank(P, 4, 1e-12), H, R);
  CHECK(std::abs(lossless.margin - same.margin) <= 1e-9);

  const Matrix D = Vector(vec({4, 1, 0.01})).asDiagonal();
  const auto r1 = stability::lowrank_perturbation_margin(D, cov::truncate_rank(D, 1, 0.01),
                                                         Matrix::Identity(3, 3), Matrix::Identity(3, 3));
  CHECK(std::isfinite(r1.lipschitz_ratio));
  CHECK(r1.lipschitz_ratio > 0);
}

TEST_CASE("run audit assembles per-step diagnostics") {
  const auto run = run_static(mat({{1, 0}, {0, 1}}), 0.05, vec({0.5, 0.5}), 12, false);
  const auto rep = stability::audit_run(run, Matrix::Identity(2, 2), 3);
  CHECK(rep.contraction_spectral_radius.size() == run.size());
  for (double rho : rep.contraction_spectral_radius) CHECK(rho < 1.0);
  for (double r : rep.identity_residual) CHECK(r <= 1e-8);
  CHECK(rep.excitation.size() == run.size() - 2);
}
