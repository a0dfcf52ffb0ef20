#include <doctest.h>

#include "helpers.hpp"
#include "kfl/geometry.hpp"

using namespace kfl;
using namespace testutil;

TEST_CASE("Gaussian Fisher examples") {
  CHECK(geometry::fisher_gaussian(Matrix::Identity(3, 3), Matrix::Identity(3, 3)).F == Matrix::Identity(3, 3));
  CHECK(geometry::fisher_gaussian(mat({{2}}), mat({{4}})).F(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  const auto deficient = geometry::fisher_gaussian(mat({{1, 1, 0}}), mat({{1}}));
  CHECK(std::abs(linalg::min_sym_eigenvalue(deficient.F)) <= 1e-12);
  CHECK(deficient.regularization > 0);
}

TEST_CASE("categorical Fisher examples") {
  const auto f = geometry::fisher_categorical(Matrix::Identity(2, 2), vec({0.5, 0.5}));
  CHECK(max_abs(f.F - mat({{0.25, -0.25}, {-0.25, 0.25}})) <= 1e-15);
  NoiseStream ns(1, 0, 0);
  const Matrix W = randn(ns, 3, 2);
  CHECK(max_abs(geometry::fisher_categorical(W, vec({0, 1, 0})).F) <= 1e-15);
  CHECK_THROWS(geometry::fisher_categorical(W, vec({0.5, 0.6, 0})));
}

TEST_CASE("categorical Fisher equals the covariance of W^T e_y") {
  NoiseStream ns(2, 0, 0);
  const Matrix W = randn(ns, 3, 2);
  const Vector s = vec({0.2, 0.5, 0.3});
  const int n = 1000000;
  Vector mean = Vector::Zero(2);
  Matrix second = Matrix::Zero(2, 2);
  for (int i = 0; i < n; ++i) {
    const double u = ns.uniform();
    const Index y = u < s(0) ? 0 : (u < s(0) + s(1) ? 1 : 2);
    const Vector g = W.row(y).transpose();
    mean += g;
    second += g * g.transpose();
  }
  mean /= n;
  const Matrix cov = second / n - mean * mean.transpose();
  CHECK(max_abs(cov - geometry::fisher_categorical(W, s).F) <= 3e-3);
}

TEST_CASE("natural gradient step examples") {
  geometry::FisherMetric I{Matrix::Identity(2, 2)};
  CHECK(geometry::natural_gradient_step(vec({1, 2}), I, vec({0.5, -1}), 0.1) == vec({1.05, 1.9}));
  geometry::FisherMetric four{mat({{4}})};
  CHECK(geometry::natural_gradient_step(vec({0}), four, vec({8}), 1.0)(0) == doctest::Approx(2.0));
}

TEST_CASE("natural gradient step is invariant under linear reparameterization") {
  NoiseStream ns(3, 0, 0);
  const Matrix F = spd(ns, 3);
  const Matrix A = randn(ns, 3, 3) + 3.0 * Matrix::Identity(3, 3);
  const Vector grad = ns.normal(3);
  const Vector theta = ns.normal(3);
  const Vector phi = A.lu().solve(theta);
  const Vector step_theta = geometry::natural_gradient_step(theta, geometry::FisherMetric{F}, grad, 0.3);
  const geometry::FisherMetric Fphi{A.transpose() * F * A};
  const Vector step_phi = geometry::natural_gradient_step(phi, Fphi, A.transpose() * grad, 0.3);
  CHECK(max_abs(A * step_phi - step_theta) <= 1e-10);
}

TEST_CASE("equivalence gap examples") {
  const auto small = geometry::equivalence_gap(cov::Dense{mat({{1}})}, mat({{2}}), mat({{1e-8}}));
  REQUIRE(small.gap_ng);
  CHECK(*small.gap_ng <= 1e-7);

  const auto damped = geometry::equivalence_gap(cov::Dense{mat({{1}})}, mat({{1}}), mat({{1}}));
  REQUIRE(damped.gap_damped);
  CHECK(*damped.gap_damped <= 1e-15);
  CHECK(damped.damped_identity_applies);

  // K = I / (1 + r) against F^{-1} H^T R^{-1} = I: relative gap exactly r.
  double prev = INFINITY;
  for (int k = 1; k <= 8; ++k) {
    const double r = std::pow(10.0, -k);
    const auto g = geometry::equivalence_gap(cov::Dense{Matrix::Identity(3, 3)}, Matrix::Identity(3, 3),
                                             r * Matrix::Identity(3, 3));
    REQUIRE(g.gap_ng);
    CHECK(*g.gap_ng < prev);
    CHECK(*g.gap_ng == doctest::Approx(r).epsilon(1e-6));
    prev = *g.gap_ng;
  }

  const auto wide = geometry::equivalence_gap(cov::Dense{Matrix::Identity(3, 3)}, mat({{1, 0, 0}}), mat({{1}}));
  CHECK(!wide.gap_ng);
}

TEST_CASE("Gaussian log-likelihood gradient matches finite differences") {
  NoiseStream ns(4, 0, 0);
  const Matrix H = randn(ns, 2, 3), R = spd(ns, 2);
  const Vector y = ns.normal(2), theta = ns.normal(3);
  auto ll = [&](const Vector& th) { return geometry::gaussian_loglik(y - H * th, R); };
  const Vector g = geometry::gaussian_loglik_gradient(H, R, y - H * theta);
  for (Index i = 0; i < 3; ++i) {
    Vector e = Vector::Zero(3);
    e(i) = 1e-6;
    CHECK((ll(theta + e) - ll(theta - e)) / 2e-6 == doctest::Approx(g(i)).epsilon(1e-6));
  }
}
