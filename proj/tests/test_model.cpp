#include <doctest.h>

#include "helpers.hpp"
#include "kfl/model.hpp"

using namespace kfl;
using namespace testutil;

namespace {

// Row reduction with partial pivoting.
int rank_by_elimination(Matrix m, double tol = 1e-10) {
  int rank = 0;
  for (Index c = 0; c < m.cols() && rank < m.rows(); ++c) {
    Index piv = rank;
    for (Index r = rank; r < m.rows(); ++r)
      if (std::abs(m(r, c)) > std::abs(m(piv, c))) piv = r;
    if (std::abs(m(piv, c)) < tol) continue;
    m.row(piv).swap(m.row(rank));
    for (Index r = rank + 1; r < m.rows(); ++r) m.row(r) -= m(r, c) / m(rank, c) * m.row(rank);
    ++rank;
  }
  return rank;
}

}  // namespace

TEST_CASE("linear gaussian identity model propagates states unchanged") {
  const Matrix I = Matrix::Identity(2, 2);
  const auto m = model::make_linear_gaussian(I, I, Matrix::Zero(2, 2), I);
  const Vector x = vec({1.5, -2.0});
  CHECK(m.transition(x) == x);
  CHECK(m.observation(x) == x);
}

TEST_CASE("partially observed oscillator is observable") {
  const Matrix A = mat({{0, 1}, {-0.1, 0.8}});
  const Matrix C = mat({{1, 0}});
  const Matrix O = model::observability_matrix(A, C);
  CHECK(O.rows() == 2);
  CHECK(rank_by_elimination(O) == 2);
}

TEST_CASE("model construction rejects non-PD observation noise and bad shapes") {
  const Matrix I = Matrix::Identity(2, 2);
  CHECK_THROWS_AS(model::make_linear_gaussian(I, I, I, Matrix::Zero(2, 2)), DefinitenessError);
  CHECK_THROWS_AS(model::make_linear_gaussian(I, I, -I, I), DefinitenessError);
  CHECK_THROWS_AS(model::make_linear_gaussian(I, Matrix::Identity(3, 3), I, I), DimensionError);
}

TEST_CASE("analytic Jacobians agree with finite differences") {
  NoiseStream ns(1, 0, 0);
  const Matrix A = randn(ns, 3, 3), C = randn(ns, 2, 3);
  const auto m = model::make_linear_gaussian(A, C, Matrix::Identity(3, 3), Matrix::Identity(2, 2));
  CHECK(model::jacobian_check(m, 20, 3) <= 1e-5);
}

TEST_CASE("finite-difference Jacobians of known maps") {
  const Matrix C = mat({{1, 2}, {3, -4}, {0.5, 0}});
  const Matrix J = model::jacobian_fd([&](const Vector& x) { return Vector(C * x); }, vec({0.3, -1}));
  CHECK(max_abs(J - C) <= 1e-8);
  const Matrix d = model::jacobian_fd([](const Vector& x) { return vec({x(0) * x(0)}); }, vec({3.0}));
  CHECK(std::abs(d(0, 0) - 6.0) <= 1e-7);
}

TEST_CASE("augmented model layout") {
  const auto base = model::make_linear_gaussian(mat({{0.9}}), mat({{1}}), mat({{0.1}}), mat({{1}}));
  const auto aug = model::augment_parameters(base, vec({0.5}), mat({{1e-4}}));
  CHECK(aug.state_dim() == 2);
  const Matrix J = aug.state_space().transition_jacobian_fd(vec({0.7, 0.5}));
  CHECK(std::abs(J(1, 1) - 1.0) <= 1e-8);
  CHECK(std::abs(J(1, 0)) <= 1e-8);
  CHECK(aug.initial_state(vec({2.0})) == vec({2.0, 0.5}));
}

TEST_CASE("softmax probabilities sum to one") {
  NoiseStream ns(2, 0, 0);
  model::CategoricalSoftmaxObs obs{20.0 * randn(ns, 7, 3)};
  for (int k = 0; k < 50; ++k) {
    const Vector s = model::probabilities(obs, 10.0 * ns.normal(3));
    CHECK(std::abs(s.sum() - 1.0) <= 1e-12);
    CHECK((s.array() >= 0).all());
  }
}

TEST_CASE("simulate is deterministic and follows the dynamics") {
  const Matrix I = Matrix::Identity(2, 2);
  const auto still = model::make_linear_gaussian(I, I, Matrix::Zero(2, 2), 1e-12 * I);
  const auto t0 = model::simulate(still, 5, vec({1, 2}), 9);
  for (const auto& x : t0.states) CHECK(x == vec({1, 2}));

  const auto half = model::make_linear_gaussian(mat({{0.5}}), mat({{1}}), mat({{0}}), mat({{1}}));
  const auto tr = model::simulate(half, 4, vec({1.0}), 3);
  REQUIRE(tr.states.size() == 4);
  const double expected[] = {1, 0.5, 0.25, 0.125};
  for (int t = 0; t < 4; ++t) CHECK(tr.states[t](0) == expected[t]);

  const auto noisy = model::make_linear_gaussian(mat({{0.9}}), mat({{1}}), mat({{1}}), mat({{1}}));
  const auto a = model::simulate(noisy, 50, vec({0.0}), 42);
  const auto b = model::simulate(noisy, 50, vec({0.0}), 42);
  const auto c = model::simulate(noisy, 50, vec({0.0}), 43);
  bool same = true, differs = false;
  for (int t = 0; t < 50; ++t) {
    same = same && a.states[t] == b.states[t] && a.observations[t] == b.observations[t];
    differs = differs || a.observations[t] != c.observations[t];
  }
  CHECK(same);
  CHECK(differs);
}
