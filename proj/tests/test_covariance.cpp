#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "helpers.hpp"
#include "kfl/covariance.hpp"

using namespace kfl;
using namespace testutil;

namespace {

Matrix dense_gain(const Matrix& P, const Matrix& H, const Matrix& R) {
  const Matrix S = H * P * H.transpose() + R;
  return P * H.transpose() * S.inverse();
}

// Best rank-r plus isotropic fit: top r eigenpairs, delta = mean of the rest.
Matrix best_lowrank(const Matrix& P, Index r, double floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(P);
  const Index d = P.rows();
  const Vector ev = es.eigenvalues();
  double rest = 0;
  for (Index i = 0; i < d - r; ++i) rest += ev(i);
  const double delta = std::max(floor, rest / static_cast<double>(d - r));
  Matrix out = delta * Matrix::Identity(d, d);
  for (Index i = d - r; i < d; ++i) {
    const Vector v = es.eigenvectors().col(i);
    out += std::max(ev(i) - delta, 0.0) * v * v.transpose();
  }
  return out;
}

}  // namespace

TEST_CASE("densify expands every variant") {
  CHECK(max_abs(cov::densify(cov::LowRankPlusDiagonal{mat({{1}, {0}}), 0.1}) - mat({{1.1, 0}, {0, 0.1}})) <= 1e-15);
  CHECK(max_abs(cov::densify(cov::KroneckerPair{mat({{2}}), Matrix::Identity(2, 2)}) - 2.0 * Matrix::Identity(2, 2)) == 0);
  CHECK(max_abs(cov::densify(cov::BlockDiagonal{{mat({{1}}), mat({{3}})}}) - mat({{1, 0}, {0, 3}})) == 0);
}

TEST_CASE("gain examples") {
  const auto g = cov::gain(cov::Dense{mat({{1}})}, mat({{1}}), mat({{1}}));
  CHECK(g.K(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(g.S(0, 0) == doctest::Approx(2.0).epsilon(1e-15));

  const auto lr = cov::gain(cov::LowRankPlusDiagonal{mat({{1}, {0}}), 0.1}, Matrix::Identity(2, 2),
                            Matrix::Identity(2, 2));
  CHECK(max_abs(lr.K - mat({{1.1 / 2.1, 0}, {0, 0.1 / 1.1}})) <= 1e-14);

  const auto kr = cov::gain(cov::KroneckerPair{mat({{1}}), mat({{1}})}, mat({{1}}), mat({{1}}));
  CHECK(kr.K(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("structured gains match the dense oracle") {
  for (int inst = 0; inst < 30; ++inst) {
    NoiseStream ns(5, inst, 0);
    const Index m = 1 + inst % 4;
    {
      const Index d = 3 + inst % 7;
      const Matrix U = randn(ns, d, 2);
      const Matrix P = U * U.transpose() + 0.3 * Matrix::Identity(d, d);
      const Matrix H = randn(ns, m, d), R = spd(ns, m);
      const Matrix K = cov::gain(cov::LowRankPlusDiagonal{U, 0.3}, H, R).K;
      CHECK(max_abs(K - dense_gain(P, H, R)) <= 1e-10);
    }
    {
      const Matrix B1 = spd(ns, 2), B2 = spd(ns, 3);
      Matrix P = Matrix::Zero(5, 5);
      P.topLeftCorner(2, 2) = B1;
      P.bottomRightCorner(3, 3) = B2;
      const Matrix H = randn(ns, m, 5), R = spd(ns, m);
      const Matrix K = cov::gain(cov::BlockDiagonal{{B1, B2}}, H, R).K;
      CHECK(max_abs(K - dense_gain(P, H, R)) <= 1e-10);
    }
    {
      const Matrix A = spd(ns, 2), B = spd(ns, 3);
      Matrix P(6, 6);
      for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 2; ++j) P.block(3 * i, 3 * j, 3, 3) = A(i, j) * B;
      const Matrix H = randn(ns, m, 6), R = spd(ns, m);
      const Matrix K = cov::gain(cov::KroneckerPair{A, B}, H, R).K;
      CHECK(max_abs(K - dense_gain(P, H, R)) <= 1e-10);
    }
  }
}

TEST_CASE("measurement update examples") {
  const auto post = cov::measurement_update(cov::Dense{mat({{1}})}, mat({{0.5}}), mat({{1}}), mat({{1}}));
  CHECK(cov::densify(post)(0, 0) == doctest::Approx(0.5).epsilon(1e-15));

  NoiseStream ns(6, 0, 0);
  const Matrix P = spd(ns, 3);
  const Matrix H = Matrix::Zero(2, 3), R = Matrix::Identity(2, 2);
  const auto g = cov::gain(cov::Dense{P}, H, R);
  CHECK(cov::densify(cov::measurement_update(cov::Dense{P}, g.K, H, R)) == P);
}

TEST_CASE("low-rank update re-truncates to the best rank-r approximation") {
  const cov::LowRankPlusDiagonal P{mat({{1.0}, {0.5}}), 0.2};
  const Matrix H = mat({{1, 0.3}, {-0.2, 1}}), R = 0.5 * Matrix::Identity(2, 2);
  const Matrix Pd = cov::densify(P);
  const Matrix K = dense_gain(Pd, H, R);
  const Matrix IKH = Matrix::Identity(2, 2) - K * H;
  const Matrix joseph = IKH * Pd * IKH.transpose() + K * R * K.transpose();
  const auto got = cov::measurement_update(P, cov::gain(P, H, R).K, H, R);
  CHECK(std::holds_alternative<cov::LowRankPlusDiagonal>(got));
  CHECK((cov::densify(got) - best_lowrank(joseph, 1, 1e-6)).norm() <= 1e-6);
}

TEST_CASE("predict examples") {
  NoiseStream ns(7, 0, 0);
  const Matrix P = spd(ns, 3);
  CHECK(cov::densify(cov::predict_cov(cov::Dense{P}, Matrix::Identity(3, 3), Matrix::Zero(3, 3))) == P);

  const cov::LowRankPlusDiagonal lr{randn(ns, 4, 2), 0.3};
  const auto p2 = cov::predict_cov(lr, std::nullopt, cov::ScaledIdentity{4, 0.05});
  REQUIRE(std::holds_alternative<cov::LowRankPlusDiagonal>(p2));
  CHECK(std::get<cov::LowRankPlusDiagonal>(p2).delta == 0.3 + 0.05);
  CHECK(std::get<cov::LowRankPlusDiagonal>(p2).U == lr.U);

  CHECK(cov::densify(cov::predict_cov(cov::Dense{mat({{1}})}, mat({{2}}), mat({{1}})))(0, 0) == 5.0);
}

TEST_CASE("truncate_rank examples") {
  const Matrix P = Vector(vec({4, 1, 0.01})).asDiagonal();
  const auto t = cov::truncate_rank(P, 1, 0.01);
  CHECK(t.delta == doctest::Approx(0.505).epsilon(1e-12));
  CHECK(std::abs(std::abs(t.U(0, 0)) - std::sqrt(4 - 0.505)) <= 1e-12);
  CHECK(std::abs(t.U(1, 0)) <= 1e-12);

  const auto iso = cov::truncate_rank(2.5 * Matrix::Identity(4, 4), 2, 1e-6);
  CHECK(max_abs(cov::densify(iso) - 2.5 * Matrix::Identity(4, 4)) <= 1e-12);

  NoiseStream ns(8, 0, 0);
  const Matrix S = spd(ns, 5);
  CHECK(max_abs(cov::densify(cov::truncate_rank(S, 5, 1e-6)) - S) <= 1e-10);
}

TEST_CASE("densified variants are symmetric PSD, low rank bounded below by delta") {
  for (int inst = 0; inst < 20; ++inst) {
    NoiseStream ns(9, inst, 0);
    const double delta = 0.05 + ns.uniform();
    const std::vector<cov::CovarianceRepr> reps{
        cov::Dense{spd(ns, 4)}, cov::BlockDiagonal{{spd(ns, 2), spd(ns, 3)}},
        cov::LowRankPlusDiagonal{randn(ns, 5, 2), delta}, cov::KroneckerPair{spd(ns, 2), spd(ns, 2)}};
    for (const auto& r : reps) {
      const Matrix D = cov::densify(r);
      CHECK(D == D.transpose());
      CHECK(linalg::min_sym_eigenvalue(D) >= -1e-12);
    }
    CHECK(cov::min_eigenvalue(reps[2]) >= delta - 1e-12);
    CHECK(cov::dim(reps[1]) == 5);
    CHECK(cov::dim(reps[3]) == 4);
  }
}

TEST_CASE("Woodbury inverse matches a dense solve") {
  NoiseStream ns(10, 0, 0);
  const cov::LowRankPlusDiagonal lr{randn(ns, 30, 3), 0.2};
  const Matrix X = randn(ns, 30, 2);
  const Matrix P = cov::densify(lr);
  CHECK(max_abs(cov::inverse_apply(lr, X) - P.ldlt().solve(X)) <= 1e-9);
}

TEST_CASE("invalid representations are rejected") {
  CHECK_THROWS(cov::make_low_rank(Matrix::Ones(3, 1), 0.0));
  CHECK_THROWS(cov::make_dense(mat({{1, 2}, {0, 1}})));
  CHECK_THROWS(cov::make_dense(mat({{-1, 0}, {0, 1}})));
  CHECK_THROWS(cov::make_kronecker(mat({{1}}), mat({{-1}})));
}

TEST_CASE("low-rank path scales to large d without dense matrices") {
  const Index d = 200000;
  NoiseStream ns(11, 0, 0);
  const cov::CovarianceRepr P = cov::LowRankPlusDiagonal{0.1 * randn(ns, d, 4), 1.0};
  const Matrix H = randn(ns, 2, d) / std::sqrt(static_cast<double>(d));
  cov::Options o;
  o.audit = false;
  const auto g = cov::gain(P, H, Matrix::Identity(2, 2), o);
  CHECK(g.K.rows() == d);
  CHECK(!g.contraction);
  const auto post = cov::measurement_update(P, g.K, H, Matrix::Identity(2, 2), o);
  CHECK(cov::dim(post) == d);
  CHECK_THROWS(cov::densify(P));
}

TEST_CASE("symmetrization fault leaves rounding asymmetry") {
  NoiseStream ns(12, 0, 0);
  cov::Options clean, broken;
  broken.faults.skip_symmetrization = true;
  double worst_clean = 0, worst_broken = 0;
  for (int k = 0; k < 20; ++k) {
    const Matrix P = spd(ns, 6), H = randn(ns, 3, 6), R = spd(ns, 3);
    const Matrix K = cov::gain(cov::Dense{P}, H, R).K;
    const Matrix a = cov::densify(cov::measurement_update(cov::Dense{P}, K, H, R, clean));
    const Matrix b = cov::densify(cov::measurement_update(cov::Dense{P}, K, H, R, broken));
    worst_clean = std::max(worst_clean, max_abs(a - a.transpose()));
    worst_broken = std::max(worst_broken, max_abs(b - b.transpose()));
  }
  CHECK(worst_clean == 0.0);
  CHECK(worst_broken > 0.0);
}
