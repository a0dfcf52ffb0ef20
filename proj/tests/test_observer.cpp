#include <doctest.h>

#include "helpers.hpp"
#include "kfl/model.hpp"
#include "kfl/observer.hpp"

using namespace kfl;
using namespace testutil;

namespace {

observer::ToyDecoder linear_decoder(Index d, Index V, const Matrix& W) {
  observer::ToyDecoder dec;
  dec.A = 0.5 * Matrix::Identity(d, d);
  dec.embedding = Matrix::Zero(V, d);
  dec.b = Vector::Zero(d);
  dec.W = W;
  dec.activation = observer::Activation::identity;
  dec.Q = Matrix::Zero(d, d);
  observer::validate(dec);
  return dec;
}

}  // namespace

TEST_CASE("emission probabilities") {
  const auto flat = linear_decoder(2, 4, Matrix::Zero(4, 2));
  CHECK(max_abs(flat.probabilities(vec({3, -7})) - Vector::Constant(4, 0.25)) <= 1e-15);

  const auto sharp = linear_decoder(1, 3, mat({{100}, {0}, {-100}}));
  const Vector s = sharp.probabilities(vec({1}));
  CHECK(s(0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(s(2) < 1e-80);
}

TEST_CASE("linear decoder prediction") {
  const auto dec = linear_decoder(2, 3, Matrix::Zero(3, 2));
  const auto st = observer::make_observer_state(vec({2, -2}), 1.0);
  const auto dr = observer::decode_step(st, dec, 1);
  CHECK(dr.predicted.belief.mean == vec({1, -1}));
  CHECK(max_abs(cov::densify(dr.predicted.belief.cov) - 0.25 * Matrix::Identity(2, 2)) <= 1e-15);
  CHECK(dr.predicted.step == 1);
  CHECK(dr.F_jacobian == dec.A);
}

TEST_CASE("analytic decoder Jacobians match finite differences") {
  const auto dec = observer::make_random_decoder(4, 7, 3);
  NoiseStream ns(4, 0, 0);
  for (int k = 0; k < 5; ++k) {
    const Vector h = ns.normal(4);
    const long tok = k == 4 ? observer::kDropped : k;
    const Matrix Ja = dec.transition_jacobian(h, tok);
    const Matrix Jf = model::jacobian_fd([&](const Vector& x) { return dec.transition(x, tok); }, h);
    CHECK((Ja - Jf).norm() / Ja.norm() <= 1e-5);
    const Matrix Ea = dec.emission_jacobian(h);
    const Matrix Ef = model::jacobian_fd([&](const Vector& x) { return dec.probabilities(x); }, h);
    CHECK((Ea - Ef).norm() / Ea.norm() <= 1e-5);
  }
}

TEST_CASE("innovation correction examples") {
  // Confident correct prediction: the innovation nearly vanishes.
  const auto sharp = linear_decoder(1, 3, mat({{40}, {0}, {-40}}));
  const auto st = observer::make_observer_state(vec({1}), 1.0);
  CHECK(observer::innovation_correct(st, sharp, 0).correction.norm() <= 1e-6);

  // Two tokens: observing token 0 moves h towards larger W_0 h.
  const auto two = linear_decoder(1, 2, mat({{1}, {-1}}));
  const auto st0 = observer::make_observer_state(vec({0.2}), 1.0);
  CHECK(observer::innovation_correct(st0, two, 0).correction(0) > 0);
  CHECK(observer::innovation_correct(st0, two, 1).correction(0) < 0);

  // Vanishing prior variance: the correction vanishes in proportion.
  double prev = INFINITY;
  for (double s2 : {1e-2, 1e-4, 1e-6, 1e-8}) {
    const double c = observer::innovation_correct(observer::make_observer_state(vec({0.2}), s2), two, 0)
                         .correction.norm();
    CHECK(c < prev);
    prev = c;
  }
  CHECK(prev <= 1e-6);

  CHECK_THROWS_AS(observer::innovation_correct(st0, two, 2), DimensionError);
}

TEST_CASE("observer stability examples") {
  const Matrix F = 0.8 * Matrix::Identity(2, 2), H = mat({{1, 0}});
  CHECK(observer::observer_stability(F, Matrix::Zero(2, 1), H) == doctest::Approx(0.8));
  CHECK(observer::observer_stability(F, mat({{1}, {0}}), H) == doctest::Approx(0.8));
  CHECK(observer::observer_stability(Matrix::Zero(2, 2), mat({{1}, {0}}), H) == 0.0);
  CHECK_THROWS(observer::observer_stability(F, mat({{1}}), H));
}

TEST_CASE("stream generation and evaluation are deterministic") {
  const auto dec = observer::make_random_decoder(2, 8, 5);
  const auto a = observer::generate_streams(dec, 50, 9, 0.2, 0.1);
  const auto b = observer::generate_streams(dec, 50, 9, 0.2, 0.1);
  CHECK(a.tokens == b.tokens);
  CHECK(a.inputs == b.inputs);
  CHECK(a.tokens.size() == 51);

  observer::ShiftConfig cfg;
  cfg.T = 60;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto r1 = observer::shift_robustness_eval(dec, seeds, cfg, 1);
  const auto r4 = observer::shift_robustness_eval(dec, seeds, cfg, 4);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    CHECK(r1.rows[i].perturbed_corrected == r4.rows[i].perturbed_corrected);
    CHECK(r1.rows[i].clean_plain == r4.rows[i].clean_plain);
  }
  CHECK(r1.perturbed.mean_diff == r4.perturbed.mean_diff);
}

TEST_CASE("without perturbation the plain streams coincide") {
  const auto dec = observer::make_random_decoder(2, 8, 6);
  observer::ShiftConfig cfg;
  cfg.T = 100;
  cfg.dropout = 0.0;
  cfg.vocab_perturb = 0.0;
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 20; ++s) seeds.push_back(s);
  const auto rep = observer::shift_robustness_eval(dec, seeds, cfg, 2);
  for (const auto& r : rep.rows) {
    CHECK(r.perturbed_plain == r.clean_plain);
    CHECK(r.perturbed_corrected == r.clean_corrected);
  }
  // The teacher is exact on clean inputs, so correction may not cost likelihood.
  CHECK(rep.clean.mean_diff <= 3 * rep.clean.std_error + 1e-3);
}

TEST_CASE("decoder validation") {
  auto dec = observer::make_random_decoder(2, 4, 1);
  dec.b = Vector::Zero(3);
  CHECK_THROWS_AS(observer::validate(dec), DimensionError);
  CHECK_THROWS(observer::make_random_decoder(2, 1, 1));
  CHECK_THROWS(observer::make_observer_state(vec({0, 0}), 0.0));
  CHECK_THROWS(observer::generate_streams(observer::make_random_decoder(2, 4, 1), 10, 1, 1.5, 0));
}
