#include <doctest.h>

#include <set>

#include "helpers.hpp"
#include "kfl/config.hpp"
#include "kfl/parallel.hpp"
#include "kfl/rng.hpp"

using namespace kfl;
using namespace testutil;

namespace {

std::string error_of(const std::string& text) {
  try {
    config::parse_run_config(text);
  } catch (const config::ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("run config parsing fills defaults") {
  const auto cfg = config::parse_run_config(R"({"task": {"type": "linear_regression", "d": 6}})");
  const auto& t = std::get<bench::LinearRegression>(cfg.task);
  CHECK(t.d == 6);
  CHECK(t.T == bench::LinearRegression{}.T);
  CHECK(std::holds_alternative<bench::FilterLearner>(cfg.learner));
  CHECK(cfg.seeds == std::vector<std::uint64_t>{0});
}

TEST_CASE("run config parsing is strict") {
  CHECK(error_of(R"({"task": {"type": "linear_regression", "dd": 6}})").find("task.dd") != std::string::npos);
  CHECK(error_of(R"({"task": {"type": "linear_regression"}, "extra": 1})").find("extra") != std::string::npos);
  CHECK(!error_of(R"({"task": {"type": "linear_regression", "d": "six"}})").empty());
  CHECK(!error_of(R"({"task": {"type": "linear_regression", "d": 0}})").empty());
  CHECK(!error_of(R"({"task": {"type": "nope"}})").empty());
  CHECK(!error_of(R"({"learner": {"type": "filter"}})").empty());
  CHECK(!error_of("{not json").empty());
  CHECK(!error_of(R"({"task": {"type": "teacher_stream"}, "learner": {"type": "baseline"}})").empty());
  CHECK(!error_of(R"({"task": {"type": "linear_regression", "d": 6},
                      "learner": {"type": "filter", "covariance": "kronecker", "kron_rows": 4}})")
             .empty());
  CHECK(!error_of(R"({"task": {"type": "linear_regression"}, "learner": {"type": "baseline", "optimizer": "lbfgs"}})").empty());
  CHECK_THROWS_AS(config::load_run_config("/nonexistent/config.json"), config::ConfigError);
}

TEST_CASE("config hash ignores key order and output directory") {
  const auto a = config::parse_run_config(
      R"({"task": {"type": "linear_regression", "d": 6, "T": 50}, "seeds": [1, 2], "output_dir": "x"})");
  const auto b = config::parse_run_config(
      R"({"seeds": [1, 2], "task": {"T": 50, "d": 6, "type": "linear_regression"}, "output_dir": "y"})");
  CHECK(config::config_hash(a) == config::config_hash(b));
  CHECK(config::config_hash(a).size() == 16);
  CHECK(config::canonical_json(a, false) == config::canonical_json(b, false));

  // Spelling out a default does not change the hash; changing a seed does.
  const auto c = config::parse_run_config(
      R"({"task": {"type": "linear_regression", "d": 6, "T": 50, "noise": 0.1}, "seeds": [1, 2]})");
  CHECK(config::config_hash(c) == config::config_hash(a));
  auto d = a;
  d.seeds = {1, 3};
  CHECK(config::config_hash(d) != config::config_hash(a));

  // The canonical form parses back to the same configuration.
  const auto round = config::parse_run_config(config::canonical_json(a, false));
  CHECK(config::config_hash(round) == config::config_hash(a));
}

TEST_CASE("matrix and system parsing") {
  CHECK(config::parse_matrix("[[1, 2], [3, 4]]") == mat({{1, 2}, {3, 4}}));
  CHECK_THROWS_AS(config::parse_matrix("[[1, 2], [3]]"), config::ConfigError);
  CHECK_THROWS_AS(config::parse_matrix("[1, 2]"), config::ConfigError);

  const auto q = config::parse_system(R"({"builtin": "quadratic"})");
  CHECK(q.model.state_dim() == 2);
  CHECK(q.model.transition(vec({1, 1})) == vec({0.9, 1.5}));
  CHECK(q.x0 == vec({0.5, 0.5}));

  const auto lin = config::parse_system(
      R"({"A": [[0.5]], "C": [[1]], "Q": [[0.1]], "R": [[1]], "x0": [2]})");
  CHECK(lin.model.transition(vec({2})) == vec({1}));
  CHECK_THROWS_AS(config::parse_system(R"({"A": [[0.5]], "C": [[1]], "Q": [[-1]], "R": [[1]]})"),
                  config::ConfigError);
  CHECK_THROWS_AS(config::parse_system(R"({"builtin": "lorenz"})"), config::ConfigError);
}

TEST_CASE("noise streams are keyed, not sequential") {
  NoiseStream a(42, 7, 1), b(42, 7, 1);
  CHECK(a.normal(5) == b.normal(5));
  NoiseStream c(42, 7, 2), d(42, 8, 1);
  NoiseStream e(42, 7, 1);
  const Vector ref = e.normal(5);
  CHECK(c.normal(5) != ref);
  CHECK(d.normal(5) != ref);

  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 1000; ++s) seen.insert(derive_seed(9, s));
  CHECK(seen.size() == 1000);
  CHECK(derive_seed(9, 3) == derive_seed(9, 3));
}

TEST_CASE("psd factor reproduces singular covariances") {
  const Matrix S = mat({{1, 1}, {1, 1}});
  const Matrix L = psd_factor(S);
  CHECK(max_abs(L * L.transpose() - S) <= 1e-12);
}

TEST_CASE("parallel_for results do not depend on the worker count") {
  std::vector<double> one(500), many(500);
  auto work = [](std::vector<double>& out) {
    return [&out](std::size_t i) {
      NoiseStream ns(5, i, 0);
      out[i] = ns.normal();
    };
  };
  parallel_for(one.size(), 1, work(one));
  parallel_for(many.size(), 7, work(many));
  CHECK(one == many);
  CHECK(pairwise_sum(one) == pairwise_sum(many));
  CHECK(pairwise_sum(std::vector<double>{1, 2, 3, 4}) == 10.0);

  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 4) throw Error("boom");
                               }),
                  Error);
}
