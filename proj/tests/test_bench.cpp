#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "kfl/bench.hpp"

using namespace kfl;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("kfl_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bench::RunRecord train_quadratic(bench::Optimizer opt, double lr, Index steps = 0) {
  bench::BaselineLearner b;
  b.optimizer = opt;
  b.lr = lr;
  bench::TrainOptions o;
  o.steps = steps;
  return bench::train(bench::Quadratic{{1.0, 10.0}, 200}, b, o);
}

}  // namespace

TEST_CASE("filter learner equals the ridge solution") {
  const bench::LinearRegression task{5, 60, 0.1};
  bench::FilterLearner f;
  f.r = 0.01;
  f.sigma0_sq = 1.0;
  const auto rec = bench::train(task, f, bench::TrainOptions{});
  const auto data = bench::generate(task, 0);
  Matrix G = Matrix::Identity(5, 5);
  Vector b = Vector::Zero(5);
  for (std::size_t t = 0; t < data.x.size(); ++t) {
    G += data.x[t] * data.x[t].transpose() / 0.01;
    b += data.x[t] * data.y[t] / 0.01;
  }
  CHECK(max_abs(rec.final_theta - G.ldlt().solve(b)) <= 1e-5);
  CHECK(!rec.diverged);
  CHECK(rec.steps.size() == 60);
}

TEST_CASE("noiseless regression is solved") {
  bench::FilterLearner f;
  f.r = 1e-6;
  const auto rec = bench::train(bench::LinearRegression{4, 40, 0.0}, f, bench::TrainOptions{});
  CHECK(rec.final_metrics.at("param_error") <= 1e-4);
  CHECK(rec.steps.back().loss <= 1e-6 * rec.steps.front().loss + 1e-12);
}

TEST_CASE("training is deterministic per seed") {
  const bench::DriftingRegression task{4, 80, 0.01, 0.1};
  bench::FilterLearner f;
  f.q = 1e-4;
  bench::TrainOptions o;
  o.seed = 3;
  const auto a = bench::train(task, f, o);
  const auto b = bench::train(task, f, o);
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].loss == b.steps[i].loss);
  CHECK(a.final_theta == b.final_theta);
  o.seed = 4;
  CHECK(bench::train(task, f, o).final_theta != a.final_theta);
}

TEST_CASE("first-order baselines") {
  bench::BaselineLearner frozen;
  frozen.lr = 0.0;
  const auto r0 = bench::train(bench::LinearRegression{}, frozen, bench::TrainOptions{});
  CHECK(r0.final_theta == Vector::Zero(4));

  // f = 1/2 sum lambda_i (theta_i - 1)^2 with L = 10: stable iff lr < 2 / L.
  const auto below = train_quadratic(bench::Optimizer::sgd, 0.19);
  CHECK(!below.diverged);
  CHECK(below.final_metrics.at("final_loss") <= 1e-12);
  const auto above = train_quadratic(bench::Optimizer::sgd, 0.21, 2000);
  CHECK(above.diverged);

  // Adam's first step moves each coordinate by lr towards the minimizer.
  const auto adam = train_quadratic(bench::Optimizer::adam, 0.05, 1);
  CHECK(max_abs(adam.final_theta - Vector::Constant(2, 0.05)) <= 1e-8);

  CHECK_THROWS(bench::train(bench::Quadratic{}, bench::FilterLearner{}, bench::TrainOptions{}));
  CHECK_THROWS(bench::train(bench::TeacherStream{}, bench::BaselineLearner{}, bench::TrainOptions{}));
  CHECK(bench::parse_optimizer("adam") == bench::Optimizer::adam);
  CHECK_THROWS(bench::parse_optimizer("lbfgs"));
}

TEST_CASE("continual protocol") {
  bench::PermutedFeatures one{6, 1, 50, 0.1};
  const auto single = bench::continual_eval(one, bench::FilterLearner{}, bench::TrainOptions{});
  CHECK(single.forgetting == 0.0);
  CHECK(single.final_losses.size() == 1);

  bench::PermutedFeatures three{6, 3, 40, 0.1};
  const auto frozen = bench::continual_eval(three, bench::FilterLearner{}, bench::TrainOptions{}, 1);
  REQUIRE(frozen.curves.size() == 3);
  const auto& c0 = frozen.curves[0];
  for (std::size_t t = 40; t < c0.size(); ++t) CHECK(c0[t] == c0[39]);
}

TEST_CASE("hashing and run ids") {
  CHECK(bench::fnv1a_hex("") == "cbf29ce484222325");
  CHECK(bench::fnv1a_hex("a") == "af63dc4c8601ec8c");
  CHECK(bench::make_run_id("0123456789abcdef", 7) == "0123456789abcdef-s7");
}

TEST_CASE("metric export round trip") {
  const auto dir = scratch_dir("export");
  bench::export_metrics({}, dir.string());
  std::ifstream in(dir / "steps.csv");
  std::string header, extra;
  std::getline(in, header);
  CHECK(header == "run_id,step,loss,innovation_norm,gain_norm,spectral_radius,lyapunov,wall_time");
  CHECK(!std::getline(in, extra));

  bench::TrainOptions o;
  o.config_hash = "00000000deadbeef";
  o.audit = true;
  const auto rec = bench::train(bench::LinearRegression{3, 20, 0.1}, bench::FilterLearner{}, o);
  bench::export_metrics({rec}, dir.string());
  const auto back = bench::import_summary((dir / ("summary_" + rec.run_id + ".json")).string());
  CHECK(back.run_id == rec.run_id);
  CHECK(back.config_hash == "00000000deadbeef");
  CHECK(back.final_theta == rec.final_theta);
  CHECK(back.final_metrics == rec.final_metrics);
  const auto steps = bench::import_steps((dir / "steps.csv").string());
  REQUIRE(steps.count(rec.run_id) == 1);
  const auto& s = steps.at(rec.run_id);
  REQUIRE(s.size() == rec.steps.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(s[i].step == rec.steps[i].step);
    CHECK(s[i].loss == rec.steps[i].loss);
    CHECK(s[i].spectral_radius == rec.steps[i].spectral_radius);
  }
  CHECK(!fs::exists(dir / "steps.csv.tmp"));
  fs::remove_all(dir);
}

TEST_CASE("trajectory csv round trip") {
  const auto dir = scratch_dir("traj");
  const auto m = model::make_linear_gaussian(mat({{0.9, 0}, {0.1, 0.8}}), mat({{1, 0}}),
                                             0.01 * Matrix::Identity(2, 2), mat({{0.1}}));
  const auto traj = model::simulate(m, 25, vec({1, 2}), 4);
  const auto path = (dir / "t.csv").string();
  bench::write_trajectory_csv(traj, path);
  const auto back = bench::read_trajectory_csv(path);
  REQUIRE(back.states.size() == traj.states.size());
  REQUIRE(back.observations.size() == traj.observations.size());
  for (std::size_t t = 0; t < traj.states.size(); ++t) {
    CHECK(back.states[t] == traj.states[t]);
    CHECK(back.observations[t] == traj.observations[t]);
  }
  fs::remove_all(dir);
}
