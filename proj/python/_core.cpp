#include <pybind11/complex.h>
#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "kfl/config.hpp"
#include "kfl/filter.hpp"
#include "kfl/koopman.hpp"
#include "kfl/stability.hpp"
#include "kfl/verify.hpp"

namespace py = pybind11;
using namespace kfl;

namespace {

std::vector<Vector> rows_of(const Matrix& m) {
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) out.emplace_back(m.row(i).transpose());
  return out;
}

py::dict run_to_dict(const bench::RunRecord& r) {
  std::vector<double> losses;
  for (const auto& s : r.steps) losses.push_back(s.loss);
  py::dict d;
  d["run_id"] = r.run_id;
  d["config_hash"] = r.config_hash;
  d["seed"] = r.seed;
  d["task"] = r.task;
  d["learner"] = r.learner;
  d["diverged"] = r.diverged;
  d["final_metrics"] = r.final_metrics;
  d["final_theta"] = r.final_theta;
  d["losses"] = losses;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Kalman-filter view of training: filters, covariances, stability and Koopman tools";

  auto base = py::register_exception<Error>(m, "KflError", PyExc_RuntimeError);
  py::register_exception<config::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<DefinitenessError>(m, "DefinitenessError", base.ptr());
  py::register_exception<SingularError>(m, "SingularError", base.ptr());
  py::register_exception<NonFiniteError>(m, "NonFiniteError", base.ptr());
  py::register_exception<ConvergenceError>(m, "ConvergenceError", base.ptr());

  m.def(
      "kalman_filter",
      [](const Matrix& A, const Matrix& C, const Matrix& Q, const Matrix& R, const Matrix& ys,
         const Vector& x0, double sigma0_sq) {
        const auto sys = model::make_linear_gaussian(A, C, Q, R);
        auto b = filter::isotropic_belief(x0, sigma0_sq);
        Matrix means(ys.rows(), A.rows());
        std::vector<Matrix> covs;
        for (Index t = 0; t < ys.rows(); ++t) {
          b = filter::filter_step(b, sys, Vector(), ys.row(t).transpose()).belief;
          means.row(t) = b.mean.transpose();
          covs.push_back(cov::densify(b.cov));
        }
        return py::make_tuple(means, covs);
      },
      py::arg("A"), py::arg("C"), py::arg("Q"), py::arg("R"), py::arg("observations"), py::arg("x0"),
      py::arg("sigma0_sq") = 1.0,
      "Filter a T x m observation array; returns (T x n posterior means, list of posterior covariances).");

  m.def(
      "dare_solve",
      [](const Matrix& A, const Matrix& H, const Matrix& Q, const Matrix& R, double tol, int max_iter) {
        return filter::dare_solve(A, H, Q, R, tol, max_iter).P;
      },
      py::arg("A"), py::arg("H"), py::arg("Q"), py::arg("R"), py::arg("tol") = 1e-12,
      py::arg("max_iter") = 100000, "Steady-state prior covariance of the filter Riccati recursion.");

  m.def(
      "contraction_check",
      [](const Matrix& P, const Matrix& H, const Matrix& R) {
        const auto c = stability::contraction_check(cov::Dense{P}, H, R);
        py::dict d;
        d["rho"] = c.rho;
        d["identity_residual"] = c.identity_residual;
        d["contraction"] = c.contraction;
        return d;
      },
      py::arg("P"), py::arg("H"), py::arg("R"));

  m.def(
      "edmd_fit",
      [](const Matrix& states, const std::string& dictionary, std::optional<double> lambda_reg) {
        const auto dict = koopman::Dictionary::from_spec(dictionary, states.cols());
        const auto fit = koopman::edmd_fit(koopman::snapshot_pairs(rows_of(states)), dict, lambda_reg);
        py::dict d;
        d["K"] = fit.K;
        d["rank"] = fit.rank;
        d["residual"] = fit.residual;
        d["relative_residual"] = fit.relative_residual;
        d["observables"] = dict.names();
        return d;
      },
      py::arg("states"), py::arg("dictionary") = "identity", py::arg("lambda_reg") = py::none(),
      "Fit a Koopman matrix to consecutive rows of a trajectory.");

  m.def(
      "koopman_spectrum",
      [](const Matrix& K) { return koopman::spectrum(K).eigenvalues; }, py::arg("K"),
      "Eigenvalues sorted by decreasing modulus.");

  m.def("config_hash", [](const std::string& text) { return config::config_hash(config::parse_run_config(text)); },
        py::arg("config_json"));
  m.def("canonical_json",
        [](const std::string& text) { return config::canonical_json(config::parse_run_config(text), false); },
        py::arg("config_json"));

  m.def(
      "train",
      [](const std::string& text, std::optional<std::uint64_t> seed) {
        const auto cfg = config::parse_run_config(text);
        bench::TrainOptions o;
        o.config_hash = config::config_hash(cfg);
        o.audit = cfg.audit;
        o.audit_max_dim = cfg.audit_max_dim;
        o.steps = cfg.steps;
        py::list out;
        const auto seeds = seed ? std::vector<std::uint64_t>{*seed} : cfg.seeds;
        for (auto s : seeds) {
          o.seed = s;
          out.append(run_to_dict(bench::train(cfg.task, cfg.learner, o)));
        }
        return out;
      },
      py::arg("config_json"), py::arg("seed") = py::none(), "Run a configuration; one result dict per seed.");

  m.def(
      "verify",
      [](const std::string& suite, unsigned jobs) {
        verify::VerifyOptions o;
        o.jobs = jobs;
        py::list out;
        for (const auto& r : verify::run_suite(suite, o)) {
          py::dict d;
          d["name"] = r.name;
          d["passed"] = r.passed;
          d["detail"] = r.detail;
          d["seconds"] = r.seconds;
          out.append(d);
        }
        return out;
      },
      py::arg("suite") = "all", py::arg("jobs") = 1);
}
