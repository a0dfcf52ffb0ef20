// Acceptance gate: every criterion at its stated tolerance, one line each.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "kfl/verify.hpp"

#ifndef KFL_CLI_PATH
#error "KFL_CLI_PATH must name the kfl executable"
#endif

namespace {

using kfl::verify::CriterionResult;
using kfl::verify::VerifyOptions;

CriterionResult full_suite_via_cli() {
  CriterionResult r;
  r.name = "full-verify-suite-cli";
  r.budget_seconds = 600.0;
  const std::string cmd = std::string("\"") + KFL_CLI_PATH + "\" verify all > /dev/null 2>&1";
  const auto t0 = std::chrono::steady_clock::now();
  const int status = std::system(cmd.c_str());
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.passed = code == 0 && r.seconds < r.budget_seconds;
  r.detail = "kfl verify all exit code " + std::to_string(code);
  return r;
}

}  // namespace

int main() {
  VerifyOptions opts;
  const std::vector<std::function<CriterionResult()>> criteria{
      [&] { return kfl::verify::contraction_identity(opts); },
      [&] { return kfl::verify::golden_ratio_fixed_point(opts); },
      [&] { return kfl::verify::natural_gradient_regimes(opts); },
      [&] { return kfl::verify::structured_covariance_oracles(opts); },
      [&] { return kfl::verify::rls_bayes_consistency(opts); },
      [&] { return kfl::verify::convex_convergence(opts); },
      [&] { return kfl::verify::persistent_excitation(opts); },
      [&] { return kfl::verify::lowrank_robustness(opts); },
      [&] { return kfl::verify::edmd_exactness(opts); },
      [&] { return kfl::verify::observer_correction(opts); },
      [&] { return kfl::verify::continual_forgetting(opts); },
      [] { return full_suite_via_cli(); },
  };
  int passed = 0;
  for (const auto& run : criteria) {
    CriterionResult r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r.passed = false;
      r.name = "criterion";
      r.detail = std::string("threw: ") + e.what();
    }
    std::cout << kfl::verify::format(r) << std::endl;
    passed += r.passed ? 1 : 0;
  }
  std::cout << passed << "/" << criteria.size() << " acceptance criteria passed" << std::endl;
  return passed == static_cast<int>(criteria.size()) ? 0 : 1;
}
