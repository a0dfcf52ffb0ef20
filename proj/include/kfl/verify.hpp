#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kfl/covariance.hpp"

namespace kfl::verify {

struct CriterionResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
  double budget_seconds = 0.0;  // runtime bound; exceeding it fails the criterion
};

struct VerifyOptions {
  cov::FaultInjection faults{};
  unsigned jobs = 1;
  std::uint64_t seed = 20240501;
};

/// filter, geometry, stability, koopman, observer, covariance, continual
const std::vector<std::string>& suite_names();

/// Runs one suite, or every suite for "all". Throws on an unknown suite name.
std::vector<CriterionResult> run_suite(const std::string& suite, const VerifyOptions& opts);

// Individual criteria.
CriterionResult contraction_identity(const VerifyOptions& opts);
CriterionResult golden_ratio_fixed_point(const VerifyOptions& opts);
CriterionResult covariance_symmetry(const VerifyOptions& opts);
CriterionResult natural_gradient_regimes(const VerifyOptions& opts);
CriterionResult structured_covariance_oracles(const VerifyOptions& opts);
CriterionResult rls_bayes_consistency(const VerifyOptions& opts);
CriterionResult convex_convergence(const VerifyOptions& opts);
CriterionResult persistent_excitation(const VerifyOptions& opts);
CriterionResult lowrank_robustness(const VerifyOptions& opts);
CriterionResult edmd_exactness(const VerifyOptions& opts);
CriterionResult observer_correction(const VerifyOptions& opts);
CriterionResult continual_forgetting(const VerifyOptions& opts);

/// "PASS name (1.23 s): detail"
std::string format(const CriterionResult& r);

}  // namespace kfl::verify
