#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kfl/bench.hpp"
#include "kfl/model.hpp"

namespace kfl::config {

/// Malformed, missing or schema-violating configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  bench::TaskSpec task;
  bench::LearnerSpec learner;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir;  // empty: use the default output root
  bool audit = false;
  Index audit_max_dim = 64;
  Index steps = 0;  // zero: the task's own length
};

/// Strict parse: unknown keys, wrong types and out-of-range values throw ConfigError.
RunConfig parse_run_config(const std::string& json_text);

/// Reads and parses a file; a missing file throws ConfigError naming the path.
RunConfig load_run_config(const std::string& path);

/// Fully expanded configuration (all defaults filled in) as JSON with sorted keys.
std::string canonical_json(const RunConfig& cfg, bool include_output_dir = true);

/// FNV-1a over the canonical form without output_dir.
std::string config_hash(const RunConfig& cfg);

/// Row-major nested numeric arrays, e.g. [[1, 0], [0, 1]].
Matrix parse_matrix(const std::string& json_text);

struct SystemConfig {
  model::StateSpaceModel model;
  Vector x0;
};

/// {"builtin": "quadratic"} or {"A": [[...]], "C": [[...]], "Q": [[...]], "R": [[...]], "x0": [...]}.
/// The quadratic system is x1' = 0.9 x1, x2' = 0.5 x2 + x1^2, y = x1 with
/// optional "q" (noise variance on x2, default 0.01), "r" (default 2.0) and "x0".
SystemConfig parse_system(const std::string& json_text);
SystemConfig load_system(const std::string& path);

/// The built-in quadratic system with explicit noise levels.
model::StateSpaceModel quadratic_system(double q, double r);

}  // namespace kfl::config
