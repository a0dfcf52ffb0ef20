#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "kfl/model.hpp"
#include "kfl/observer.hpp"
#include "kfl/record.hpp"

namespace kfl::bench {

// ---- tasks ----

/// y = theta*^T x + noise, x ~ N(0, I).
struct LinearRegression {
  Index d = 4;
  Index T = 200;
  double noise = 0.1;
};

/// y ~ Bernoulli(sigmoid(theta*^T x)), x ~ N(0, I).
struct LogisticRegression {
  Index d = 4;
  Index T = 500;
};

/// Linear regression whose theta* takes a Gaussian random-walk step of
/// standard deviation drift_rate per coordinate after every datum.
struct DriftingRegression {
  Index d = 4;
  Index T = 500;
  double drift_rate = 0.01;
  double noise = 0.1;
};

/// Task k presents x = Pi_k x_base, with x_base ~ N(0, diag(v)) and fixed
/// heterogeneous variances v, and target y = theta*^T x_base + noise. Task 0
/// uses the identity permutation.
struct PermutedFeatures {
  Index d = 8;
  Index tasks = 5;
  Index T_per_task = 100;
  double noise = 0.1;
};

/// Observer decoding over teacher-generated token streams.
struct TeacherStream {
  Index hidden_dim = 2;
  Index vocab = 32;
  Index T = 500;
  double dropout = 0.1;
  double vocab_perturb = 0.0;
  double recurrent_scale = 0.9;
  double embedding_scale = 1.5;
  double emission_scale = 3.0;
  double q = 3e-3;
  std::uint64_t decoder_seed = 2;
};

/// Deterministic f(theta) = 1/2 (theta - theta*)^T diag(eigenvalues) (theta - theta*).
struct Quadratic {
  std::vector<double> eigenvalues{1.0, 10.0};
  Index T = 200;
};

using TaskSpec = std::variant<LinearRegression, LogisticRegression, DriftingRegression,
                              PermutedFeatures, TeacherStream, Quadratic>;

std::string task_name(const TaskSpec& task);

/// Supervised stream generated from a task and seed.
struct Dataset {
  std::vector<Vector> x;
  std::vector<double> y;
  std::vector<Vector> theta_star;  // target parameters in force at each datum
  std::vector<Index> task_of;      // task index per datum (continual protocol)
  Vector feature_var;              // variances of x_base
  std::vector<std::vector<Index>> permutations;
  std::vector<Vector> eval_x;      // logistic: held-out evaluation features
  std::vector<double> eval_y;
  bool logistic = false;
  double noise = 0.0;

  Index dim() const { return theta_star.empty() ? 0 : theta_star.front().size(); }
};

/// Regression-type tasks only.
Dataset generate(const TaskSpec& task, std::uint64_t seed);

/// Expected per-datum loss of theta on the stream at datum t (squared error
/// halves for regression, cross-entropy on the held-out set for logistic).
double population_loss(const Dataset& data, Index t, const Vector& theta);

/// Population loss of theta on task k of a permuted-features dataset.
double task_loss(const Dataset& data, Index task, const Vector& theta);

// ---- learners ----

struct FilterLearner {
  std::string covariance = "dense";  // dense | lowrank | block | kronecker
  Index rank = 4;                    // lowrank
  Index blocks = 2;                  // block
  Index kron_rows = 0;               // kronecker: d = kron_rows * (d / kron_rows)
  double q = 0.0;                    // parameter diffusion Q = q I
  std::optional<double> r;           // observation noise; defaults from the task
  double sigma0_sq = 1.0;
};

enum class Optimizer { sgd, momentum, adam };

std::string optimizer_name(Optimizer opt);
Optimizer parse_optimizer(const std::string& name);

struct BaselineLearner {
  Optimizer optimizer = Optimizer::sgd;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using LearnerSpec = std::variant<FilterLearner, BaselineLearner>;

std::string learner_name(const LearnerSpec& learner);

// ---- run records ----

struct RunRecord {
  std::string run_id;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string task;
  std::string learner;
  std::vector<StepRecord> steps;
  std::map<std::string, double> final_metrics;
  Vector final_theta;
  bool diverged = false;

  void append(StepRecord r) { steps.push_back(std::move(r)); }
};

/// 16 hex digits of FNV-1a over canonical text.
std::string fnv1a_hex(const std::string& text);

/// "<config_hash>-s<seed>"
std::string make_run_id(const std::string& config_hash, std::uint64_t seed);

struct TrainOptions {
  std::uint64_t seed = 0;
  std::string config_hash = "0000000000000000";
  /// Record spectral radius, Lyapunov value and snapshots when d is small enough.
  bool audit = false;
  Index audit_max_dim = 64;
  /// Zero means the task's own length.
  Index steps = 0;
};

RunRecord train_filtering(const TaskSpec& task, const FilterLearner& learner,
                          const TrainOptions& opts);

RunRecord train_baseline(const TaskSpec& task, const BaselineLearner& learner,
                         const TrainOptions& opts);

RunRecord train(const TaskSpec& task, const LearnerSpec& learner, const TrainOptions& opts);

// ---- continual protocol ----

struct ContinualResult {
  double forgetting = 0.0;  // mean over tasks before the last of (final - best)
  double plasticity = 0.0;  // mean over tasks after the first of (start - best within task)
  std::vector<std::vector<double>> curves;  // curves[k][t]: loss on task k after datum t
  std::vector<double> final_losses;
  RunRecord record;
};

/// `freeze_after_task` stops learning once that many tasks have been trained.
ContinualResult continual_eval(const PermutedFeatures& task, const LearnerSpec& learner,
                               const TrainOptions& opts,
                               std::optional<Index> freeze_after_task = std::nullopt);

// ---- metric files ----

inline constexpr int kSchemaVersion = 1;

/// Writes <dir>/steps.csv with one row per step of every record and
/// <dir>/summary_<run_id>.json per record.
void export_metrics(const std::vector<RunRecord>& records, const std::string& dir);

/// Reads a summary document back into a record without step rows.
RunRecord import_summary(const std::string& path);

/// Reads steps.csv back, grouped by run id in file order.
std::map<std::string, std::vector<StepRecord>> import_steps(const std::string& path);

/// Writes to "<path>.tmp" and renames over `path`.
void write_file_atomically(const std::string& path, const std::string& content);

/// Header "x1,...,xn" then optional "y1,...,ym"; one row per time step.
void write_trajectory_csv(const model::Trajectory& traj, const std::string& path);
model::Trajectory read_trajectory_csv(const std::string& path);

}  // namespace kfl::bench
