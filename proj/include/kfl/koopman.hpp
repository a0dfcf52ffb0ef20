#pragma once

#include <complex>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kfl/covariance.hpp"
#include "kfl/filter.hpp"

namespace kfl::koopman {

struct Observable {
  std::string name;
  std::function<double(const Vector&)> fn;
};

/// Ordered list of observables phi_i mapping a state to a lifted vector.
class Dictionary {
 public:
  /// `coordinates[i]` is the lifted index holding state coordinate i, when present.
  Dictionary(Index state_dim, std::vector<Observable> observables,
             std::vector<Index> coordinates = {});

  /// phi(x) = x.
  static Dictionary identity(Index n);

  /// All monomials of total degree 1..degree, no constant. Graded by degree;
  /// within a degree, exponent tuples in descending lexicographic order
  /// (2-D, degree 2: x1, x2, x1^2, x1 x2, x2^2).
  static Dictionary monomials(Index n, int degree);

  /// Coordinates (optional) followed by Gaussian bumps exp(-|x - c|^2 / (2 w^2)).
  static Dictionary radial_bumps(Index n, const std::vector<Vector>& centers, double width,
                                 bool include_coordinates = true);

  /// Parses "identity", "monomials:<degree>" or "bumps:<per-axis>:<lo>:<hi>:<width>".
  static Dictionary from_spec(const std::string& spec, Index state_dim);

  Index state_dim() const { return state_dim_; }
  Index lifted_dim() const { return static_cast<Index>(observables_.size()); }
  std::vector<std::string> names() const;
  bool has_coordinates() const { return !coordinates_.empty(); }

  Vector lift(const Vector& x) const;

  /// state_dim x lifted_dim selector of the coordinate observables.
  Matrix projection() const;

 private:
  Index state_dim_;
  std::vector<Observable> observables_;
  std::vector<Index> coordinates_;
};

struct EdmdFit {
  Matrix K;
  double residual = 0.0;           // ||Phi_Y - Phi_X K^T||_F
  double relative_residual = 0.0;  // residual / ||Phi_Y||_F
  Index rank = 0;
  double regularization = 0.0;
};

/// K = argmin sum ||phi(x') - K phi(x)||^2 + lambda ||K||^2 through the normal
/// equations. Default lambda: 1e-10 * trace(Phi_X^T Phi_X) / d. Throws when the
/// lifted snapshots do not span the dictionary.
EdmdFit edmd_fit(const std::vector<std::pair<Vector, Vector>>& snapshot_pairs,
                 const Dictionary& dict, std::optional<double> lambda_reg = std::nullopt);

/// Consecutive states of a trajectory as snapshot pairs.
std::vector<std::pair<Vector, Vector>> snapshot_pairs(const std::vector<Vector>& states);

/// z' = K z + w, y = C z + v.
struct KoopmanModel {
  Matrix K;
  Matrix C;
  Matrix Q_lift;
  Matrix R;
  std::shared_ptr<const Dictionary> dictionary;

  Index lifted_dim() const { return K.rows(); }
};

KoopmanModel make_koopman_model(Matrix K, Matrix C, Matrix Q_lift, Matrix R,
                                std::shared_ptr<const Dictionary> dict = nullptr);

struct LiftedStep {
  filter::GaussianBelief belief;
  filter::GaussianBelief predicted;
  cov::GainResult gain;
};

/// Linear Kalman step in lifted coordinates. Evaluates no Jacobians.
LiftedStep lifted_filter_step(const filter::GaussianBelief& belief, const KoopmanModel& model,
                              const Vector& y, const cov::Options& opts = {});

struct SpectrumReport {
  std::vector<std::complex<double>> eigenvalues;  // sorted by decreasing modulus
  double spectral_radius = 0.0;
  double modal_condition = 0.0;  // cond(V), V the eigenvector matrix
  bool unstable = false;         // spectral_radius >= 1
};

SpectrumReport spectrum(const KoopmanModel& model);
SpectrumReport spectrum(const Matrix& K);

/// z_t = V Lambda^t V^{-1} z0 for t = 0..T. Refuses when cond(V) > max_condition.
std::vector<Vector> modal_rollout(const KoopmanModel& model, const Vector& z0, Index T,
                                  double max_condition = 1e8);

}  // namespace kfl::koopman
