#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "kfl/covariance.hpp"
#include "kfl/linalg.hpp"

namespace kfl::model {

/// (state, input) -> vector
using Map = std::function<Vector(const Vector& x, const Vector& u)>;
/// (state, input) -> Jacobian with respect to the state
using JacobianMap = std::function<Matrix(const Vector& x, const Vector& u)>;

/// Central-difference Jacobian with per-coordinate step cbrt(eps) * max(1, |x_i|).
Matrix jacobian_fd(const std::function<Vector(const Vector&)>& f, const Vector& x);

/// Number of Jacobian evaluations (analytic or finite-difference) performed by
/// any StateSpaceModel in this process. Linearization-free code paths can
/// assert that this does not move.
std::uint64_t linearization_calls();

/// Discrete-time system x' = f(x, u) + w, y = h(x, u) + v with w ~ N(0, Q),
/// v ~ N(0, R). Immutable after construction.
class StateSpaceModel {
 public:
  struct Spec {
    Index state_dim = 0;
    Index obs_dim = 0;
    Index input_dim = 0;
    Map transition;
    JacobianMap transition_jacobian;  // optional
    Map observation;
    JacobianMap observation_jacobian;  // optional
    cov::NoiseCov Q = Matrix();
    Matrix R;
    /// f(x, u) == x exactly; lets filters skip the d x d Jacobian.
    bool identity_transition = false;
    std::string name;
  };

  explicit StateSpaceModel(Spec spec);

  Index state_dim() const { return spec_.state_dim; }
  Index obs_dim() const { return spec_.obs_dim; }
  Index input_dim() const { return spec_.input_dim; }
  const cov::NoiseCov& Q() const { return spec_.Q; }
  const Matrix& R() const { return spec_.R; }
  bool identity_transition() const { return spec_.identity_transition; }
  bool has_transition_jacobian() const { return static_cast<bool>(spec_.transition_jacobian); }
  bool has_observation_jacobian() const { return static_cast<bool>(spec_.observation_jacobian); }
  const std::string& name() const { return spec_.name; }
  const Spec& spec() const { return spec_; }

  Vector transition(const Vector& x, const Vector& u = Vector()) const;
  Vector observation(const Vector& x, const Vector& u = Vector()) const;

  /// Analytic Jacobian when supplied, finite differences otherwise.
  Matrix transition_jacobian(const Vector& x, const Vector& u = Vector()) const;
  Matrix observation_jacobian(const Vector& x, const Vector& u = Vector()) const;

  /// Jacobians from finite differences regardless of analytic availability.
  Matrix transition_jacobian_fd(const Vector& x, const Vector& u = Vector()) const;
  Matrix observation_jacobian_fd(const Vector& x, const Vector& u = Vector()) const;

 private:
  Spec spec_;
};

/// Linear-Gaussian model x' = A x, y = C x with analytic Jacobians.
StateSpaceModel make_linear_gaussian(const Matrix& A, const Matrix& C, const Matrix& Q,
                                     const Matrix& R);

/// Observability matrix [C; CA; ...; CA^{n-1}].
Matrix observability_matrix(const Matrix& A, const Matrix& C);

/// Maps of a model whose dynamics depend on a parameter vector theta.
struct ParametricMaps {
  std::function<Vector(const Vector& x, const Vector& u, const Vector& theta)> transition;
  std::function<Vector(const Vector& x, const Vector& u, const Vector& theta)> observation;
};

/// Joint state z = [x; theta] with theta propagating unchanged plus diffusion.
class AugmentedModel {
 public:
  AugmentedModel(StateSpaceModel base, Index param_dim, Matrix Q_theta, Vector theta0,
                 StateSpaceModel augmented);

  const StateSpaceModel& base() const { return base_; }
  const StateSpaceModel& state_space() const { return augmented_; }
  Index param_dim() const { return param_dim_; }
  Index state_dim() const { return augmented_.state_dim(); }
  const Matrix& Q_theta() const { return Q_theta_; }
  const Vector& theta0() const { return theta0_; }

  /// [x0; theta0]
  Vector initial_state(const Vector& x0) const;

 private:
  StateSpaceModel base_;
  Index param_dim_;
  Matrix Q_theta_;
  Vector theta0_;
  StateSpaceModel augmented_;
};

/// Augment a model with parameters. Without maps the parameters do not enter
/// the dynamics (pure static-parameter tracking).
AugmentedModel augment_parameters(const StateSpaceModel& model, const Vector& theta0,
                                  const Matrix& Q_theta,
                                  const std::optional<ParametricMaps>& maps = std::nullopt);

// ---- observation likelihoods ----

struct GaussianObs {
  Matrix R;
};

/// p(y = i | h) = softmax(W h)_i with W of shape V x d.
struct CategoricalSoftmaxObs {
  Matrix W;
};

using ObservationLikelihood = std::variant<GaussianObs, CategoricalSoftmaxObs>;

/// Numerically stable softmax.
Vector softmax(const Vector& logits);

/// diag(s) - s s^T
Matrix softmax_jacobian(const Vector& s);

Vector probabilities(const CategoricalSoftmaxObs& obs, const Vector& h);

/// log p(y | h)
double log_likelihood(const CategoricalSoftmaxObs& obs, const Vector& h, Index token);
double log_likelihood(const GaussianObs& obs, const Vector& mean, const Vector& y);

// ---- trajectories ----

struct Trajectory {
  std::vector<Vector> states;        // x_0 .. x_{T-1}
  std::vector<Vector> inputs;        // u_0 .. u_{T-1} (possibly empty vectors)
  std::vector<Vector> observations;  // y_0 .. y_{T-1}
  std::uint64_t seed = 0;

  std::size_t size() const { return states.size(); }
};

/// Noise channels used by simulate.
inline constexpr std::uint64_t kProcessChannel = 0;
inline constexpr std::uint64_t kObservationChannel = 1;

/// Roll the model forward T steps from x0 with seeded noise. Pure in its arguments.
Trajectory simulate(const StateSpaceModel& model, Index T, const Vector& x0, std::uint64_t seed,
                    const std::vector<Vector>& inputs = {});

/// Max relative Frobenius error between analytic and finite-difference
/// Jacobians over `probes` random points (standard normal states and inputs).
/// Returns 0 when no analytic Jacobian is attached.
double jacobian_check(const StateSpaceModel& model, int probes, std::uint64_t seed);

}  // namespace kfl::model
