#include "kfl/model.hpp"

#include <cmath>
#include <sstream>

#include "kfl/rng.hpp"

namespace kfl::model {

namespace {

std::atomic<std::uint64_t> g_linearization_calls{0};

void check_output(const Vector& v, Index expected, const char* what) {
  if (v.size() != expected) {
    std::ostringstream os;
    os << what << " returned length " << v.size() << ", expected " << expected;
    throw DimensionError(os.str());
  }
}

void check_noise(const cov::NoiseCov& Q, Index d) {
  if (cov::noise_dim(Q) != d) {
    std::ostringstream os;
    os << "Q must be " << d << "x" << d << ", got dimension " << cov::noise_dim(Q);
    throw DimensionError(os.str());
  }
  if (const auto* m = std::get_if<Matrix>(&Q)) {
    linalg::require_psd(*m, "process noise Q");
  } else if (std::get<cov::ScaledIdentity>(Q).scale < 0.0) {
    throw DefinitenessError("process noise Q is a negative multiple of the identity",
                            std::get<cov::ScaledIdentity>(Q).scale);
  }
}

}  // namespace

std::uint64_t linearization_calls() { return g_linearization_calls.load(); }

Matrix jacobian_fd(const std::function<Vector(const Vector&)>& f, const Vector& x) {
  const double base_step = std::cbrt(std::numeric_limits<double>::epsilon());
  const Vector f0 = f(x);
  Matrix J(f0.size(), x.size());
  Vector xp = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double h = base_step * std::max(1.0, std::abs(x(i)));
    const double orig = xp(i);
    xp(i) = orig + h;
    const double hp = xp(i) - orig;  // exactly representable step
    const Vector fp = f(xp);
    xp(i) = orig - h;
    const double hm = orig - xp(i);
    const Vector fm = f(xp);
    xp(i) = orig;
    J.col(i) = (fp - fm) / (hp + hm);
  }
  return J;
}

StateSpaceModel::StateSpaceModel(Spec spec) : spec_(std::move(spec)) {
  if (spec_.state_dim < 0 || spec_.obs_dim <= 0 || spec_.input_dim < 0) {
    throw DimensionError("state_dim must be >= 0, obs_dim > 0, input_dim >= 0");
  }
  if (!spec_.transition) {
    if (spec_.state_dim == 0 || spec_.identity_transition) {
      spec_.transition = [](const Vector& x, const Vector&) { return x; };
      spec_.identity_transition = true;
    } else {
      throw Error("StateSpaceModel needs a transition map");
    }
  }
  if (!spec_.observation) throw Error("StateSpaceModel needs an observation map");
  check_noise(spec_.Q, spec_.state_dim);
  if (spec_.R.rows() != spec_.obs_dim || spec_.R.cols() != spec_.obs_dim) {
    std::ostringstream os;
    os << "R must be " << spec_.obs_dim << "x" << spec_.obs_dim << ", got " << spec_.R.rows()
       << "x" << spec_.R.cols();
    throw DimensionError(os.str());
  }
  linalg::require_symmetric(spec_.R, "observation noise R");
  const double rmin = linalg::min_sym_eigenvalue(spec_.R);
  if (!(rmin >= 1e-12)) {
    std::ostringstream os;
    os << "observation noise R must be positive definite: eigenvalue " << rmin << " < 1e-12";
    throw DefinitenessError(os.str(), rmin);
  }
}

Vector StateSpaceModel::transition(const Vector& x, const Vector& u) const {
  if (x.size() != spec_.state_dim) throw DimensionError("transition: state length mismatch");
  Vector out = spec_.transition(x, u);
  check_output(out, spec_.state_dim, "transition");
  return out;
}

Vector StateSpaceModel::observation(const Vector& x, const Vector& u) const {
  if (x.size() != spec_.state_dim) throw DimensionError("observation: state length mismatch");
  Vector out = spec_.observation(x, u);
  check_output(out, spec_.obs_dim, "observation");
  return out;
}

Matrix StateSpaceModel::transition_jacobian(const Vector& x, const Vector& u) const {
  if (!spec_.transition_jacobian) return transition_jacobian_fd(x, u);
  ++g_linearization_calls;
  Matrix J = spec_.transition_jacobian(x, u);
  if (J.rows() != spec_.state_dim || J.cols() != spec_.state_dim) {
    throw DimensionError("transition Jacobian has wrong shape");
  }
  return J;
}

Matrix StateSpaceModel::observation_jacobian(const Vector& x, const Vector& u) const {
  if (!spec_.observation_jacobian) return observation_jacobian_fd(x, u);
  ++g_linearization_calls;
  Matrix J = spec_.observation_jacobian(x, u);
  if (J.rows() != spec_.obs_dim || J.cols() != spec_.state_dim) {
    throw DimensionError("observation Jacobian has wrong shape");
  }
  return J;
}

Matrix StateSpaceModel::transition_jacobian_fd(const Vector& x, const Vector& u) const {
  ++g_linearization_calls;
  return jacobian_fd([&](const Vector& z) { return transition(z, u); }, x);
}

Matrix StateSpaceModel::observation_jacobian_fd(const Vector& x, const Vector& u) const {
  ++g_linearization_calls;
  return jacobian_fd([&](const Vector& z) { return observation(z, u); }, x);
}

StateSpaceModel make_linear_gaussian(const Matrix& A, const Matrix& C, const Matrix& Q,
                                     const Matrix& R) {
  linalg::require_square(A, "A");
  if (C.cols() != A.rows()) {
    std::ostringstream os;
    os << "C has " << C.cols() << " columns but A is " << A.rows() << "x" << A.cols();
    throw DimensionError(os.str());
  }
  StateSpaceModel::Spec s;
  s.state_dim = A.rows();
  s.obs_dim = C.rows();
  s.transition = [A](const Vector& x, const Vector&) -> Vector { return A * x; };
  s.transition_jacobian = [A](const Vector&, const Vector&) -> Matrix { return A; };
  s.observation = [C](const Vector& x, const Vector&) -> Vector { return C * x; };
  s.observation_jacobian = [C](const Vector&, const Vector&) -> Matrix { return C; };
  s.Q = Q;
  s.R = R;
  s.identity_transition = A.isIdentity(0.0);
  s.name = "linear_gaussian";
  return StateSpaceModel(std::move(s));
}

Matrix observability_matrix(const Matrix& A, const Matrix& C) {
  const Index n = A.rows();
  Matrix O(C.rows() * n, n);
  Matrix CAk = C;
  for (Index k = 0; k < n; ++k) {
    O.middleRows(k * C.rows(), C.rows()) = CAk;
    CAk = CAk * A;
  }
  return O;
}

AugmentedModel::AugmentedModel(StateSpaceModel base, Index param_dim, Matrix Q_theta,
                               Vector theta0, StateSpaceModel augmented)
    : base_(std::move(base)),
      param_dim_(param_dim),
      Q_theta_(std::move(Q_theta)),
      theta0_(std::move(theta0)),
      augmented_(std::move(augmented)) {}

Vector AugmentedModel::initial_state(const Vector& x0) const {
  if (x0.size() != base_.state_dim()) throw DimensionError("initial_state: x0 length mismatch");
  Vector z(base_.state_dim() + param_dim_);
  z << x0, theta0_;
  return z;
}

AugmentedModel augment_parameters(const StateSpaceModel& model, const Vector& theta0,
                                  const Matrix& Q_theta,
                                  const std::optional<ParametricMaps>& maps) {
  const Index n = model.state_dim();
  const Index p = theta0.size();
  if (Q_theta.rows() != p || Q_theta.cols() != p) {
    throw DimensionError("Q_theta must be param_dim x param_dim");
  }
  linalg::require_psd(Q_theta, "parameter diffusion Q_theta");

  StateSpaceModel::Spec s;
  s.state_dim = n + p;
  s.obs_dim = model.obs_dim();
  s.input_dim = model.input_dim();
  s.R = model.R();
  s.name = model.name() + "+params";
  Matrix Q = Matrix::Zero(n + p, n + p);
  Q.topLeftCorner(n, n) = cov::noise_dense(model.Q());
  Q.bottomRightCorner(p, p) = Q_theta;
  s.Q = Q;

  if (maps) {
    auto f = maps->transition;
    auto h = maps->observation;
    if (!f && n > 0) throw Error("augment_parameters: parametric transition missing");
    if (!h) throw Error("augment_parameters: parametric observation missing");
    s.transition = [f, n, p](const Vector& z, const Vector& u) -> Vector {
      Vector out(n + p);
      if (n > 0) out.head(n) = f(z.head(n), u, z.tail(p));
      out.tail(p) = z.tail(p);
      return out;
    };
    s.observation = [h, n, p](const Vector& z, const Vector& u) -> Vector {
      return h(z.head(n), u, z.tail(p));
    };
    s.identity_transition = (n == 0);
  } else {
    StateSpaceModel base = model;
    s.transition = [base, n, p](const Vector& z, const Vector& u) -> Vector {
      Vector out(n + p);
      if (n > 0) out.head(n) = base.transition(z.head(n), u);
      out.tail(p) = z.tail(p);
      return out;
    };
    s.observation = [base, n](const Vector& z, const Vector& u) -> Vector {
      return base.observation(z.head(n), u);
    };
    if (model.has_transition_jacobian() || n == 0) {
      s.transition_jacobian = [base, n, p](const Vector& z, const Vector& u) -> Matrix {
        Matrix J = Matrix::Identity(n + p, n + p);
        if (n > 0) J.topLeftCorner(n, n) = base.transition_jacobian(z.head(n), u);
        return J;
      };
    }
    if (model.has_observation_jacobian() || n == 0) {
      s.observation_jacobian = [base, n, p](const Vector& z, const Vector& u) -> Matrix {
        Matrix J = Matrix::Zero(base.obs_dim(), n + p);
        if (n > 0) J.leftCols(n) = base.observation_jacobian(z.head(n), u);
        return J;
      };
    }
    s.identity_transition = model.identity_transition();
  }
  StateSpaceModel augmented(std::move(s));
  return AugmentedModel(model, p, Q_theta, theta0, std::move(augmented));
}

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) return logits;
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp();
  return e / e.sum();
}

Matrix softmax_jacobian(const Vector& s) {
  Matrix J = -s * s.transpose();
  J.diagonal() += s;
  return J;
}

Vector probabilities(const CategoricalSoftmaxObs& obs, const Vector& h) {
  if (obs.W.cols() != h.size()) throw DimensionError("probabilities: W columns != hidden dim");
  return softmax(obs.W * h);
}

double log_likelihood(const CategoricalSoftmaxObs& obs, const Vector& h, Index token) {
  const Vector z = obs.W * h;
  if (token < 0 || token >= z.size()) throw DimensionError("log_likelihood: token out of range");
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z(token) - lse;
}

double log_likelihood(const GaussianObs& obs, const Vector& mean, const Vector& y) {
  const Vector r = y - mean;
  Eigen::LLT<Matrix> llt(obs.R);
  if (llt.info() != Eigen::Success) {
    throw SingularError("log_likelihood: R not PD", linalg::min_sym_eigenvalue(obs.R));
  }
  const double quad = r.dot(llt.solve(r));
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double m = static_cast<double>(y.size());
  return -0.5 * (quad + logdet + m * std::log(2.0 * M_PI));
}

Trajectory simulate(const StateSpaceModel& model, Index T, const Vector& x0, std::uint64_t seed,
                    const std::vector<Vector>& inputs) {
  if (T < 1) throw DimensionError("simulate: T must be >= 1");
  if (x0.size() != model.state_dim()) throw DimensionError("simulate: x0 length mismatch");
  if (!inputs.empty() && static_cast<Index>(inputs.size()) != T) {
    throw DimensionError("simulate: inputs must be empty or have length T");
  }
  const auto* iso = std::get_if<cov::ScaledIdentity>(&model.Q());
  const Matrix Lq = iso ? Matrix() : psd_factor(std::get<Matrix>(model.Q()));
  const Matrix Lr = psd_factor(model.R());

  Trajectory tr;
  tr.seed = seed;
  tr.states.reserve(T);
  tr.inputs.reserve(T);
  tr.observations.reserve(T);
  Vector x = x0;
  for (Index t = 0; t < T; ++t) {
    const Vector u_used = inputs.empty() ? Vector(Vector::Zero(model.input_dim())) : inputs[t];
    NoiseStream vnoise(seed, static_cast<std::uint64_t>(t), kObservationChannel);
    tr.states.push_back(x);
    tr.inputs.push_back(u_used);
    tr.observations.push_back(model.observation(x, u_used) + Lr * vnoise.normal(model.obs_dim()));
    if (t + 1 < T) {
      NoiseStream wnoise(seed, static_cast<std::uint64_t>(t), kProcessChannel);
      const Vector z = wnoise.normal(model.state_dim());
      const Vector w = iso ? Vector(std::sqrt(iso->scale) * z) : Vector(Lq * z);
      x = model.transition(x, u_used) + w;
    }
  }
  return tr;
}

double jacobian_check(const StateSpaceModel& model, int probes, std::uint64_t seed) {
  double worst = 0.0;
  for (int k = 0; k < probes; ++k) {
    NoiseStream rng(seed, static_cast<std::uint64_t>(k), 7);
    const Vector x = rng.normal(model.state_dim());
    const Vector u = rng.normal(model.input_dim());
    auto rel = [](const Matrix& a, const Matrix& b) {
      return (a - b).norm() / std::max(1.0, b.norm());
    };
    if (model.has_transition_jacobian()) {
      worst = std::max(worst, rel(model.transition_jacobian(x, u),
                                  model.transition_jacobian_fd(x, u)));
    }
    if (model.has_observation_jacobian()) {
      worst = std::max(worst, rel(model.observation_jacobian(x, u),
                                  model.observation_jacobian_fd(x, u)));
    }
  }
  return worst;
}

}  // namespace kfl::model
