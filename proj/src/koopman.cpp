#include "kfl/koopman.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/SVD>

namespace kfl::koopman {

namespace {

void exponent_tuples(Index n, int degree, Index pos, std::vector<int>& cur,
                     std::vector<std::vector<int>>& out) {
  if (pos == n - 1) {
    cur[pos] = degree;
    out.push_back(cur);
    return;
  }
  for (int e = degree; e >= 0; --e) {
    cur[pos] = e;
    exponent_tuples(n, degree - e, pos + 1, cur, out);
  }
}

std::string monomial_name(const std::vector<int>& exps) {
  std::ostringstream os;
  bool first = true;
  for (size_t i = 0; i < exps.size(); ++i) {
    if (exps[i] == 0) continue;
    if (!first) os << "*";
    os << "x" << (i + 1);
    if (exps[i] > 1) os << "^" << exps[i];
    first = false;
  }
  return os.str();
}

}  // namespace

Dictionary::Dictionary(Index state_dim, std::vector<Observable> observables,
                       std::vector<Index> coordinates)
    : state_dim_(state_dim),
      observables_(std::move(observables)),
      coordinates_(std::move(coordinates)) {
  if (observables_.empty()) throw Error("Dictionary needs at least one observable");
  if (!coordinates_.empty() && static_cast<Index>(coordinates_.size()) != state_dim_) {
    throw DimensionError("Dictionary coordinate map must cover every state coordinate");
  }
  for (Index c : coordinates_) {
    if (c < 0 || c >= lifted_dim()) throw DimensionError("Dictionary coordinate index out of range");
  }
}

Dictionary Dictionary::identity(Index n) {
  std::vector<Observable> obs;
  std::vector<Index> coords;
  for (Index i = 0; i < n; ++i) {
    obs.push_back({"x" + std::to_string(i + 1), [i](const Vector& x) { return x(i); }});
    coords.push_back(i);
  }
  return Dictionary(n, std::move(obs), std::move(coords));
}

Dictionary Dictionary::monomials(Index n, int degree) {
  if (degree < 1) throw Error("monomials: degree must be >= 1");
  std::vector<Observable> obs;
  std::vector<Index> coords(n);
  for (int deg = 1; deg <= degree; ++deg) {
    std::vector<std::vector<int>> tuples;
    std::vector<int> cur(n, 0);
    exponent_tuples(n, deg, 0, cur, tuples);
    for (const auto& exps : tuples) {
      if (deg == 1) {
        const auto it = std::find(exps.begin(), exps.end(), 1);
        coords[it - exps.begin()] = static_cast<Index>(obs.size());
      }
      obs.push_back({monomial_name(exps), [exps](const Vector& x) {
                       double v = 1.0;
                       for (size_t i = 0; i < exps.size(); ++i) {
                         for (int k = 0; k < exps[i]; ++k) v *= x(static_cast<Index>(i));
                       }
                       return v;
                     }});
    }
  }
  return Dictionary(n, std::move(obs), std::move(coords));
}

Dictionary Dictionary::radial_bumps(Index n, const std::vector<Vector>& centers, double width,
                                    bool include_coordinates) {
  if (!(width > 0.0)) throw Error("radial_bumps: width must be positive");
  std::vector<Observable> obs;
  std::vector<Index> coords;
  if (include_coordinates) {
    for (Index i = 0; i < n; ++i) {
      obs.push_back({"x" + std::to_string(i + 1), [i](const Vector& x) { return x(i); }});
      coords.push_back(i);
    }
  }
  const double inv = 1.0 / (2.0 * width * width);
  for (size_t k = 0; k < centers.size(); ++k) {
    if (centers[k].size() != n) throw DimensionError("radial_bumps: center dimension mismatch");
    const Vector c = centers[k];
    obs.push_back({"bump" + std::to_string(k),
                   [c, inv](const Vector& x) { return std::exp(-(x - c).squaredNorm() * inv); }});
  }
  return Dictionary(n, std::move(obs), std::move(coords));
}

Dictionary Dictionary::from_spec(const std::string& spec, Index state_dim) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.empty()) throw Error("empty dictionary spec");
  try {
    if (parts[0] == "identity" && parts.size() == 1) return identity(state_dim);
    if (parts[0] == "monomials" && parts.size() == 2) {
      return monomials(state_dim, std::stoi(parts[1]));
    }
    if (parts[0] == "bumps" && parts.size() == 5) {
      const int per_axis = std::stoi(parts[1]);
      const double lo = std::stod(parts[2]);
      const double hi = std::stod(parts[3]);
      const double width = std::stod(parts[4]);
      if (per_axis < 1) throw Error("bumps: need at least one center per axis");
      std::vector<Vector> centers;
      std::vector<int> idx(state_dim, 0);
      while (true) {
        Vector c(state_dim);
        for (Index i = 0; i < state_dim; ++i) {
          c(i) = per_axis == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * idx[i] / (per_axis - 1);
        }
        centers.push_back(c);
        Index k = 0;
        while (k < state_dim && ++idx[k] == per_axis) idx[k++] = 0;
        if (k == state_dim) break;
      }
      return radial_bumps(state_dim, centers, width, true);
    }
  } catch (const std::invalid_argument&) {
  } catch (const std::out_of_range&) {
  }
  throw Error("unrecognized dictionary spec '" + spec +
              "' (expected identity, monomials:<deg> or bumps:<n>:<lo>:<hi>:<width>)");
}

std::vector<std::string> Dictionary::names() const {
  std::vector<std::string> out;
  for (const auto& o : observables_) out.push_back(o.name);
  return out;
}

Vector Dictionary::lift(const Vector& x) const {
  if (x.size() != state_dim_) throw DimensionError("lift: state length mismatch");
  Vector z(lifted_dim());
  for (Index i = 0; i < lifted_dim(); ++i) z(i) = observables_[i].fn(x);
  return z;
}

Matrix Dictionary::projection() const {
  if (coordinates_.empty()) throw Error("dictionary has no coordinate observables");
  Matrix P = Matrix::Zero(state_dim_, lifted_dim());
  for (Index i = 0; i < state_dim_; ++i) P(i, coordinates_[i]) = 1.0;
  return P;
}

std::vector<std::pair<Vector, Vector>> snapshot_pairs(const std::vector<Vector>& states) {
  std::vector<std::pair<Vector, Vector>> out;
  for (size_t t = 0; t + 1 < states.size(); ++t) out.emplace_back(states[t], states[t + 1]);
  return out;
}

EdmdFit edmd_fit(const std::vector<std::pair<Vector, Vector>>& pairs, const Dictionary& dict,
                 std::optional<double> lambda_reg) {
  const Index d = dict.lifted_dim();
  const Index N = static_cast<Index>(pairs.size());
  if (N < d) {
    std::ostringstream os;
    os << "edmd_fit: " << N << " snapshot pairs cannot determine a " << d
       << "-dimensional operator (rank deficiency)";
    throw SingularError(os.str(), 0.0);
  }
  Matrix PhiX(N, d), PhiY(N, d);
  for (Index t = 0; t < N; ++t) {
    PhiX.row(t) = dict.lift(pairs[t].first).transpose();
    PhiY.row(t) = dict.lift(pairs[t].second).transpose();
  }

  Eigen::JacobiSVD<Matrix> svd(PhiX, Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double cutoff = 1e-10 * std::max(sv(0), 1e-300);
  Index rank = 0;
  for (Index i = 0; i < sv.size(); ++i) rank += sv(i) > cutoff ? 1 : 0;
  if (rank < d) {
    const auto names = dict.names();
    std::ostringstream os;
    os << "edmd_fit: lifted snapshots have rank " << rank << " < " << d
       << "; deficient directions:";
    for (Index k = rank; k < d; ++k) {
      const Vector v = svd.matrixV().col(k);
      os << " [";
      bool first = true;
      for (Index i = 0; i < d; ++i) {
        if (std::abs(v(i)) < 0.1) continue;
        os << (first ? "" : " ") << (v(i) >= 0 ? "+" : "") << v(i) << "*" << names[i];
        first = false;
      }
      os << "]";
    }
    throw SingularError(os.str(), rank < sv.size() ? sv(rank) : 0.0);
  }

  const Matrix G = PhiX.transpose() * PhiX;
  const double lambda = lambda_reg.value_or(1e-10 * G.trace() / static_cast<double>(d));
  Matrix Greg = G;
  Greg.diagonal().array() += lambda;
  const Matrix Kt = Greg.ldlt().solve(PhiX.transpose() * PhiY);

  EdmdFit fit;
  fit.K = Kt.transpose();
  fit.residual = (PhiY - PhiX * Kt).norm();
  const double ny = PhiY.norm();
  fit.relative_residual = ny > 0 ? fit.residual / ny : fit.residual;
  fit.rank = rank;
  fit.regularization = lambda;
  return fit;
}

KoopmanModel make_koopman_model(Matrix K, Matrix C, Matrix Q_lift, Matrix R,
                                std::shared_ptr<const Dictionary> dict) {
  linalg::require_square(K, "K");
  if (!K.allFinite()) throw NonFiniteError("Koopman operator K is not finite", -1);
  if (C.cols() != K.rows()) throw DimensionError("C columns must equal the lifted dimension");
  if (Q_lift.rows() != K.rows() || Q_lift.cols() != K.rows()) {
    throw DimensionError("Q_lift must be d x d");
  }
  if (R.rows() != C.rows() || R.cols() != C.rows()) throw DimensionError("R must be m x m");
  if (dict && dict->lifted_dim() != K.rows()) {
    throw DimensionError("dictionary size does not match K");
  }
  linalg::require_psd(Q_lift, "Q_lift");
  linalg::require_pd(R, "R");
  return KoopmanModel{std::move(K), std::move(C), std::move(Q_lift), std::move(R), std::move(dict)};
}

LiftedStep lifted_filter_step(const filter::GaussianBelief& belief, const KoopmanModel& model,
                              const Vector& y, const cov::Options& opts) {
  if (belief.mean.size() != model.lifted_dim()) {
    throw DimensionError("lifted_filter_step: belief dimension mismatch");
  }
  if (!y.allFinite()) throw NonFiniteError("lifted_filter_step: observation not finite", belief.step);
  LiftedStep out;
  out.predicted.step = belief.step + 1;
  out.predicted.mean = model.K * belief.mean;
  out.predicted.cov = cov::predict_cov(belief.cov, model.K, model.Q_lift, opts);
  const Vector residual = y - model.C * out.predicted.mean;
  out.gain = cov::gain(out.predicted.cov, model.C, model.R, opts);
  out.belief.step = out.predicted.step;
  out.belief.mean = out.predicted.mean + out.gain.K * residual;
  out.belief.cov = cov::measurement_update(out.predicted.cov, out.gain.K, model.C, model.R, opts);
  return out;
}

SpectrumReport spectrum(const Matrix& K) {
  linalg::require_square(K, "K");
  Eigen::EigenSolver<Matrix> es(K, true);
  SpectrumReport rep;
  const auto& ev = es.eigenvalues();
  for (Index i = 0; i < ev.size(); ++i) rep.eigenvalues.push_back(ev(i));
  std::stable_sort(rep.eigenvalues.begin(), rep.eigenvalues.end(),
                   [](auto a, auto b) { return std::abs(a) > std::abs(b); });
  rep.spectral_radius = rep.eigenvalues.empty() ? 0.0 : std::abs(rep.eigenvalues.front());
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(es.eigenvectors());
  const auto& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  rep.modal_condition = smin > 0 ? sv(0) / smin : INFINITY;
  rep.unstable = rep.spectral_radius >= 1.0;
  return rep;
}

SpectrumReport spectrum(const KoopmanModel& model) { return spectrum(model.K); }

std::vector<Vector> modal_rollout(const KoopmanModel& model, const Vector& z0, Index T,
                                  double max_condition) {
  if (z0.size() != model.lifted_dim()) throw DimensionError("modal_rollout: z0 length mismatch");
  Eigen::EigenSolver<Matrix> es(model.K, true);
  const Eigen::MatrixXcd V = es.eigenvectors();
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(V);
  const auto& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  const double cond = smin > 0 ? sv(0) / smin : INFINITY;
  if (!(cond <= max_condition)) {
    std::ostringstream os;
    os << "modal_rollout: eigenvector matrix condition number " << cond << " exceeds "
       << max_condition << " (K is defective or nearly so)";
    throw SingularError(os.str(), smin);
  }
  const Eigen::VectorXcd lambda = es.eigenvalues();
  const Eigen::VectorXcd coeffs = V.partialPivLu().solve(z0.cast<std::complex<double>>());
  std::vector<Vector> out;
  out.reserve(T + 1);
  for (Index t = 0; t <= T; ++t) {
    Eigen::VectorXcd scaled(lambda.size());
    for (Index i = 0; i < lambda.size(); ++i) {
      scaled(i) = std::pow(lambda(i), static_cast<double>(t)) * coeffs(i);
    }
    out.push_back((V * scaled).real());
  }
  return out;
}

}  // namespace kfl::koopman
