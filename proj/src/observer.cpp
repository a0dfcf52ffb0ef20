#include "kfl/observer.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "kfl/model.hpp"
#include "kfl/parallel.hpp"
#include "kfl/rng.hpp"

namespace kfl::observer {

namespace {

Vector pre_activation(const ToyDecoder& dec, const Vector& h, long token) {
  Vector a = dec.A * h + dec.b;
  if (token != kDropped) {
    if (token < 0 || token >= dec.vocab()) throw DimensionError("token index out of range");
    a += dec.embedding.row(token).transpose();
  }
  return a;
}

Index sample_categorical(const Vector& p, double u) {
  double acc = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    acc += p(i);
    if (u < acc) return i;
  }
  return p.size() - 1;
}

PairedStats paired(const std::vector<double>& corrected, const std::vector<double>& plain) {
  PairedStats st;
  const std::size_t n = corrected.size();
  if (n == 0) return st;
  std::vector<double> diff(n);
  int improved = 0;
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = corrected[i] - plain[i];
    improved += corrected[i] < plain[i] ? 1 : 0;
  }
  st.mean_diff = pairwise_sum(diff) / static_cast<double>(n);
  if (n > 1) {
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) sq[i] = (diff[i] - st.mean_diff) * (diff[i] - st.mean_diff);
    st.std_error = std::sqrt(pairwise_sum(sq) / static_cast<double>(n - 1) / static_cast<double>(n));
  }
  st.frac_improved = static_cast<double>(improved) / static_cast<double>(n);
  return st;
}

}  // namespace

Vector ToyDecoder::transition(const Vector& h, long token) const {
  if (h.size() != hidden_dim()) throw DimensionError("decoder: hidden state length mismatch");
  const Vector a = pre_activation(*this, h, token);
  return activation == Activation::tanh ? Vector(a.array().tanh()) : a;
}

Matrix ToyDecoder::transition_jacobian(const Vector& h, long token) const {
  if (h.size() != hidden_dim()) throw DimensionError("decoder: hidden state length mismatch");
  if (activation == Activation::identity) return A;
  const Vector t = pre_activation(*this, h, token).array().tanh();
  const Vector deriv = (1.0 - t.array().square()).matrix();
  return deriv.asDiagonal() * A;
}

Vector ToyDecoder::probabilities(const Vector& h) const { return model::softmax(W * h); }

Matrix ToyDecoder::emission_jacobian(const Vector& h) const {
  return model::softmax_jacobian(probabilities(h)) * W;
}

void validate(const ToyDecoder& dec) {
  const Index d = dec.A.rows();
  if (dec.A.cols() != d) throw DimensionError("decoder: A must be square");
  if (dec.b.size() != d) throw DimensionError("decoder: b must have length d");
  if (dec.W.cols() != d) throw DimensionError("decoder: W must be V x d");
  if (dec.embedding.rows() != dec.W.rows() || dec.embedding.cols() != d) {
    throw DimensionError("decoder: embedding must be V x d");
  }
  if (dec.Q.rows() != d || dec.Q.cols() != d) throw DimensionError("decoder: Q must be d x d");
  if (!dec.A.allFinite() || !dec.W.allFinite() || !dec.embedding.allFinite() ||
      !dec.b.allFinite()) {
    throw NonFiniteError("decoder: non-finite parameters", -1);
  }
  linalg::require_psd(dec.Q, "decoder Q");
}

ToyDecoder make_random_decoder(Index d, Index V, std::uint64_t seed, double recurrent_scale,
                               double embedding_scale, double emission_scale, double q) {
  if (d < 1 || V < 2) throw Error("decoder needs d >= 1 and V >= 2");
  auto draw = [&](std::uint64_t channel, Index rows, Index cols) {
    NoiseStream ns(seed, 0, channel);
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j) {
      for (Index i = 0; i < rows; ++i) m(i, j) = ns.normal();
    }
    return m;
  };
  ToyDecoder dec;
  dec.A = draw(0, d, d);
  const double norm = linalg::spectral_norm(dec.A);
  dec.A *= recurrent_scale / norm;
  dec.embedding = draw(1, V, d) * (embedding_scale / std::sqrt(static_cast<double>(d)));
  dec.b = Vector::Zero(d);
  dec.W = draw(2, V, d) * (emission_scale / std::sqrt(static_cast<double>(d)));
  dec.Q = q * Matrix::Identity(d, d);
  validate(dec);
  return dec;
}

double lipschitz_estimate(const ToyDecoder& dec, int samples, std::uint64_t seed) {
  double best = 0.0;
  for (int k = 0; k < samples; ++k) {
    NoiseStream ns(seed, static_cast<std::uint64_t>(k), 0);
    const Vector h = ns.normal(dec.hidden_dim());
    const long token = static_cast<long>(ns.bits() % static_cast<std::uint64_t>(dec.vocab()));
    best = std::max(best, linalg::spectral_norm(dec.transition_jacobian(h, token)));
  }
  return best;
}

ObserverState make_observer_state(const Vector& mean, double sigma0_sq) {
  if (!(sigma0_sq > 0.0)) throw Error("observer: initial variance must be positive");
  return ObserverState{filter::isotropic_belief(mean, sigma0_sq), 0};
}

DecodeResult decode_step(const ObserverState& state, const ToyDecoder& dec, long token_in,
                         const cov::Options& opts) {
  const Vector& mu = state.belief.mean;
  DecodeResult out;
  out.F_jacobian = dec.transition_jacobian(mu, token_in);
  out.predicted.belief.mean = dec.transition(mu, token_in);
  out.predicted.belief.cov = cov::predict_cov(state.belief.cov, out.F_jacobian, dec.Q, opts);
  out.predicted.belief.step = state.belief.step + 1;
  out.predicted.step = state.step + 1;
  if (!out.predicted.belief.mean.allFinite()) {
    throw NonFiniteError("decode_step: non-finite hidden state", state.step);
  }
  out.probabilities = dec.probabilities(out.predicted.belief.mean);
  return out;
}

Matrix default_observation_noise(const Vector& s, double eps) {
  Matrix R = model::softmax_jacobian(s);
  R.diagonal().array() += eps;
  return R;
}

CorrectionResult innovation_correct(const ObserverState& state, const ToyDecoder& dec,
                                    Index token, const std::optional<Matrix>& R_obs,
                                    const cov::Options& opts) {
  if (token < 0 || token >= dec.vocab()) {
    std::ostringstream os;
    os << "observed token " << token << " outside vocabulary of size " << dec.vocab();
    throw DimensionError(os.str());
  }
  const Vector& mu = state.belief.mean;
  CorrectionResult out;
  out.probabilities = dec.probabilities(mu);
  out.H = model::softmax_jacobian(out.probabilities) * dec.W;
  const Matrix R = R_obs ? *R_obs : default_observation_noise(out.probabilities);
  linalg::require_pd(R, "R_obs");

  out.innovation = -out.probabilities;
  out.innovation(token) += 1.0;

  cov::Options o = opts;
  o.audit = false;
  const cov::GainResult g = cov::gain(state.belief.cov, out.H, R, o);
  out.K = g.K;
  out.correction = g.K * out.innovation;
  out.state.belief.mean = mu + out.correction;
  out.state.belief.cov = cov::measurement_update(state.belief.cov, g.K, out.H, R, o);
  out.state.belief.step = state.belief.step;
  out.state.step = state.step;
  return out;
}

double observer_stability(const Matrix& F_jacobian, const Matrix& K, const Matrix& H) {
  const Index d = F_jacobian.rows();
  if (K.rows() != d || H.cols() != d || K.cols() != H.rows()) {
    throw DimensionError("observer_stability: shape mismatch");
  }
  return linalg::spectral_radius((Matrix::Identity(d, d) - K * H) * F_jacobian);
}

StreamSet generate_streams(const ToyDecoder& teacher, Index T, std::uint64_t seed, double dropout,
                           double vocab_perturb) {
  if (dropout < 0 || dropout > 1 || vocab_perturb < 0 || vocab_perturb > 1) {
    throw Error("perturbation probabilities must lie in [0, 1]");
  }
  StreamSet s;
  s.h0 = Vector::Zero(teacher.hidden_dim());
  Vector h = s.h0;
  for (Index t = 0; t <= T; ++t) {
    NoiseStream ns(seed, static_cast<std::uint64_t>(t), 0);
    const Index tok = sample_categorical(teacher.probabilities(h), ns.uniform());
    s.tokens.push_back(tok);
    if (t < T) h = teacher.transition(h, static_cast<long>(tok));
  }
  for (Index t = 0; t < T; ++t) {
    NoiseStream ns(seed, static_cast<std::uint64_t>(t), 1);
    const double u = ns.uniform();
    const double v = ns.uniform();
    long in = static_cast<long>(s.tokens[t]);
    if (u < dropout) {
      in = kDropped;
    } else if (v < vocab_perturb) {
      in = static_cast<long>(ns.bits() % static_cast<std::uint64_t>(teacher.vocab()));
    }
    s.inputs.push_back(in);
  }
  return s;
}

double stream_nll(const ToyDecoder& dec, const StreamSet& streams, bool perturbed,
                  bool with_correction, const ShiftConfig& cfg) {
  const Index T = static_cast<Index>(streams.inputs.size());
  if (T == 0) return 0.0;
  ObserverState state = make_observer_state(streams.h0, cfg.sigma0_sq);
  double total = 0.0;
  for (Index t = 0; t < T; ++t) {
    const long in = perturbed ? streams.inputs[t] : static_cast<long>(streams.tokens[t]);
    DecodeResult dr = decode_step(state, dec, in);
    const Index target = streams.tokens[t + 1];
    total -= std::log(std::max(dr.probabilities(target), 1e-300));
    if (with_correction) {
      const Matrix R = default_observation_noise(dr.probabilities, cfg.r_eps);
      state = innovation_correct(dr.predicted, dec, target, R).state;
    } else {
      state = std::move(dr.predicted);
    }
  }
  return total / static_cast<double>(T);
}

ShiftReport shift_robustness_eval(const ToyDecoder& dec, const std::vector<std::uint64_t>& seeds,
                                  const ShiftConfig& cfg, unsigned jobs) {
  validate(dec);
  ShiftReport rep;
  rep.rows.resize(seeds.size());
  parallel_for(seeds.size(), jobs, [&](std::size_t i) {
    const StreamSet s = generate_streams(dec, cfg.T, seeds[i], cfg.dropout, cfg.vocab_perturb);
    ShiftRow& row = rep.rows[i];
    row.seed = seeds[i];
    row.clean_plain = stream_nll(dec, s, false, false, cfg);
    row.clean_corrected = stream_nll(dec, s, false, true, cfg);
    row.perturbed_plain = stream_nll(dec, s, true, false, cfg);
    row.perturbed_corrected = stream_nll(dec, s, true, true, cfg);
  });
  std::vector<double> cc, cp, pc, pp;
  for (const auto& r : rep.rows) {
    cc.push_back(r.clean_corrected);
    cp.push_back(r.clean_plain);
    pc.push_back(r.perturbed_corrected);
    pp.push_back(r.perturbed_plain);
  }
  rep.clean = paired(cc, cp);
  rep.perturbed = paired(pc, pp);
  return rep;
}

}  // namespace kfl::observer
