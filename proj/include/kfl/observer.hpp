#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "kfl/covariance.hpp"
#include "kfl/filter.hpp"

namespace kfl::observer {

enum class Activation { tanh, identity };

/// Single recurrent block h' = act(A h + E[x] + b), emission p(y | h) = softmax(W h).
struct ToyDecoder {
  Matrix A;          // d x d
  Matrix embedding;  // V x d, row x is the embedding of token x
  Vector b;          // d
  Matrix W;          // V x d
  Activation activation = Activation::tanh;
  Matrix Q;          // process noise on h, d x d

  Index hidden_dim() const { return A.rows(); }
  Index vocab() const { return W.rows(); }

  /// Token kDropped feeds a zero embedding.
  Vector transition(const Vector& h, long token) const;
  Matrix transition_jacobian(const Vector& h, long token) const;
  Vector probabilities(const Vector& h) const;
  /// d s / d h = (diag(s) - s s^T) W
  Matrix emission_jacobian(const Vector& h) const;
};

inline constexpr long kDropped = -1;

/// Checks shapes and finiteness.
void validate(const ToyDecoder& dec);

/// Random decoder: A scaled to spectral norm `recurrent_scale`, Gaussian
/// embeddings and emission rows with the given scales, Q = q I.
ToyDecoder make_random_decoder(Index hidden_dim, Index vocab, std::uint64_t seed,
                               double recurrent_scale = 0.9, double embedding_scale = 1.0,
                               double emission_scale = 2.0, double q = 1e-3);

/// Max spectral norm of the transition Jacobian over random states and tokens.
double lipschitz_estimate(const ToyDecoder& dec, int samples, std::uint64_t seed);

struct ObserverState {
  filter::GaussianBelief belief;  // over h_t
  long step = 0;
};

ObserverState make_observer_state(const Vector& mean, double sigma0_sq);

struct DecodeResult {
  Vector probabilities;     // softmax(W mu_pred)
  ObserverState predicted;
  Matrix F_jacobian;        // transition Jacobian at the previous mean
};

/// EKF predict through the decoder transition followed by the emission.
DecodeResult decode_step(const ObserverState& state, const ToyDecoder& dec, long token_in,
                         const cov::Options& opts = {});

/// diag(s) - s s^T + eps I
Matrix default_observation_noise(const Vector& s, double eps = 1e-6);

struct CorrectionResult {
  ObserverState state;
  Vector probabilities;  // s at the predicted mean
  Vector innovation;     // e_y - s
  Matrix H;              // emission Jacobian at the predicted mean
  Matrix K;
  Vector correction;     // K (e_y - s)
};

/// Kalman correction of the activation belief after observing `token`.
/// R_obs defaults to default_observation_noise(s).
CorrectionResult innovation_correct(const ObserverState& state, const ToyDecoder& dec,
                                    Index token, const std::optional<Matrix>& R_obs = std::nullopt,
                                    const cov::Options& opts = {});

/// rho((I - K H) F')
double observer_stability(const Matrix& F_jacobian, const Matrix& K, const Matrix& H);

// ---- shift-robustness protocol ----

struct StreamSet {
  std::vector<Index> tokens;  // x_0 .. x_T from the teacher
  std::vector<long> inputs;   // perturbed copies of x_0 .. x_{T-1}; kDropped for dropout
  Vector h0;
};

/// Teacher rollout from h0 = 0 with tokens sampled from softmax(W h), then
/// input corruption: dropout with probability `dropout`, otherwise replacement by
/// a uniform random token with probability `vocab_perturb`.
StreamSet generate_streams(const ToyDecoder& teacher, Index T, std::uint64_t seed, double dropout,
                           double vocab_perturb);

struct ShiftConfig {
  Index T = 500;
  double dropout = 0.1;
  double vocab_perturb = 0.0;
  double sigma0_sq = 1e-3;
  double r_eps = 1e-6;
};

/// Average per-token NLL of the clean next tokens, feeding either the clean or
/// the perturbed inputs, with or without innovation correction.
double stream_nll(const ToyDecoder& dec, const StreamSet& streams, bool perturbed,
                  bool with_correction, const ShiftConfig& cfg);

struct ShiftRow {
  std::uint64_t seed = 0;
  double clean_plain = 0.0;
  double clean_corrected = 0.0;
  double perturbed_plain = 0.0;
  double perturbed_corrected = 0.0;
};

struct PairedStats {
  double mean_diff = 0.0;      // mean of (corrected - plain)
  double std_error = 0.0;
  double frac_improved = 0.0;  // fraction of seeds with corrected < plain
};

struct ShiftReport {
  std::vector<ShiftRow> rows;
  PairedStats clean;
  PairedStats perturbed;
};

/// One teacher-generated stream per seed; the evaluated decoder is the teacher
/// itself, so the only mismatch is the input corruption.
ShiftReport shift_robustness_eval(const ToyDecoder& dec, const std::vector<std::uint64_t>& seeds,
                                  const ShiftConfig& cfg, unsigned jobs = 1);

}  // namespace kfl::observer
