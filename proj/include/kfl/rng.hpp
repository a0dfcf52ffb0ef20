#pragma once

#include <cstdint>
#include <random>

#include "kfl/linalg.hpp"

namespace kfl {

/// Independent Gaussian/uniform stream keyed by (seed, step, channel).
///
/// Each key owns its own engine, so a draw for step 7 does not depend on
/// whether steps 0..6 were evaluated first.
class NoiseStream {
 public:
  NoiseStream(std::uint64_t seed, std::uint64_t step, std::uint64_t channel);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  Vector normal(Index n);
  std::uint64_t bits() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Symmetric square-root factor L with L L^T = cov, valid for singular PSD input.
Matrix psd_factor(const Matrix& cov);

/// Deterministic 64-bit mix of a seed with a salt; used to derive child seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace kfl
