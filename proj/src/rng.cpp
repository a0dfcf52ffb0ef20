#include "kfl/rng.hpp"

#include <array>

namespace kfl {

namespace {

std::mt19937_64 keyed_engine(std::uint64_t seed, std::uint64_t step, std::uint64_t channel) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(channel), static_cast<std::uint32_t>(channel >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

NoiseStream::NoiseStream(std::uint64_t seed, std::uint64_t step, std::uint64_t channel)
    : engine_(keyed_engine(seed, step, channel)) {}

Vector NoiseStream::normal(Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal_(engine_);
  return v;
}

Matrix psd_factor(const Matrix& cov) {
  if (cov.size() == 0) return cov;
  Eigen::SelfAdjointEigenSolver<Matrix> es(linalg::symmetrize(cov));
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer over the combined key
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace kfl
