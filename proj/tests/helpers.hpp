#pragma once

#include <cmath>

#include <doctest.h>

#include "kfl/linalg.hpp"
#include "kfl/rng.hpp"

namespace testutil {

using kfl::Index;
using kfl::Matrix;
using kfl::Vector;

inline Matrix randn(kfl::NoiseStream& ns, Index r, Index c) {
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = ns.normal();
  return m;
}

inline Matrix spd(kfl::NoiseStream& ns, Index d, double floor = 0.1) {
  const Matrix B = randn(ns, d, d);
  return B * B.transpose() / static_cast<double>(d) + floor * Matrix::Identity(d, d);
}

inline double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

inline Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

inline Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace testutil
