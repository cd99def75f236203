// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "qsat/tensor.hpp"

namespace qt {

inline qsat::Tensor randn(qsat::Shape shape, std::uint64_t seed, double sd = 1.0, double mean = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(mean, sd);
  qsat::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline qsat::Tensor uniform(qsat::Shape shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  qsat::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Moves entries out of (-margin, margin) so kinks stay outside the stencil.
inline qsat::Tensor away_from_zero(qsat::Tensor t, double margin = 1e-2) {
  for (auto& v : t.data())
    if (std::abs(v) < margin) v = v < 0 ? -margin : margin;
  return t;
}

inline double max_abs_diff(const qsat::Tensor& a, const qsat::Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace qt
