#pragma once

// Central-difference oracles for backward passes, in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "qdr/rng.hpp"
#include "qdr/tensor.hpp"

namespace qdr::testing {

/// Fixed random projection used as a scalar loss: L(y) = sum(y * R).
inline Tensor<double> projection(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> r(s);
  for (auto& v : r.values()) v = rng.uniform(-1, 1);
  return r;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

/// Central difference of `loss` w.r.t. element i of `x` (x is restored).
inline double central_diff(Tensor<double>& x, std::size_t i, const std::function<double()>& loss,
                           double h = 1e-6) {
  const double keep = x[i];
  x[i] = keep + h;
  const double lp = loss();
  x[i] = keep - h;
  const double lm = loss();
  x[i] = keep;
  return (lp - lm) / (2 * h);
}

/// Indices to probe: all of them for small tensors, else an even sample.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t max_count,
                                               std::uint64_t seed) {
  std::vector<std::size_t> out;
  if (n <= max_count) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(i);
    return out;
  }
  Rng rng(seed);
  for (std::size_t k = 0; k < max_count; ++k) out.push_back(rng.below(n));
  return out;
}

}  // namespace qdr::testing
