#pragma once

// Central finite-difference oracle used by the gradient suites. It only
// evaluates forward values, so it stays independent of the backward rules.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mtclip/ops.hpp"
#include "mtclip/tensor.hpp"

namespace mtclip::testing {

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng,
                            double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_vector(shape, std::move(v), requires_grad);
}

// Reduces an arbitrary output to a scalar with fixed random weights so
// every output element contributes a distinct coefficient.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(out.shape(), rng, -1.0, 1.0, false);
  return ops::sum(ops::mul(out, w));
}

struct GradCheckResult {
  double relative_error = 0.0;
  std::size_t coordinates = 0;
};

// Compares analytic gradients with central differences. When max_coords is
// nonzero, a seeded subset of coordinates per input is checked. The
// fourth-order stencil is for strongly curved compositions.
inline GradCheckResult gradcheck(const LossFn& f, std::vector<Tensor> inputs,
                                 double eps = 1e-5, std::size_t max_coords = 0,
                                 std::uint64_t seed = 7, bool fourth_order = false) {
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = f(inputs);
  loss.backward();

  std::mt19937_64 rng(seed);
  std::vector<double> analytic, numeric;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<std::size_t> coords(t.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    const auto g = t.grad();
    for (auto i : coords) {
      auto data = t.mutable_data();
      const double saved = data[i];
      auto at = [&](double offset) {
        NoGradGuard guard;
        data[i] = saved + offset;
        return f(inputs).item();
      };
      double slope;
      if (fourth_order) {
        slope = (at(-2 * eps) - 8 * at(-eps) + 8 * at(eps) - at(2 * eps)) / (12.0 * eps);
      } else {
        slope = (at(eps) - at(-eps)) / (2.0 * eps);
      }
      data[i] = saved;
      analytic.push_back(g.empty() ? 0.0 : g[i]);
      numeric.push_back(slope);
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return {std::sqrt(diff) / denom, analytic.size()};
}

}  // namespace mtclip::testing
