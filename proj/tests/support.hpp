#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dtst/rng.hpp"
#include "dtst/tensor.hpp"

namespace dtst::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v)).set_requires_grad(true);
}

inline Tensor random_leaf(Shape shape, Rng& rng) { return random_tensor(std::move(shape), rng); }

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Checks every input coordinate of a scalar function against central
/// differences. For each input tensor the error is
/// ||analytic - numeric|| / max(||analytic||, ||numeric||, floor), and the
/// worst tensor is returned. The floor sits above central-difference
/// rounding noise (up to about 1e-10 in these checks) so exactly-zero gradients compare as equal.
/// `fn` must be deterministic.
inline double gradient_error(std::vector<Tensor> inputs, const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                             double step = 1e-5, double floor = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    GradientScope scope(tape);
    for (auto& t : inputs) t.zero_grad();
    Tensor out = fn(inputs);
    backward(out, tape);
    for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  }
  double worst = 0.0;
  NoGradScope no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto w = inputs[i].mutable_data();
    double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double orig = w[j];
      w[j] = orig + step;
      const double up = fn(inputs).item();
      w[j] = orig - step;
      const double down = fn(inputs).item();
      w[j] = orig;
      const double numeric = (up - down) / (2.0 * step);
      diff += (analytic[i][j] - numeric) * (analytic[i][j] - numeric);
      norm_a += analytic[i][j] * analytic[i][j];
      norm_n += numeric * numeric;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(norm_a), std::sqrt(norm_n), floor}));
  }
  return worst;
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights so every
/// output coordinate contributes a distinct amount to the checked gradient.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(t.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(t, Tensor::from(t.shape(), std::move(w))));
}

}  // namespace dtst::testing
