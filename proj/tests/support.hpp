#pragma once

// Shared helpers for the test suites: random tensors and a central
// finite-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "s3ce/rng.hpp"
#include "s3ce/tensor.hpp"

namespace s3ce::testing {

using T64 = Tensor<double>;

inline T64 random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  T64 t(shape, std::move(v));
  if (grad) t.set_requires_grad(true);
  return t;
}

// Reduces an arbitrary output to a scalar with fixed random weights so that
// every output component contributes to the checked gradient.
inline T64 weighted_sum(const T64& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(y, T64(y.shape(), std::move(w))));
}

struct GradcheckResult {
  double max_rel = 0;  // max over inputs of |analytic - numeric| / max(|analytic|, |numeric|, floor)
  double max_abs = 0;
};

// Compares backward() against central differences for every element of
// every input. `f` must rebuild the graph from the current input values.
inline GradcheckResult gradcheck(const std::function<T64()>& f, std::vector<T64> inputs, double h = 1e-6,
                                 double floor = 1e-3) {
  for (auto& x : inputs) x.zero_grad();
  backward(f());
  GradcheckResult r;
  for (auto& x : inputs) {
    auto values = x.mutable_values();
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    analytic.resize(values.size(), 0.0);  // never reached by backward
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      double fp, fm;
      {
        NoGradGuard no_grad;
        values[i] = keep + h;
        fp = f().item();
        values[i] = keep - h;
        fm = f().item();
      }
      values[i] = keep;
      const double numeric = (fp - fm) / (2 * h);
      const double err = std::abs(analytic[i] - numeric);
      r.max_abs = std::max(r.max_abs, err);
      r.max_rel = std::max(r.max_rel, err / std::max({std::abs(analytic[i]), std::abs(numeric), floor}));
    }
  }
  return r;
}

}  // namespace s3ce::testing
