#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dcctl/numerics/rng.hpp"
#include "dcctl/numerics/tensor.hpp"

namespace dcctl {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t probes = 0;
};

/// Compares reverse-mode gradients of `loss_fn(inputs)` against central finite
/// differences at `probes` randomly chosen input coordinates. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheckResult grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss_fn,
                                  std::vector<Tensor<double>> inputs, std::size_t probes, Rng& rng,
                                  double step = 1e-5, double floor = 1e-2) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> loss = loss_fn(inputs);
  backward(loss);
  std::size_t total = 0;
  for (const auto& t : inputs) total += t.numel();
  GradCheckResult res;
  if (total == 0) return res;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < probes; ++p) {
    std::size_t flat = rng.below(total);
    std::size_t which = 0;
    while (flat >= inputs[which].numel()) flat -= inputs[which++].numel();
    Tensor<double>& t = inputs[which];
    const double analytic = t.has_grad() ? t.grad()[flat] : 0.0;
    const double orig = t.data()[flat];
    t.mutable_data()[flat] = orig + step;
    const double up = loss_fn(inputs).item();
    t.mutable_data()[flat] = orig - step;
    const double down = loss_fn(inputs).item();
    t.mutable_data()[flat] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double abs_err = std::abs(analytic - numeric);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    res.max_abs_error = std::max(res.max_abs_error, abs_err);
    res.max_rel_error = std::max(res.max_rel_error, abs_err / denom);
    ++res.probes;
  }
  return res;
}

/// Random tensor helper for checks.
inline Tensor<double> random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  auto v = rng.normal_vector<double>(numel_of(shape), stddev);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

}  // namespace dcctl
