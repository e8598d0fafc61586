// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "btrans/errors.hpp"
#include "btrans/rng.hpp"
#include "btrans/tensor.hpp"

namespace btrans {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// At most `coords_per_param` coordinates are sampled from each parameter
/// (all of them when the parameter is smaller). The relative error of one
/// coordinate is |g_ad - g_fd| / (|g_fd| + 1e-8). Parameters are restored
/// bit-exactly afterwards.
inline GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& loss_fn,
                                         std::vector<Tensor<double>> params, double eps,
                                         std::size_t coords_per_param = 64,
                                         std::uint64_t seed = 0) {
  if (!(eps >= 1e-6 && eps <= 1e-2))
    throw ContractError("finite_diff_check: eps must lie in [1e-6, 1e-2]");

  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    TapeScope<double> scope;
    const auto loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: loss is not finite");
    scope.backward(loss);
  }

  auto eval = [&] {
    NoGradScope<double> off;
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: perturbed loss is not finite");
    return v;
  };

  GradCheckReport report;
  CounterRng rng(derive_key(seed, 0x67636B));
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > coords_per_param) {
      for (std::size_t i = 0; i < coords_per_param; ++i)
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      coords.resize(coords_per_param);
    }
    auto values = p.mutable_data();
    for (auto c : coords) {
      const double saved = values[c];
      values[c] = saved + eps;
      const double up = eval();
      values[c] = saved - eps;
      const double down = eval();
      values[c] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double abs_err = std::abs(analytic[c] - numeric);
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, abs_err / (std::abs(numeric) + 1e-8));
      ++report.coordinates;
    }
  }
  return report;
}

}  // namespace btrans
