// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "btrans/model_config.hpp"
#include "btrans/rng.hpp"
#include "btrans/tensor.hpp"

namespace btrans {

/// Low-rank update of one projection. Weights are stored input-major
/// ([d_in x d_out], applied as x * W), so the update is
/// W + (alpha / rank) * down[d_in x r] * up[r x d_out]. `up` starts at zero.
template <typename T>
struct LoraPair {
  Tensor<T> down;
  Tensor<T> up;
};

/// Adapters on the attention query and value projections of every block.
template <typename T>
struct LoraAdapter {
  std::size_t rank = 3;
  double alpha = 6.0;
  std::vector<LoraPair<T>> q;
  std::vector<LoraPair<T>> v;

  T scaling() const { return static_cast<T>(alpha / static_cast<double>(rank)); }

  static LoraAdapter create(const ModelConfig& cfg, std::size_t rank, double alpha, std::uint64_t seed) {
    if (rank == 0) throw ConfigError("lora: rank must be positive");
    LoraAdapter a;
    a.rank = rank;
    a.alpha = alpha;
    const double std_down = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    auto make = [&](std::uint64_t tag) {
      CounterRng rng(derive_key(seed, tag));
      std::vector<T> down(cfg.d_model * rank);
      for (auto& w : down) w = static_cast<T>(rng.normal(0.0, std_down));
      LoraPair<T> pair{Tensor<T>({cfg.d_model, rank}, std::move(down)),
                       Tensor<T>::zeros({rank, cfg.d_model})};
      pair.down.set_requires_grad(true);
      pair.up.set_requires_grad(true);
      return pair;
    };
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      a.q.push_back(make(2 * l));
      a.v.push_back(make(2 * l + 1));
    }
    return a;
  }

  /// Name/tensor pairs in a fixed order; names carry the "lora." prefix.
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t l = 0; l < q.size(); ++l) {
      const auto p = "lora.blocks." + std::to_string(l);
      out.emplace_back(p + ".q.down", q[l].down);
      out.emplace_back(p + ".q.up", q[l].up);
      out.emplace_back(p + ".v.down", v[l].down);
      out.emplace_back(p + ".v.up", v[l].up);
    }
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t.numel();
    return n;
  }

  LoraAdapter clone() const {
    LoraAdapter c = *this;
    auto copy = [](LoraPair<T>& p) {
      p.down = p.down.detach().set_requires_grad(true);
      p.up = p.up.detach().set_requires_grad(true);
    };
    for (auto& p : c.q) copy(p);
    for (auto& p : c.v) copy(p);
    return c;
  }
};

}  // namespace btrans
