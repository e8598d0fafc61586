// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "btrans/errors.hpp"
#include "btrans/tensor.hpp"

namespace btrans {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
  double clip_norm = 1.0;     // 0 disables global-norm clipping
};

/// Adam over a fixed parameter list. Moments are kept in double.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double grad_norm() const {
    double ss = 0.0;
    for (const auto& p : params_)
      for (T g : p.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(ss);
  }

  /// Applies one update and returns the pre-clip gradient norm.
  double step() {
    const double norm = grad_norm();
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto data = params_[i].mutable_data();
      auto grad = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = static_cast<double>(grad[j]) * clip;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        double w = static_cast<double>(data[j]);
        w -= cfg_.lr * cfg_.weight_decay * w;
        w -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        data[j] = static_cast<T>(w);
      }
    }
    return norm;
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  std::size_t steps_taken() const { return t_; }

  /// First and second moments per parameter, for exact resume.
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  void restore(std::vector<std::vector<double>> m, std::vector<std::vector<double>> v, std::size_t t) {
    if (m.size() != params_.size() || v.size() != params_.size())
      throw DimensionError("adam: state does not match the parameter list");
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (m[i].size() != params_[i].numel() || v[i].size() != params_[i].numel())
        throw DimensionError("adam: moment size mismatch for parameter " + std::to_string(i));
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace btrans
