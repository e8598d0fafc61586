// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Embeddings, pairwise cosine diversity, step-wise consistency and PCA.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "btrans/errors.hpp"
#include "btrans/model.hpp"
#include "btrans/tokenizer.hpp"

namespace btrans {

struct Embedding {
  std::vector<double> values;
  std::string source;
  bool empty_input = false;  // zero vector stands in for an empty text
};

/// Encoder built on the frozen deterministic base model: the mean of its final
/// normalized hidden states over the text positions, L2-normalized. A BOS
/// token is prepended and excluded from the mean.
template <typename T>
class BaseEncoder {
 public:
  explicit BaseEncoder(const ModelParams<T>& base) : base_(&base) {}

  std::size_t dim() const { return base_->config.d_model; }

  Embedding embed(std::span<const int> tokens, std::string source = {}) const {
    auto out = embed_batch(std::vector<std::vector<int>>{std::vector<int>(tokens.begin(), tokens.end())});
    out.front().source = std::move(source);
    return out.front();
  }

  Embedding embed(std::string_view text) const {
    return embed(Tokenizer::encode(text), std::string(text));
  }

  /// Rows are right-padded to a common length; causal attention keeps each
  /// row's prefix independent of the padding and of the other rows.
  std::vector<Embedding> embed_batch(const std::vector<std::vector<int>>& texts) const {
    const auto& cfg = base_->config;
    const std::size_t d = cfg.d_model;
    std::vector<Embedding> out(texts.size());
    std::size_t steps = 1;
    for (const auto& t : texts) steps = std::max(steps, std::min(t.size(), cfg.max_seq_len - 1) + 1);
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (texts[i].empty()) {
        out[i].values.assign(d, 0.0);
        out[i].empty_input = true;
      } else {
        live.push_back(i);
      }
    }
    if (live.empty()) return out;
    std::vector<int> batch(live.size() * steps, Tokenizer::kPad);
    for (std::size_t r = 0; r < live.size(); ++r) {
      const auto& t = texts[live[r]];
      batch[r * steps] = Tokenizer::kBos;
      for (std::size_t j = 0; j + 1 < steps && j < t.size(); ++j) batch[r * steps + 1 + j] = t[j];
    }
    NoGradScope<T> no_grad;
    auto h = forward_hidden(*base_, batch, live.size(), steps);
    for (std::size_t r = 0; r < live.size(); ++r) {
      const std::size_t n = std::min(texts[live[r]].size(), steps - 1);
      std::vector<double> v(d, 0.0);
      for (std::size_t t = 1; t <= n; ++t)
        for (std::size_t i = 0; i < d; ++i) v[i] += static_cast<double>(h.ptr()[(r * steps + t) * d + i]);
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      for (double& x : v) x = norm > 0.0 ? x / norm : 0.0;
      out[live[r]].values = std::move(v);
    }
    return out;
  }

  std::vector<Embedding> embed_texts(const std::vector<std::string>& texts) const {
    std::vector<std::vector<int>> toks;
    for (const auto& t : texts) toks.push_back(Tokenizer::encode(t));
    auto out = embed_batch(toks);
    for (std::size_t i = 0; i < texts.size(); ++i) out[i].source = texts[i];
    return out;
  }

 private:
  const ModelParams<T>* base_;
};

/// Cosine similarity. Identical nonzero vectors give exactly 1; the 1e-8
/// floor on the denominator keeps zero vectors finite.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na > 0.0 && std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  return dot / std::max(std::sqrt(na * nb), 1e-8);
}

/// Mean of (1 - cosine) over all unordered pairs.
inline double pairwise_cosine_diversity(std::span<const std::vector<double>> vs) {
  if (vs.size() < 2) throw ContractError("pairwise_cosine_diversity: need at least 2 embeddings");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < vs.size(); ++i)
    for (std::size_t j = i + 1; j < vs.size(); ++j) {
      total += 1.0 - cosine(vs[i], vs[j]);
      ++pairs;
    }
  return std::clamp(total / static_cast<double>(pairs), 0.0, 2.0);
}

/// As above; two flagged empty inputs count as identical.
inline double pairwise_cosine_diversity(std::span<const Embedding> es) {
  if (es.size() < 2) throw ContractError("pairwise_cosine_diversity: need at least 2 embeddings");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < es.size(); ++i)
    for (std::size_t j = i + 1; j < es.size(); ++j) {
      const bool both_empty = es[i].empty_input && es[j].empty_input;
      total += both_empty ? 0.0 : 1.0 - cosine(es[i].values, es[j].values);
      ++pairs;
    }
  return std::clamp(total / static_cast<double>(pairs), 0.0, 2.0);
}

struct StepChain {
  std::vector<std::string> steps;
};

/// Splits on newlines and drops empty or whitespace-only segments.
inline StepChain segment_steps(std::string_view text) {
  StepChain chain;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    const auto seg = text.substr(start, end - start);
    if (seg.find_first_not_of(" \t\r\v\f") != std::string_view::npos) chain.steps.emplace_back(seg);
    start = end + 1;
  }
  return chain;
}

/// Mean cosine between consecutive step embeddings; absent when m < 2.
inline std::optional<double> scs(const StepChain& chain,
                                 const std::function<std::vector<std::vector<double>>(
                                     const std::vector<std::string>&)>& encode) {
  if (chain.steps.size() < 2) return std::nullopt;
  const auto emb = encode(chain.steps);
  if (emb.size() != chain.steps.size()) throw DimensionError("scs: encoder returned the wrong count");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < emb.size(); ++i) total += cosine(emb[i], emb[i + 1]);
  return total / static_cast<double>(emb.size() - 1);
}

template <typename T>
std::optional<double> scs(const StepChain& chain, const BaseEncoder<T>& encoder) {
  return scs(chain, [&](const std::vector<std::string>& steps) {
    std::vector<std::vector<double>> out;
    for (auto& e : encoder.embed_texts(steps)) out.push_back(std::move(e.values));
    return out;
  });
}

struct PcaResult {
  std::vector<std::vector<double>> coords;      // n x out_dim
  std::vector<std::vector<double>> components;  // out_dim x d_e, unit rows (zero when padded)
  std::vector<double> eigenvalues;              // all, descending, of the 1/n covariance
  std::vector<double> mean;
  double total_variance = 0.0;
  double projected_variance = 0.0;  // mean squared norm of the coordinates
  bool degenerate = false;          // fewer than out_dim nonzero directions
};

/// Projects centered points onto the top `out_dim` eigenvectors of their
/// covariance. Each component is signed so its largest-magnitude loading is
/// positive. Missing directions are padded with zeros and flagged.
inline PcaResult pca_project(const std::vector<std::vector<double>>& points, std::size_t out_dim = 2) {
  const std::size_t n = points.size();
  if (n <= out_dim) throw ContractError("pca_project: need more points than output dimensions");
  const std::size_t d = points.front().size();
  if (d == 0) throw DimensionError("pca_project: zero-dimensional points");
  Eigen::MatrixXd X(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].size() != d) throw DimensionError("pca_project: ragged input");
    for (std::size_t j = 0; j < d; ++j) X(i, j) = points[i][j];
  }
  PcaResult r;
  const Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  r.mean.assign(mu.data(), mu.data() + d);
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd evals = es.eigenvalues();  // ascending
  const Eigen::MatrixXd evecs = es.eigenvectors();
  r.total_variance = cov.trace();
  for (std::size_t i = 0; i < d; ++i) r.eigenvalues.push_back(std::max(0.0, evals(static_cast<Eigen::Index>(d - 1 - i))));
  const double tol = 1e-12 * std::max(1.0, r.total_variance);
  r.components.assign(out_dim, std::vector<double>(d, 0.0));
  for (std::size_t c = 0; c < out_dim && c < d; ++c) {
    const auto col = static_cast<Eigen::Index>(d - 1 - c);
    if (evals(col) <= tol) {
      r.degenerate = true;
      continue;
    }
    Eigen::VectorXd v = evecs.col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t j = 0; j < d; ++j) r.components[c][j] = v(static_cast<Eigen::Index>(j));
  }
  if (out_dim > d) r.degenerate = true;
  r.coords.assign(n, std::vector<double>(out_dim, 0.0));
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < out_dim; ++c) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * r.components[c][j];
      r.coords[i][c] = dot;
      ss += dot * dot;
    }
  r.projected_variance = ss / static_cast<double>(n);
  return r;
}

}  // namespace btrans
