// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "btrans/model.hpp"
#include "btrans/rng.hpp"
#include "btrans/tokenizer.hpp"

namespace btrans {

struct DecodeConfig {
  double temperature = 1.0;  // 0 = greedy argmax
  std::size_t top_k = 0;     // 0 = off
  std::size_t max_new_tokens = 64;
  int stop_token = Tokenizer::kEos;
  std::uint64_t seed = 0;
};

struct Generation {
  std::vector<int> tokens;       // generated tokens, including the stop token if emitted
  std::vector<double> logprobs;  // one per generated token
  bool stopped = false;

  double logprob_sum() const { return std::accumulate(logprobs.begin(), logprobs.end(), 0.0); }
};

namespace detail {

inline constexpr std::uint64_t kDecodeStreamTag = 0xDEC0DE;

// Picks the next token from one row of logits. Log-probabilities are reported
// under the decode distribution: softmax(logits / temperature), renormalized
// over the top-k set when top_k > 0. Greedy decoding reports the untempered
// model log-probability of the argmax token.
template <typename T>
std::pair<int, double> pick_token(const T* logits, std::size_t vocab, const DecodeConfig& cfg,
                                  CounterRng& rng) {
  std::vector<double> scaled(vocab);
  if (cfg.temperature <= 0.0) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (logits[j] > logits[best]) best = j;
    double mx = static_cast<double>(logits[best]), z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(logits[j]) - mx);
    return {static_cast<int>(best), -std::log(z)};
  }
  for (std::size_t j = 0; j < vocab; ++j) scaled[j] = static_cast<double>(logits[j]) / cfg.temperature;
  std::vector<char> keep(vocab, 1);
  if (cfg.top_k > 0 && cfg.top_k < vocab) {
    std::vector<std::size_t> order(vocab);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scaled[a] > scaled[b]; });
    std::fill(keep.begin(), keep.end(), 0);
    for (std::size_t i = 0; i < cfg.top_k; ++i) keep[order[i]] = 1;
  }
  double mx = -INFINITY;
  for (std::size_t j = 0; j < vocab; ++j)
    if (keep[j]) mx = std::max(mx, scaled[j]);
  std::vector<double> probs(vocab, 0.0);
  double z = 0.0;
  for (std::size_t j = 0; j < vocab; ++j)
    if (keep[j]) z += (probs[j] = std::exp(scaled[j] - mx));
  const double u = rng.uniform() * z;
  double acc = 0.0;
  std::size_t chosen = vocab;
  for (std::size_t j = 0; j < vocab; ++j) {
    if (!keep[j]) continue;
    acc += probs[j];
    if (u < acc) {
      chosen = j;
      break;
    }
  }
  if (chosen == vocab)  // u landed on the rounding gap at the top end
    for (std::size_t j = vocab; j-- > 0;)
      if (keep[j]) {
        chosen = j;
        break;
      }
  return {static_cast<int>(chosen), scaled[chosen] - mx - std::log(z)};
}

}  // namespace detail

/// Generates one continuation per row of a shared prompt. Row r samples with
/// its own decode stream seeded by `row_seeds[r]`, so a row's output does not
/// depend on which other rows share the batch.
template <typename T>
std::vector<Generation> generate_rows(const ModelParams<T>& p, std::span<const int> prompt,
                                      const DecodeConfig& cfg, std::span<const std::uint64_t> row_seeds,
                                      NormOffsets<T>* offsets = nullptr,
                                      const LoraAdapter<T>* adapter = nullptr) {
  if (prompt.empty()) throw ContractError("generate: prompt must be non-empty");
  if (row_seeds.empty()) throw ContractError("generate: at least one row is required");
  NoGradScope<T> no_grad;
  const std::size_t rows = row_seeds.size();
  const std::size_t vocab = p.config.vocab_size;
  const std::size_t len = prompt.size();

  std::vector<CounterRng> rngs;
  for (auto s : row_seeds) rngs.emplace_back(derive_key(s, detail::kDecodeStreamTag));
  std::vector<Generation> out(rows);

  KVCache<T> cache;
  cache.reset(p.config, rows);
  ForwardOptions<T> opt{&cache, offsets, adapter};

  std::vector<int> input;
  input.reserve(rows * len);
  for (std::size_t r = 0; r < rows; ++r) input.insert(input.end(), prompt.begin(), prompt.end());
  auto logits = forward(p, input, rows, len, opt);
  std::size_t last = len - 1, steps = len;

  for (std::size_t n = 0; n < cfg.max_new_tokens; ++n) {
    std::vector<int> next(rows, cfg.stop_token);
    bool any_active = false;
    for (std::size_t r = 0; r < rows; ++r) {
      if (out[r].stopped) continue;
      const T* row = logits.ptr() + (r * steps + last) * vocab;
      auto [tok, lp] = detail::pick_token(row, vocab, cfg, rngs[r]);
      out[r].tokens.push_back(tok);
      out[r].logprobs.push_back(lp);
      if (tok == cfg.stop_token) out[r].stopped = true;
      else any_active = true;
      next[r] = tok;
    }
    if (!any_active || n + 1 == cfg.max_new_tokens || cache.length >= p.config.max_seq_len) break;
    logits = forward(p, next, rows, 1, opt);
    last = 0;
    steps = 1;
  }
  return out;
}

template <typename T>
Generation generate(const ModelParams<T>& p, std::span<const int> prompt, const DecodeConfig& cfg,
                    NormOffsets<T>* offsets = nullptr, const LoraAdapter<T>* adapter = nullptr) {
  const std::uint64_t seed = cfg.seed;
  return generate_rows(p, prompt, cfg, std::span<const std::uint64_t>(&seed, 1), offsets, adapter)
      .front();
}

/// Teacher-forced log-likelihood of `continuation` after `prompt`, with
/// logits scaled by 1/temperature (temperature <= 0 means 1).
template <typename T>
std::vector<double> sequence_logprobs(const ModelParams<T>& p, std::span<const int> prompt,
                                      std::span<const int> continuation, double temperature = 1.0,
                                      NormOffsets<T>* offsets = nullptr,
                                      const LoraAdapter<T>* adapter = nullptr) {
  NoGradScope<T> no_grad;
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  const std::size_t steps = seq.size() - 1;
  std::vector<int> inputs(seq.begin(), seq.end() - 1);
  std::vector<int> targets(seq.begin() + 1, seq.end());
  auto logits = forward(p, inputs, 1, steps, ForwardOptions<T>{nullptr, offsets, adapter});
  const T temp = temperature > 0.0 ? static_cast<T>(temperature) : T(1);
  auto lp = token_logprobs(logits, targets, temp);
  return std::vector<double>(lp.data().begin() + static_cast<std::ptrdiff_t>(prompt.size() - 1),
                             lp.data().end());
}

}  // namespace btrans
