// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Supervised pretraining on the task format: next-token cross-entropy on the
// reference response and stop token, prompt positions masked out.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <vector>

#include "btrans/errors.hpp"
#include "btrans/model.hpp"
#include "btrans/ops.hpp"
#include "btrans/optim.hpp"
#include "btrans/tasks.hpp"
#include "btrans/tokenizer.hpp"

namespace btrans {

struct SftConfig {
  std::size_t steps = 1500;
  std::size_t batch = 32;
  double lr = 3e-3;
  std::size_t warmup = 50;
  std::size_t instances = 4000;
  std::uint64_t seed = 0;      // weight init and batch order
  std::uint64_t data_seed = 7;

  void validate() const {
    if (batch < 1) throw ConfigError("sft: batch must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("sft: lr must be positive");
    if (instances < 1) throw ConfigError("sft: instances must be at least 1");
  }
};

struct SftRecord {
  std::size_t step;
  double loss;
  double lr;
};

/// Tokens and loss mask for one batch of instances: BOS prompt response EOS.
struct SftBatch {
  std::vector<int> inputs, targets;
  std::vector<std::uint8_t> mask;
  std::size_t rows = 0, steps = 0;
};

inline SftBatch make_sft_batch(const std::vector<const TaskInstance*>& items) {
  SftBatch b;
  b.rows = items.size();
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> prompt_len;
  for (const auto* t : items) {
    auto seq = Tokenizer::encode_prompt(t->prompt);
    prompt_len.push_back(seq.size());
    const auto resp = Tokenizer::encode(t->response);
    seq.insert(seq.end(), resp.begin(), resp.end());
    seq.push_back(Tokenizer::kEos);
    b.steps = std::max(b.steps, seq.size() - 1);
    seqs.push_back(std::move(seq));
  }
  b.inputs.assign(b.rows * b.steps, Tokenizer::kPad);
  b.targets.assign(b.rows * b.steps, Tokenizer::kPad);
  b.mask.assign(b.rows * b.steps, 0);
  for (std::size_t r = 0; r < b.rows; ++r)
    for (std::size_t j = 0; j + 1 < seqs[r].size(); ++j) {
      b.inputs[r * b.steps + j] = seqs[r][j];
      b.targets[r * b.steps + j] = seqs[r][j + 1];
      b.mask[r * b.steps + j] = j + 1 >= prompt_len[r] ? 1 : 0;
    }
  return b;
}

/// Trains every base parameter from `params` in place with Adam, linear warmup
/// and cosine decay. Returns per-step losses.
template <typename T>
std::vector<SftRecord> supervised_pretrain(ModelParams<T>& params, const TaskSpec& task, const SftConfig& cfg,
                                           const std::function<void(const SftRecord&)>& on_step = {}) {
  cfg.validate();
  const auto data = make_dataset(task, cfg.instances, cfg.data_seed, Split::train);
  params.set_requires_grad(true);
  AdamConfig ac;
  ac.lr = cfg.lr;
  Adam<T> opt(params.parameters(), ac);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  std::size_t epoch = 0;
  std::vector<SftRecord> out;
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    std::vector<const TaskInstance*> items;
    while (items.size() < cfg.batch) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        CounterRng rng(derive_key(derive_key(cfg.seed, 0x5F7), epoch++));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      items.push_back(&data[order[cursor++]]);
    }
    const double warm = cfg.warmup ? std::min(1.0, static_cast<double>(s) / static_cast<double>(cfg.warmup)) : 1.0;
    const double progress = static_cast<double>(s - 1) / static_cast<double>(std::max<std::size_t>(1, cfg.steps));
    const double lr = cfg.lr * warm * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    opt.set_lr(lr);
    const auto batch = make_sft_batch(items);
    TapeScope<T> scope;
    auto logits = forward(params, batch.inputs, batch.rows, batch.steps);
    auto loss = cross_entropy(logits, batch.targets, batch.mask);
    if (!std::isfinite(static_cast<double>(loss.item())))
      throw NumericError("sft: non-finite loss at step " + std::to_string(s));
    opt.zero_grad();
    scope.backward(loss);
    opt.step();
    SftRecord rec{s, static_cast<double>(loss.item()), lr};
    if (on_step) on_step(rec);
    out.push_back(rec);
  }
  params.set_requires_grad(false);
  for (auto& p : params.parameters()) p.storage()->grad.clear();
  return out;
}

}  // namespace btrans
