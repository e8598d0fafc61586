// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Population sampling: K model instances per prompt, each with its own frozen
// offset draw, plus the aggregation rules applied across them.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "btrans/bayesian_norm.hpp"
#include "btrans/errors.hpp"
#include "btrans/generate.hpp"
#include "btrans/rng.hpp"
#include "btrans/tasks.hpp"
#include "btrans/tokenizer.hpp"

namespace btrans {

struct MemberRecord {
  std::size_t k = 0;
  std::uint64_t noise_seed = 0;
  std::uint64_t decode_seed = 0;
  std::vector<int> tokens;
  std::string text;
  std::optional<std::string> answer;
  std::vector<double> logprobs;
  std::optional<std::string> error;  // generation failure, recorded rather than thrown

  double logprob_sum() const {
    double s = 0.0;
    for (double v : logprobs) s += v;
    return s;
  }
};

struct VoteResult {
  std::optional<std::string> consensus;                  // empty: no extractable answer
  std::vector<std::pair<std::string, std::size_t>> counts;  // in order of first appearance
  std::size_t voters = 0;
};

struct PopulationResult {
  std::string prompt_id;
  std::string prompt;
  double sigma = 0.0;
  std::vector<MemberRecord> members;
  VoteResult vote;
  std::vector<double> pass_at_k;   // k = 1..K, filled when a ground truth is known
  std::optional<double> diversity; // filled by the caller's encoder, K >= 2
};

/// Modal answer among members with an extractable answer. Ties go to the
/// answer first produced by the lowest-indexed member.
inline VoteResult majority_vote(std::span<const std::optional<std::string>> answers) {
  VoteResult v;
  std::map<std::string, std::size_t> index;
  for (const auto& a : answers) {
    if (!a) continue;
    ++v.voters;
    auto [it, inserted] = index.try_emplace(*a, v.counts.size());
    if (inserted) v.counts.emplace_back(*a, 0);
    ++v.counts[it->second].second;
  }
  std::size_t best = 0;
  for (std::size_t i = 0; i < v.counts.size(); ++i)
    if (v.counts[i].second > v.counts[best].second) best = i;
  if (!v.counts.empty()) v.consensus = v.counts[best].first;
  return v;
}

inline VoteResult majority_vote(std::span<const MemberRecord> members) {
  std::vector<std::optional<std::string>> answers;
  for (const auto& m : members) answers.push_back(m.answer);
  return majority_vote(answers);
}

/// Fraction of questions where any of the first k members is correct.
/// `correct[q][m]` is the correctness of member m on question q.
inline double pass_at_k(const std::vector<std::vector<bool>>& correct, std::size_t k) {
  if (correct.empty()) throw ContractError("pass_at_k: no questions");
  double hits = 0.0;
  for (const auto& row : correct) {
    if (k < 1 || k > row.size())
      throw ContractError("pass_at_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(row.size()) + "]");
    for (std::size_t m = 0; m < k; ++m)
      if (row[m]) {
        hits += 1.0;
        break;
      }
  }
  return hits / static_cast<double>(correct.size());
}

/// pass@k for k = 1..K of a single question (each entry 0 or 1).
inline std::vector<double> pass_curve(const std::vector<bool>& correct) {
  std::vector<double> out;
  bool any = false;
  for (bool c : correct) {
    any = any || c;
    out.push_back(any ? 1.0 : 0.0);
  }
  return out;
}

/// Uniform average of K next-token distributions.
inline std::vector<double> aggregate_predictive(const std::vector<std::vector<double>>& dists) {
  if (dists.empty()) throw ContractError("aggregate_predictive: no distributions");
  const std::size_t vocab = dists.front().size();
  std::vector<double> out(vocab, 0.0);
  for (const auto& d : dists) {
    if (d.size() != vocab) throw DimensionError("aggregate_predictive: vocabulary size mismatch");
    double total = 0.0;
    for (double p : d) {
      if (p < 0.0) throw ContractError("aggregate_predictive: negative probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) throw ContractError("aggregate_predictive: distribution does not sum to 1");
    for (std::size_t i = 0; i < vocab; ++i) out[i] += d[i];
  }
  for (auto& p : out) p /= static_cast<double>(dists.size());
  return out;
}

/// Per-member next-token distributions after `prompt`, one instance per member.
template <typename T>
std::vector<std::vector<double>> member_next_token_distributions(WrappedModel<T>& model,
                                                                 std::span<const int> prompt,
                                                                 std::size_t K, std::uint64_t base_seed) {
  std::vector<std::uint64_t> seeds(K);
  for (std::size_t k = 0; k < K; ++k) seeds[k] = member_seed(base_seed, k);
  model.reseed(seeds);
  std::vector<int> batch;
  for (std::size_t k = 0; k < K; ++k) batch.insert(batch.end(), prompt.begin(), prompt.end());
  NoGradScope<T> no_grad;
  auto logits = model.forward(batch, K, prompt.size());
  const std::size_t vocab = logits.dim(2);
  std::vector<std::vector<double>> out(K, std::vector<double>(vocab));
  for (std::size_t k = 0; k < K; ++k) {
    const T* row = logits.ptr() + (k * prompt.size() + prompt.size() - 1) * vocab;
    double mx = row[0], z = 0.0;
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    for (std::size_t j = 0; j < vocab; ++j) z += (out[k][j] = std::exp(static_cast<double>(row[j]) - mx));
    for (auto& p : out[k]) p /= z;
  }
  return out;
}

struct PopulationOptions {
  std::size_t K = 8;
  DecodeConfig decode;
  std::uint64_t noise_seed = 0;  // base; member k uses member_seed(noise_seed, k)
  bool batched = false;          // all members as rows of one batch
};

/// Draws K instances and generates once per instance. Member k uses noise seed
/// member_seed(opts.noise_seed, k) and decode seed member_seed(decode.seed, k).
/// The sequential path reseeds (and so resets) the wrapper before each member;
/// the batched path gives each row its own seeds. Both produce identical members.
template <typename T>
PopulationResult sample_population(WrappedModel<T>& model, const std::string& prompt,
                                   const PopulationOptions& opts,
                                   const LoraAdapter<T>* adapter = nullptr) {
  if (opts.K < 1) throw ContractError("sample_population: K must be at least 1");
  PopulationResult result;
  result.prompt = prompt;
  result.sigma = model.prior().sigma;
  const auto tokens = Tokenizer::encode_prompt(prompt);
  std::vector<std::uint64_t> noise(opts.K), decode(opts.K);
  for (std::size_t k = 0; k < opts.K; ++k) {
    noise[k] = member_seed(opts.noise_seed, k);
    decode[k] = member_seed(opts.decode.seed, k);
  }
  auto fill = [&](std::size_t k, const Generation& g) {
    MemberRecord m;
    m.k = k;
    m.noise_seed = noise[k];
    m.decode_seed = decode[k];
    m.tokens = g.tokens;
    m.logprobs = g.logprobs;
    m.text = Tokenizer::decode(g.tokens);
    m.answer = extract_answer(m.text);
    return m;
  };
  if (opts.batched) {
    try {
      auto gens = model.generate_rows(tokens, opts.decode, noise, decode, adapter);
      for (std::size_t k = 0; k < opts.K; ++k) result.members.push_back(fill(k, gens[k]));
    } catch (const std::exception& e) {
      for (std::size_t k = 0; k < opts.K; ++k) {
        MemberRecord m;
        m.k = k;
        m.noise_seed = noise[k];
        m.decode_seed = decode[k];
        m.error = e.what();
        result.members.push_back(std::move(m));
      }
    }
  } else {
    for (std::size_t k = 0; k < opts.K; ++k) {
      try {
        auto gens = model.generate_rows(tokens, opts.decode, std::span(&noise[k], 1),
                                        std::span(&decode[k], 1), adapter);
        result.members.push_back(fill(k, gens.front()));
      } catch (const std::exception& e) {
        MemberRecord m;
        m.k = k;
        m.noise_seed = noise[k];
        m.decode_seed = decode[k];
        m.error = e.what();
        result.members.push_back(std::move(m));
      }
    }
  }
  result.vote = majority_vote(result.members);
  return result;
}

/// Fills pass@k (k = 1..K) against a known canonical answer.
inline void score_population(PopulationResult& r, const std::string& truth) {
  std::vector<bool> correct;
  for (const auto& m : r.members) correct.push_back(TaskSpec::verify(m.answer, truth));
  r.pass_at_k = pass_curve(correct);
}

}  // namespace btrans
