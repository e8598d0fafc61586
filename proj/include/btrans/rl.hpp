// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Group-relative policy optimization over a low-rank adapter. Rollouts run
// through the stochastic wrapper; the update recomputes log-probabilities with
// every offset pinned to the prior mean and consumes no randomness.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "btrans/bayesian_norm.hpp"
#include "btrans/diversity.hpp"
#include "btrans/errors.hpp"
#include "btrans/generate.hpp"
#include "btrans/lora.hpp"
#include "btrans/ops.hpp"
#include "btrans/optim.hpp"
#include "btrans/population.hpp"
#include "btrans/tasks.hpp"
#include "btrans/tokenizer.hpp"

namespace btrans {

struct Trajectory {
  std::size_t group = 0;
  std::vector<int> prompt;    // BOS + prompt text
  std::vector<int> response;  // generated tokens, stop token included when emitted
  std::vector<double> logprobs;
  std::uint64_t noise_seed = 0;
  std::uint64_t decode_seed = 0;
  double reward = 0.0;
  std::string text;
  std::optional<std::string> answer;
  bool failed = false;
};

enum class TrainMode { rlvr, ttrl };

inline std::string_view to_string(TrainMode m) { return m == TrainMode::rlvr ? "rlvr" : "ttrl"; }

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "rlvr") return TrainMode::rlvr;
  if (s == "ttrl") return TrainMode::ttrl;
  throw ConfigError("train mode must be rlvr|ttrl, got '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t group_size = 8;
  std::size_t prompts_per_step = 4;
  double lr = 2e-3;
  double clip = 0.2;
  double kl_coef = 0.0;
  std::size_t steps = 200;
  double sigma = 0.02;
  double mu = 0.0;
  NoiseMode rollout_mode = NoiseMode::sequence;
  std::size_t eval_interval = 5;
  std::size_t eval_prompts = 32;
  std::uint64_t eval_seed = 1234;
  std::size_t train_instances = 400;
  std::uint64_t data_seed = 99;
  double temperature = 1.0;
  std::size_t top_k = 0;
  std::size_t max_new_tokens = 48;
  std::size_t lora_rank = 3;
  double lora_alpha = 6.0;
  std::uint64_t seed = 0;
  double reward_threshold = 0.75;
  std::size_t reward_window = 10;
  bool eval_metrics = true;  // diversity and SCS at evaluation steps

  void validate() const {
    if (group_size < 2) throw ConfigError("train: group_size must be at least 2");
    if (prompts_per_step < 1) throw ConfigError("train: prompts_per_step must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("train: clip must lie in (0, 1)");
    if (kl_coef < 0.0) throw ConfigError("train: kl_coef must be non-negative");
    if (eval_interval < 1) throw ConfigError("train: eval_interval must be at least 1");
    if (eval_prompts < 1) throw ConfigError("train: eval_prompts must be at least 1");
    if (reward_window < 1) throw ConfigError("train: reward_window must be at least 1");
    if (rollout_mode == NoiseMode::mean_shift) throw ConfigError("train: rollout mode cannot be mean_shift");
    NoisePrior{mu, sigma}.validate();
  }

  DecodeConfig decode() const {
    DecodeConfig d;
    d.temperature = temperature;
    d.top_k = top_k;
    d.max_new_tokens = max_new_tokens;
    return d;
  }
};

/// A_i = (r_i - mean r) / (std r + 1e-4), population standard deviation.
inline std::vector<double> grpo_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ContractError("grpo_advantages: group size must be at least 2");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out;
  for (double r : rewards) out.push_back((r - mean) / (sd + 1e-4));
  return out;
}

inline double verifiable_reward(const TaskInstance& task, std::string_view response) {
  return TaskSpec::verify(extract_answer(response), task.answer) ? 1.0 : 0.0;
}

/// 1 for members agreeing with the majority answer, 0 otherwise (all zero
/// without any extractable answer).
inline std::vector<double> ttrl_rewards(std::span<const std::optional<std::string>> answers) {
  if (answers.size() < 2) throw ContractError("ttrl_rewards: group size must be at least 2");
  const auto vote = majority_vote(answers);
  std::vector<double> out;
  for (const auto& a : answers) out.push_back(vote.consensus && a && *a == *vote.consensus ? 1.0 : 0.0);
  return out;
}

/// G rollouts of one prompt, member g using its own noise and decode seed.
/// The wrapper is reseeded (every cached offset dropped) before generation.
template <typename T>
std::vector<Trajectory> rollout_group(WrappedModel<T>& model, const LoraAdapter<T>* adapter,
                                      const std::string& prompt, const DecodeConfig& decode,
                                      std::span<const std::uint64_t> noise_seeds,
                                      std::span<const std::uint64_t> decode_seeds, std::size_t group = 0) {
  if (noise_seeds.size() < 2) throw ContractError("rollout_group: group size must be at least 2");
  if (noise_seeds.size() != decode_seeds.size())
    throw ContractError("rollout_group: noise and decode seed counts differ");
  const auto tokens = Tokenizer::encode_prompt(prompt);
  std::vector<Trajectory> out(noise_seeds.size());
  for (std::size_t g = 0; g < out.size(); ++g) {
    out[g].group = group;
    out[g].prompt = tokens;
    out[g].noise_seed = noise_seeds[g];
    out[g].decode_seed = decode_seeds[g];
  }
  try {
    auto gens = model.generate_rows(tokens, decode, noise_seeds, decode_seeds, adapter);
    for (std::size_t g = 0; g < out.size(); ++g) {
      out[g].response = std::move(gens[g].tokens);
      out[g].logprobs = std::move(gens[g].logprobs);
      out[g].text = Tokenizer::decode(out[g].response);
      out[g].answer = extract_answer(out[g].text);
    }
  } catch (const std::exception&) {
    for (auto& t : out) t.failed = true;
  }
  return out;
}

struct GrpoConfig {
  double clip = 0.2;
  double kl_coef = 0.0;
  double temperature = 1.0;  // must match the rollout temperature; <= 0 means 1
};

struct GrpoStats {
  double loss = 0.0;
  double mean_ratio = 1.0;
  double clip_fraction = 0.0;
  double kl = 0.0;
  double grad_norm = 0.0;
  std::size_t tokens = 0;
  std::size_t trajectories = 0;  // trajectories that entered the objective
  bool skipped = false;          // nothing to learn from: no step taken
};

template <typename T>
struct GrpoObjective {
  Tensor<T> loss;
  GrpoStats stats;
};

/// Clipped surrogate loss, to be called under a TapeScope:
///
///   L = -(1/N) sum_i (1/|o_i|) sum_t min(rho_it A_i, clip(rho_it, 1-eps, 1+eps) A_i)
///       + beta (1/N) sum_i (1/|o_i|) sum_t k3_it
///
/// with rho = exp(logp_current - logp_rollout). Current log-probs come from the
/// wrapper in mean-shift mode (z = mu). Zero-advantage trajectories contribute
/// nothing when beta = 0 and are left out of the batch.
template <typename T>
GrpoObjective<T> grpo_objective(WrappedModel<T>& model, const LoraAdapter<T>& adapter,
                                std::span<const Trajectory> trajs, std::span<const double> advantages,
                                const GrpoConfig& cfg) {
  if (trajs.size() != advantages.size()) throw DimensionError("grpo: advantage count mismatch");
  GrpoObjective<T> res;
  std::vector<std::size_t> use;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& t = trajs[i];
    if (t.failed || t.response.empty()) continue;
    if (t.logprobs.size() != t.response.size()) throw DimensionError("grpo: log-prob count mismatch");
    for (double lp : t.logprobs)
      if (!std::isfinite(lp)) throw NumericError("grpo: non-finite rollout log-prob");
    if (cfg.kl_coef == 0.0 && advantages[i] == 0.0) continue;
    use.push_back(i);
  }
  res.stats.trajectories = use.size();
  if (use.empty()) {
    res.stats.skipped = true;
    return res;
  }
  std::size_t steps = 0;
  for (auto i : use) steps = std::max(steps, trajs[i].prompt.size() + trajs[i].response.size() - 1);
  const std::size_t B = use.size();
  std::vector<int> inputs(B * steps, Tokenizer::kPad), targets(B * steps, Tokenizer::kPad);
  std::vector<T> weight(B * steps, T(0)), adv(B * steps, T(0)), old(B * steps, T(0));
  const double n_total = static_cast<double>(trajs.size());
  for (std::size_t r = 0; r < B; ++r) {
    const auto& t = trajs[use[r]];
    std::vector<int> seq = t.prompt;
    seq.insert(seq.end(), t.response.begin(), t.response.end());
    for (std::size_t j = 0; j + 1 < seq.size(); ++j) {
      inputs[r * steps + j] = seq[j];
      targets[r * steps + j] = seq[j + 1];
    }
    const double w = 1.0 / (n_total * static_cast<double>(t.response.size()));
    for (std::size_t j = 0; j < t.response.size(); ++j) {
      const std::size_t pos = r * steps + t.prompt.size() - 1 + j;
      weight[pos] = static_cast<T>(w);
      adv[pos] = static_cast<T>(advantages[use[r]]);
      old[pos] = static_cast<T>(t.logprobs[j]);
    }
    res.stats.tokens += t.response.size();
  }

  const NoiseMode previous = model.mode();
  model.set_mode(NoiseMode::mean_shift);
  Tensor<T> logits;
  try {
    logits = model.forward(inputs, B, steps, nullptr, &adapter);
  } catch (...) {
    model.set_mode(previous);
    throw;
  }
  model.set_mode(previous);
  const T temp = cfg.temperature > 0.0 ? static_cast<T>(cfg.temperature) : T(1);
  auto logp = token_logprobs(logits, targets, temp);

  // Ratios are only meaningful at response positions; elsewhere the rollout
  // log-prob is replaced by the current one so rho = 1 there.
  std::vector<T> base(B * steps);
  for (std::size_t i = 0; i < base.size(); ++i) base[i] = weight[i] != T(0) ? old[i] : logp.ptr()[i];
  auto ratio = exp(sub(logp, Tensor<T>({B, steps}, base)));
  auto surr1 = mul_const(ratio, std::span<const T>(adv));
  auto surr2 = mul_const(clamp(ratio, static_cast<T>(1.0 - cfg.clip), static_cast<T>(1.0 + cfg.clip)),
                         std::span<const T>(adv));
  auto obj = minimum(surr1, surr2);
  std::vector<T> neg_weight(weight.size());
  for (std::size_t i = 0; i < weight.size(); ++i) neg_weight[i] = -weight[i];
  Tensor<T> loss = weighted_sum(obj, std::span<const T>(neg_weight));

  if (cfg.kl_coef > 0.0) {
    std::vector<double> ref(B * steps, 0.0);
    {
      NoGradScope<T> no_grad;
      model.set_mode(NoiseMode::mean_shift);
      auto ref_logits = model.forward(inputs, B, steps, nullptr, nullptr);
      model.set_mode(previous);
      auto ref_lp = token_logprobs(ref_logits, targets, temp);
      for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = static_cast<double>(ref_lp.ptr()[i]);
    }
    std::vector<T> ref_t(B * steps);
    for (std::size_t i = 0; i < ref_t.size(); ++i) ref_t[i] = weight[i] != T(0) ? static_cast<T>(ref[i]) : logp.ptr()[i];
    auto d = sub(Tensor<T>({B, steps}, ref_t), logp);
    auto k3 = sub(exp(d), d);  // + (-1) folded into the constant below
    std::vector<T> kw(weight.size());
    T wsum = T(0);
    for (std::size_t i = 0; i < weight.size(); ++i) {
      kw[i] = static_cast<T>(cfg.kl_coef) * weight[i];
      wsum += kw[i];
    }
    auto kl_term = weighted_sum(k3, std::span<const T>(kw));
    res.stats.kl = static_cast<double>(kl_term.item() - wsum) / cfg.kl_coef;
    loss = add(loss, sub(kl_term, Tensor<T>::scalar(wsum)));
  }

  double ratio_sum = 0.0;
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (weight[i] == T(0)) continue;
    const double rho = static_cast<double>(ratio.ptr()[i]);
    ratio_sum += rho;
    if (rho < 1.0 - cfg.clip || rho > 1.0 + cfg.clip) ++clipped;
  }
  res.stats.mean_ratio = ratio_sum / static_cast<double>(res.stats.tokens);
  res.stats.clip_fraction = static_cast<double>(clipped) / static_cast<double>(res.stats.tokens);
  res.stats.loss = static_cast<double>(loss.item());
  res.loss = loss;
  return res;
}

/// One optimizer step on the adapter. Throws NumericError, leaving the adapter
/// untouched, when the loss or gradient is not finite.
template <typename T>
GrpoStats grpo_update(WrappedModel<T>& model, LoraAdapter<T>& adapter, Adam<T>& opt,
                      std::span<const Trajectory> trajs, std::span<const double> advantages,
                      const GrpoConfig& cfg) {
  TapeScope<T> scope;
  auto obj = grpo_objective(model, adapter, trajs, advantages, cfg);
  if (obj.stats.skipped) return obj.stats;
  if (!std::isfinite(obj.stats.loss))
    throw NumericError("grpo: non-finite loss " + std::to_string(obj.stats.loss) + " over " +
                       std::to_string(obj.stats.tokens) + " tokens (mean ratio " +
                       std::to_string(obj.stats.mean_ratio) + ")");
  opt.zero_grad();
  scope.backward(obj.loss);
  const double norm = opt.grad_norm();
  if (!std::isfinite(norm)) throw NumericError("grpo: non-finite gradient norm");
  obj.stats.grad_norm = opt.step();
  return obj.stats;
}

struct EvalMetrics {
  double pass_at_1 = 0.0;  // first member correct
  double pass_at_g = 0.0;  // any member correct
  double accuracy = 0.0;   // mean over all members
  std::optional<double> diversity;
  std::optional<double> scs;      // mean over chains with at least two steps
  std::size_t generations = 0;
  std::size_t scs_chains = 0;
};

struct StepRecord {
  std::size_t step = 0;
  std::optional<double> mean_reward;  // absent for the initial record
  std::optional<GrpoStats> update;
  std::optional<EvalMetrics> eval;
};

/// First step whose trailing mean reward over a full window of `window` steps
/// reaches `threshold`; `total_steps + 1` when it never does.
inline std::size_t steps_to_threshold(std::span<const StepRecord> records, double threshold,
                                      std::size_t window, std::size_t total_steps) {
  std::vector<double> rewards;
  for (const auto& r : records) {
    if (!r.mean_reward) continue;
    rewards.push_back(*r.mean_reward);
    if (rewards.size() < window) continue;
    double s = 0.0;
    for (std::size_t i = rewards.size() - window; i < rewards.size(); ++i) s += rewards[i];
    if (s / static_cast<double>(window) >= threshold) return r.step;
  }
  return total_steps + 1;
}

/// Samples G members per prompt with the run's rollout settings. Member g of
/// prompt i uses noise seed member_seed(derive_key(noise_base, i), g) and
/// decode seed member_seed(derive_key(decode_base, i), g).
template <typename T>
EvalMetrics evaluate_seeded(WrappedModel<T>& model, const LoraAdapter<T>* adapter,
                            const std::vector<TaskInstance>& prompts, const TrainConfig& cfg,
                            const BaseEncoder<T>* encoder, std::uint64_t noise_base, std::uint64_t decode_base) {
  if (prompts.empty()) throw ContractError("evaluate: no prompts");
  EvalMetrics m;
  double div_sum = 0.0, scs_sum = 0.0;
  std::size_t div_n = 0;
  const NoiseMode previous = model.mode();
  model.set_mode(cfg.rollout_mode);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    std::vector<std::uint64_t> noise(cfg.group_size), dec(cfg.group_size);
    for (std::size_t g = 0; g < cfg.group_size; ++g) {
      noise[g] = member_seed(derive_key(noise_base, i), g);
      dec[g] = member_seed(derive_key(decode_base, i), g);
    }
    auto group = rollout_group(model, adapter, prompts[i].prompt, cfg.decode(), noise, dec, i);
    std::vector<bool> correct;
    for (const auto& t : group) correct.push_back(!t.failed && TaskSpec::verify(t.answer, prompts[i].answer));
    m.pass_at_1 += correct[0] ? 1.0 : 0.0;
    m.pass_at_g += std::any_of(correct.begin(), correct.end(), [](bool c) { return c; }) ? 1.0 : 0.0;
    m.accuracy += static_cast<double>(std::count(correct.begin(), correct.end(), true)) /
                  static_cast<double>(correct.size());
    m.generations += group.size();
    if (encoder) {
      std::vector<std::string> texts;
      for (const auto& t : group) texts.push_back(t.text);
      auto emb = encoder->embed_texts(texts);
      div_sum += pairwise_cosine_diversity(std::span<const Embedding>(emb));
      ++div_n;
      for (const auto& t : group)
        if (auto s = scs(segment_steps(t.text), *encoder)) {
          scs_sum += *s;
          ++m.scs_chains;
        }
    }
  }
  model.set_mode(previous);
  const double n = static_cast<double>(prompts.size());
  m.pass_at_1 /= n;
  m.pass_at_g /= n;
  m.accuracy /= n;
  if (div_n) m.diversity = div_sum / static_cast<double>(div_n);
  if (m.scs_chains) m.scs = scs_sum / static_cast<double>(m.scs_chains);
  return m;
}

/// Evaluation draws depend only on `eval_seed` and the prompt index, so
/// evaluations at different steps (and runs that differ only in sigma) share them.
template <typename T>
EvalMetrics evaluate(WrappedModel<T>& model, const LoraAdapter<T>* adapter,
                     const std::vector<TaskInstance>& prompts, const TrainConfig& cfg,
                     const BaseEncoder<T>* encoder) {
  return evaluate_seeded(model, adapter, prompts, cfg, encoder, derive_key(cfg.eval_seed, 1),
                         derive_key(cfg.eval_seed, 2));
}

template <typename T>
struct TrainerState {
  LoraAdapter<T> adapter;
  std::size_t completed_steps = 0;
  std::vector<std::vector<double>> adam_m, adam_v;
  std::size_t adam_t = 0;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_record;
  // Called after each evaluation step with the step index.
  std::function<void(std::size_t)> on_checkpoint;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::size_t step) : NumericError(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// GRPO training of a LoRA adapter over a frozen base.
///
/// rlvr: prompts come from the stratified training split and rewards are
/// exact-match against the reference answer.
/// ttrl: prompts come from the held-out split itself and rewards come from the
/// group's majority vote; labels are only used for evaluation.
template <typename T>
class Trainer {
 public:
  Trainer(const ModelParams<T>& base, TaskSpec task, TrainConfig cfg, TrainMode mode)
      : model_(base, NoisePrior{cfg.mu, cfg.sigma}, SiteSelector{}, cfg.rollout_mode, cfg.seed),
        encoder_(model_.base()),
        task_(task),
        cfg_(cfg),
        mode_(mode),
        state_{LoraAdapter<T>::create(base.config, cfg.lora_rank, cfg.lora_alpha, derive_key(cfg.seed, 0x10A4)),
               0, {}, {}, 0} {
    cfg_.validate();
    task_.validate();
    eval_set_ = make_dataset(task_, cfg_.eval_prompts, cfg_.eval_seed, Split::heldout);
    train_set_ = mode_ == TrainMode::rlvr
                     ? make_dataset(task_, cfg_.train_instances, cfg_.data_seed, Split::train)
                     : eval_set_;
    make_optimizer();
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const noexcept { return cfg_; }
  const TrainerState<T>& state() const noexcept { return state_; }
  const LoraAdapter<T>& adapter() const noexcept { return state_.adapter; }
  const Adam<T>& optimizer() const noexcept { return *opt_; }
  const std::vector<TaskInstance>& eval_set() const noexcept { return eval_set_; }
  const std::vector<TaskInstance>& train_set() const noexcept { return train_set_; }
  WrappedModel<T>& model() noexcept { return model_; }

  /// Continues from a saved adapter and optimizer state.
  void resume(TrainerState<T> s) {
    state_ = std::move(s);
    make_optimizer();
    if (!state_.adam_m.empty()) opt_->restore(state_.adam_m, state_.adam_v, state_.adam_t);
  }

  /// Indices of the training prompts used at `step` (1-based): consecutive
  /// chunks of a seed-dependent permutation, reshuffled every epoch.
  std::vector<std::size_t> prompts_for_step(std::size_t step) const {
    const std::size_t n = train_set_.size();
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < cfg_.prompts_per_step; ++j) {
      const std::size_t flat = (step - 1) * cfg_.prompts_per_step + j;
      const std::size_t epoch = flat / n, pos = flat % n;
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      CounterRng rng(derive_key(derive_key(cfg_.seed, 0x5EED), epoch));
      for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
      out.push_back(perm[pos]);
    }
    return out;
  }

  EvalMetrics run_eval() {
    return evaluate(model_, &state_.adapter, eval_set_, cfg_, cfg_.eval_metrics ? &encoder_ : nullptr);
  }

  StepRecord step(std::size_t s) {
    model_.set_mode(cfg_.rollout_mode);
    std::vector<Trajectory> trajs;
    std::vector<double> advantages;
    double reward_sum = 0.0;
    const auto idx = prompts_for_step(s);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto& inst = train_set_[idx[j]];
      std::vector<std::uint64_t> noise(cfg_.group_size), dec(cfg_.group_size);
      const std::uint64_t base = derive_key(derive_key(cfg_.seed, s), j);
      for (std::size_t g = 0; g < cfg_.group_size; ++g) {
        noise[g] = member_seed(derive_key(base, 1), g);
        dec[g] = member_seed(derive_key(base, 2), g);
      }
      auto group = rollout_group(model_, &state_.adapter, inst.prompt, cfg_.decode(), noise, dec, j);
      std::vector<double> rewards;
      if (mode_ == TrainMode::rlvr) {
        for (const auto& t : group) rewards.push_back(t.failed ? 0.0 : verifiable_reward(inst, t.text));
      } else {
        std::vector<std::optional<std::string>> answers;
        for (const auto& t : group) answers.push_back(t.failed ? std::nullopt : t.answer);
        rewards = ttrl_rewards(answers);
      }
      for (std::size_t g = 0; g < group.size(); ++g) {
        group[g].reward = rewards[g];
        reward_sum += rewards[g];
      }
      auto a = grpo_advantages(rewards);
      advantages.insert(advantages.end(), a.begin(), a.end());
      for (auto& t : group) trajs.push_back(std::move(t));
    }
    StepRecord rec;
    rec.step = s;
    rec.mean_reward = reward_sum / static_cast<double>(trajs.size());
    try {
      rec.update = grpo_update(model_, state_.adapter, *opt_, trajs, advantages,
                               GrpoConfig{cfg_.clip, cfg_.kl_coef, cfg_.temperature});
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(s) + ": " + e.what(), s);
    }
    state_.completed_steps = s;
    state_.adam_t = opt_->steps_taken();
    return rec;
  }

  /// Runs from the current state to cfg.steps. A fresh run first emits the
  /// step-0 evaluation record. Returns the records emitted by this call.
  std::vector<StepRecord> run(const TrainHooks& hooks = {}) {
    std::vector<StepRecord> records;
    auto emit = [&](StepRecord r) {
      if (hooks.on_record) hooks.on_record(r);
      records.push_back(std::move(r));
    };
    if (state_.completed_steps == 0) {
      StepRecord r;
      r.step = 0;
      r.eval = run_eval();
      emit(std::move(r));
    }
    for (std::size_t s = state_.completed_steps + 1; s <= cfg_.steps; ++s) {
      auto rec = step(s);
      const bool eval_now = s % cfg_.eval_interval == 0 || s == cfg_.steps;
      if (eval_now) rec.eval = run_eval();
      emit(std::move(rec));
      if (eval_now && hooks.on_checkpoint) hooks.on_checkpoint(s);
    }
    return records;
  }

  /// Snapshot of the resumable state, including optimizer moments.
  TrainerState<T> snapshot() const {
    TrainerState<T> s;
    s.adapter = state_.adapter.clone();
    s.completed_steps = state_.completed_steps;
    s.adam_m = opt_->first_moments();
    s.adam_v = opt_->second_moments();
    s.adam_t = opt_->steps_taken();
    return s;
  }

 private:
  void make_optimizer() {
    AdamConfig ac;
    ac.lr = cfg_.lr;
    opt_ = std::make_unique<Adam<T>>(state_.adapter.parameters(), ac);
  }

  WrappedModel<T> model_;
  BaseEncoder<T> encoder_;
  TaskSpec task_;
  TrainConfig cfg_;
  TrainMode mode_;
  TrainerState<T> state_;
  std::unique_ptr<Adam<T>> opt_;
  std::vector<TaskInstance> eval_set_;
  std::vector<TaskInstance> train_set_;
};

}  // namespace btrans
