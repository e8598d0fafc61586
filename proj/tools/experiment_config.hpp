// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: a single JSON document, strict about unknown keys.

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "btrans/btrans.hpp"
#include "json.hpp"

namespace btrans::cli {

using nlohmann::json;

struct PopulationSettings {
  std::size_t K = 8;
  std::string prompts;            // file path; empty means a probe suite drawn from the task
  std::size_t probe_prompts = 20;
  std::uint64_t probe_seed = 4242;
  std::vector<double> sigmas;     // empty means [noise.sigma]
  bool batched = false;
};

struct ExperimentConfig {
  std::string checkpoint;  // empty: freshly initialized weights
  ModelConfig model;
  std::uint64_t init_seed = 0;
  NoisePrior noise;
  NoiseMode noise_mode = NoiseMode::sequence;
  std::uint64_t noise_seed = 0;
  SiteSelector target;
  DecodeConfig decode;
  TaskSpec task;
  PopulationSettings population;
  TrainConfig train;  // noise and decode fields are filled from their own blocks
  SftConfig sft;
  std::string output_dir;
  std::size_t jobs = 1;

  /// Copies the noise and decode blocks into the train config.
  TrainConfig effective_train() const {
    TrainConfig t = train;
    t.sigma = noise.sigma;
    t.mu = noise.mu;
    t.rollout_mode = noise_mode;
    t.temperature = decode.temperature;
    t.top_k = decode.top_k;
    t.max_new_tokens = decode.max_new_tokens;
    return t;
  }

  void validate() const {
    model.validate();
    noise.validate();
    task.validate();
    effective_train().validate();
    sft.validate();
    if (population.K < 1) throw ConfigError("population.K must be at least 1");
    if (population.probe_prompts < 1) throw ConfigError("population.probe_prompts must be at least 1");
    for (double s : population.sigmas) NoisePrior{noise.mu, s}.validate();
    if (decode.temperature < 0.0) throw ConfigError("decode.temperature must be non-negative");
    if (decode.max_new_tokens < 1) throw ConfigError("decode.max_new_tokens must be at least 1");
    if (jobs < 1) throw ConfigError("jobs must be at least 1");
  }
};

namespace detail {

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  std::optional<json> sub(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ModelConfig parse_model_config(const json& j, const std::string& where) {
  ModelConfig m;
  detail::Reader r(j, where);
  r.get("vocab_size", m.vocab_size);
  r.get("d_model", m.d_model);
  r.get("n_layers", m.n_layers);
  r.get("n_heads", m.n_heads);
  r.get("d_ff", m.d_ff);
  r.get("max_seq_len", m.max_seq_len);
  r.get("norm_eps", m.norm_eps);
  r.get("rope_base", m.rope_base);
  r.finish();
  return m;
}

inline json model_config_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size}, {"d_model", m.d_model},         {"n_layers", m.n_layers},
          {"n_heads", m.n_heads},       {"d_ff", m.d_ff},               {"max_seq_len", m.max_seq_len},
          {"norm_eps", m.norm_eps},     {"rope_base", m.rope_base}};
}

inline ExperimentConfig parse_experiment(const json& j) {
  ExperimentConfig c;
  detail::Reader top(j, "config");
  if (auto m = top.sub("model")) {
    detail::Reader r(*m, "model");
    r.get("checkpoint", c.checkpoint);
    r.get("init_seed", c.init_seed);
    if (auto mc = r.sub("config")) c.model = parse_model_config(*mc, "model.config");
    r.finish();
  }
  if (auto n = top.sub("noise")) {
    detail::Reader r(*n, "noise");
    std::string mode = std::string(to_string(c.noise_mode));
    r.get("mu", c.noise.mu);
    r.get("sigma", c.noise.sigma);
    r.get("mode", mode);
    r.get("noise_seed", c.noise_seed);
    r.get("target", c.target.target);
    r.get("sites", c.target.names);
    r.finish();
    c.noise_mode = parse_noise_mode(mode);
    if (c.noise_mode == NoiseMode::mean_shift) throw ConfigError("noise.mode must be off|sequence|token");
  }
  if (auto d = top.sub("decode")) {
    detail::Reader r(*d, "decode");
    r.get("temperature", c.decode.temperature);
    r.get("top_k", c.decode.top_k);
    r.get("max_new_tokens", c.decode.max_new_tokens);
    r.get("seed", c.decode.seed);
    r.finish();
  }
  if (auto t = top.sub("task")) {
    detail::Reader r(*t, "task");
    std::string kind = std::string(to_string(c.task.kind));
    r.get("kind", kind);
    r.get("min_digits", c.task.min_digits);
    r.get("max_digits", c.task.max_digits);
    r.get("modulus", c.task.modulus);
    r.get("heldout_mod", c.task.heldout_mod);
    r.finish();
    c.task.kind = parse_task_kind(kind);
  }
  if (auto p = top.sub("population")) {
    detail::Reader r(*p, "population");
    r.get("K", c.population.K);
    r.get("prompts", c.population.prompts);
    r.get("probe_prompts", c.population.probe_prompts);
    r.get("probe_seed", c.population.probe_seed);
    r.get("sigmas", c.population.sigmas);
    r.get("batched", c.population.batched);
    r.finish();
  }
  if (auto t = top.sub("train")) {
    detail::Reader r(*t, "train");
    auto& x = c.train;
    r.get("group_size", x.group_size);
    r.get("prompts_per_step", x.prompts_per_step);
    r.get("lr", x.lr);
    r.get("clip", x.clip);
    r.get("kl_coef", x.kl_coef);
    r.get("steps", x.steps);
    r.get("eval_interval", x.eval_interval);
    r.get("eval_prompts", x.eval_prompts);
    r.get("eval_seed", x.eval_seed);
    r.get("train_instances", x.train_instances);
    r.get("data_seed", x.data_seed);
    r.get("lora_rank", x.lora_rank);
    r.get("lora_alpha", x.lora_alpha);
    r.get("seed", x.seed);
    r.get("reward_threshold", x.reward_threshold);
    r.get("reward_window", x.reward_window);
    r.get("eval_metrics", x.eval_metrics);
    r.finish();
  }
  if (auto s = top.sub("sft")) {
    detail::Reader r(*s, "sft");
    r.get("steps", c.sft.steps);
    r.get("batch", c.sft.batch);
    r.get("lr", c.sft.lr);
    r.get("warmup", c.sft.warmup);
    r.get("instances", c.sft.instances);
    r.get("seed", c.sft.seed);
    r.get("data_seed", c.sft.data_seed);
    r.finish();
  }
  top.get("output_dir", c.output_dir);
  top.get("jobs", c.jobs);
  top.finish();
  return c;
}

/// Full document, every field explicit, so a run directory reproduces itself.
inline json experiment_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  return {
      {"model", {{"checkpoint", c.checkpoint}, {"init_seed", c.init_seed}, {"config", model_config_json(c.model)}}},
      {"noise",
       {{"mu", c.noise.mu},
        {"sigma", c.noise.sigma},
        {"mode", std::string(to_string(c.noise_mode))},
        {"noise_seed", c.noise_seed},
        {"target", c.target.target},
        {"sites", c.target.names}}},
      {"decode",
       {{"temperature", c.decode.temperature},
        {"top_k", c.decode.top_k},
        {"max_new_tokens", c.decode.max_new_tokens},
        {"seed", c.decode.seed}}},
      {"task",
       {{"kind", std::string(to_string(c.task.kind))},
        {"min_digits", c.task.min_digits},
        {"max_digits", c.task.max_digits},
        {"modulus", c.task.modulus},
        {"heldout_mod", c.task.heldout_mod}}},
      {"population",
       {{"K", c.population.K},
        {"prompts", c.population.prompts},
        {"probe_prompts", c.population.probe_prompts},
        {"probe_seed", c.population.probe_seed},
        {"sigmas", c.population.sigmas},
        {"batched", c.population.batched}}},
      {"train",
       {{"group_size", t.group_size},
        {"prompts_per_step", t.prompts_per_step},
        {"lr", t.lr},
        {"clip", t.clip},
        {"kl_coef", t.kl_coef},
        {"steps", t.steps},
        {"eval_interval", t.eval_interval},
        {"eval_prompts", t.eval_prompts},
        {"eval_seed", t.eval_seed},
        {"train_instances", t.train_instances},
        {"data_seed", t.data_seed},
        {"lora_rank", t.lora_rank},
        {"lora_alpha", t.lora_alpha},
        {"seed", t.seed},
        {"reward_threshold", t.reward_threshold},
        {"reward_window", t.reward_window},
        {"eval_metrics", t.eval_metrics}}},
      {"sft",
       {{"steps", c.sft.steps},
        {"batch", c.sft.batch},
        {"lr", c.sft.lr},
        {"warmup", c.sft.warmup},
        {"instances", c.sft.instances},
        {"seed", c.sft.seed},
        {"data_seed", c.sft.data_seed}}},
      {"output_dir", c.output_dir},
      {"jobs", c.jobs}};
}

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return parse_experiment(j);
}

}  // namespace btrans::cli
