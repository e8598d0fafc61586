// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// btrans: generation, population sampling, ablations, RL training and memory
// accounting over the toy transformer.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "experiment_config.hpp"

namespace fs = std::filesystem;
using namespace btrans;
using namespace btrans::cli;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitDiverged = 3;

struct Overrides {
  std::string config;
  std::optional<std::string> out, checkpoint, mode, task;
  std::optional<double> sigma, mu, temperature;
  std::optional<std::uint64_t> noise_seed, decode_seed;
  std::optional<std::size_t> top_k, max_new_tokens, jobs;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config, "Experiment config (JSON)");
  app->add_option("-o,--out", o.out, "Output directory");
  app->add_option("--checkpoint", o.checkpoint, "Base model checkpoint");
  app->add_option("--sigma", o.sigma, "Noise standard deviation");
  app->add_option("--mu", o.mu, "Noise mean");
  app->add_option("--mode", o.mode, "Noise mode: off|sequence|token");
  app->add_option("--noise-seed", o.noise_seed, "Base noise seed");
  app->add_option("--decode-seed", o.decode_seed, "Base decode seed");
  app->add_option("--temperature", o.temperature, "Sampling temperature (0 = greedy)");
  app->add_option("--top-k", o.top_k, "Top-k filter (0 = off)");
  app->add_option("--max-new-tokens", o.max_new_tokens, "Generation budget");
  app->add_option("--task", o.task, "Task kind: addition|modular|list_max");
  app->add_option("-j,--jobs", o.jobs, "Worker threads (capped by BTRANS_THREADS)");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c;
  if (!o.config.empty()) c = load_experiment(o.config);
  if (o.out) c.output_dir = *o.out;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.sigma) c.noise.sigma = *o.sigma;
  if (o.mu) c.noise.mu = *o.mu;
  if (o.mode) {
    c.noise_mode = parse_noise_mode(*o.mode);
    if (c.noise_mode == NoiseMode::mean_shift) throw ConfigError("--mode must be off|sequence|token");
  }
  if (o.noise_seed) c.noise_seed = *o.noise_seed;
  if (o.decode_seed) c.decode.seed = *o.decode_seed;
  if (o.temperature) c.decode.temperature = *o.temperature;
  if (o.top_k) c.decode.top_k = *o.top_k;
  if (o.max_new_tokens) c.decode.max_new_tokens = *o.max_new_tokens;
  if (o.task) {
    c.task.kind = parse_task_kind(*o.task);
    if (c.task.kind == TaskKind::list_max && c.task.min_digits < 2) {
      c.task.min_digits = 2;
      c.task.max_digits = std::max<std::size_t>(c.task.max_digits, 5);
    }
  }
  if (o.jobs) c.jobs = *o.jobs;
  return c;
}

std::size_t worker_count(const ExperimentConfig& c) {
  std::size_t n = c.jobs;
  if (const char* env = std::getenv("BTRANS_THREADS")) {
    try {
      const auto cap = static_cast<std::size_t>(std::stoul(env));
      if (cap >= 1) n = std::min(n, cap);
    } catch (const std::exception&) {
      throw ConfigError(std::string("BTRANS_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return std::max<std::size_t>(1, n);
}

/// Loads the base model; the config's model block is replaced by the checkpoint's.
ModelParams<float> load_base(ExperimentConfig& c) {
  if (c.checkpoint.empty()) return init_model<float>(c.model, c.init_seed);
  if (!fs::exists(c.checkpoint)) throw InputError("checkpoint not found: " + c.checkpoint);
  auto p = load_checkpoint<float>(c.checkpoint);
  c.model = p.config;
  return p;
}

fs::path require_output(const ExperimentConfig& c) {
  if (c.output_dir.empty()) throw ConfigError("an output directory is required (--out or output_dir)");
  fs::create_directories(c.output_dir);
  return c.output_dir;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw InputError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void write_config_copy(const fs::path& dir, const ExperimentConfig& c) {
  write_text(dir / "config.json", experiment_json(c).dump(2) + "\n");
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Runs fn(i, worker) for i in [0, n) on `workers` threads; results are written
/// by index, so the schedule does not affect any output.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::min(workers, std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i, w);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct Prompt {
  std::string id;
  std::string text;  // ends with '\n'
  std::optional<std::string> answer;
};

std::string prompt_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "p%05zu", i);
  return buf;
}

/// One prompt per non-empty line, optionally followed by a tab and the answer.
std::vector<Prompt> read_prompts(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<Prompt> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Prompt p;
    p.id = prompt_id(out.size());
    const auto tab = line.find('\t');
    p.text = line.substr(0, tab) + "\n";
    if (tab != std::string::npos) p.answer = extract_answer("=" + line.substr(tab + 1));
    if (!Tokenizer::representable(p.text))
      throw InputError("prompts file '" + path.string() + "', line " + std::to_string(out.size() + 1) +
                       ": characters outside the tokenizer alphabet");
    out.push_back(std::move(p));
  }
  if (out.empty()) throw InputError("prompts file '" + path.string() + "' has no prompts");
  return out;
}

std::vector<Prompt> probe_suite(const ExperimentConfig& c) {
  std::vector<Prompt> out;
  for (auto& t : make_dataset(c.task, c.population.probe_prompts, c.population.probe_seed, Split::heldout))
    out.push_back({prompt_id(out.size()), t.prompt, t.answer});
  return out;
}

std::vector<Prompt> load_prompts(const ExperimentConfig& c) {
  return c.population.prompts.empty() ? probe_suite(c) : read_prompts(c.population.prompts);
}

json member_json(const MemberRecord& m) {
  json j{{"k", m.k},
         {"noise_seed", m.noise_seed},
         {"decode_seed", m.decode_seed},
         {"text", m.text},
         {"answer", m.answer ? json(*m.answer) : json(nullptr)},
         {"logprob_sum", m.logprob_sum()}};
  if (m.error) j["error"] = *m.error;
  return j;
}

// ---------------------------------------------------------------- generate

int cmd_generate(ExperimentConfig c, const std::string& prompt) {
  auto base = load_base(c);
  c.validate();
  if (!Tokenizer::representable(prompt)) throw InputError("prompt has characters outside the tokenizer alphabet");
  auto w = apply_bayesian_transform(base, c.noise, c.target, c.noise_mode, c.noise_seed);
  PopulationOptions po;
  po.K = 1;
  po.decode = c.decode;
  po.noise_seed = c.noise_seed;
  const std::string text = prompt.empty() || prompt.back() != '\n' ? prompt + "\n" : prompt;
  auto r = sample_population(w, text, po);
  const auto& m = r.members.front();
  if (m.error) throw std::runtime_error("generation failed: " + *m.error);
  std::cout << m.text << "\n";
  if (!c.output_dir.empty()) {
    const auto dir = require_output(c);
    json j = member_json(m);
    j["prompt"] = text;
    j["sigma"] = c.noise.sigma;
    j["mode"] = std::string(to_string(c.noise_mode));
    write_text(dir / "generation.json", j.dump() + "\n");
  }
  return kExitOk;
}

// -------------------------------------------------------------- population

struct PromptOutcome {
  PopulationResult result;
  std::optional<double> scs_mean;
  std::vector<std::vector<double>> embeddings;
};

int cmd_population(ExperimentConfig c) {
  auto base = load_base(c);
  c.validate();
  const auto dir = require_output(c);
  const auto prompts = load_prompts(c);
  const std::size_t K = c.population.K;
  auto sigmas = c.population.sigmas;
  if (sigmas.empty()) sigmas.push_back(c.noise.sigma);
  const std::size_t workers = worker_count(c);
  BaseEncoder<float> encoder(base);

  std::string jsonl, diversity_csv = "config,sigma,temperature,diversity,scs_mean\n";
  std::string summary_csv = "sigma,prompts,diversity";
  for (std::size_t k = 1; k <= K; ++k) summary_csv += ",pass@" + std::to_string(k);
  summary_csv += "\n";
  std::string pca_csv = "sigma,prompt_id,member_k,pc1,pc2,label\n";

  for (double sigma : sigmas) {
    std::vector<PromptOutcome> outcomes(prompts.size());
    std::vector<WrappedModel<float>> models;
    for (std::size_t w = 0; w < std::min(workers, prompts.size()); ++w)
      models.push_back(apply_bayesian_transform(base, NoisePrior{c.noise.mu, sigma}, c.target, c.noise_mode,
                                                c.noise_seed));
    parallel_for(prompts.size(), models.size(), [&](std::size_t i, std::size_t w) {
      PopulationOptions po;
      po.K = K;
      po.decode = c.decode;
      po.noise_seed = c.noise_seed;
      po.batched = c.population.batched;
      auto& out = outcomes[i];
      out.result = sample_population(models[w], prompts[i].text, po);
      out.result.prompt_id = prompts[i].id;
      if (prompts[i].answer) score_population(out.result, *prompts[i].answer);
      std::vector<std::string> texts;
      for (const auto& m : out.result.members) texts.push_back(m.text);
      auto emb = encoder.embed_texts(texts);
      if (K >= 2) out.result.diversity = pairwise_cosine_diversity(std::span<const Embedding>(emb));
      for (auto& e : emb) out.embeddings.push_back(std::move(e.values));
      double s = 0.0;
      std::size_t n = 0;
      for (const auto& m : out.result.members)
        if (auto v = scs(segment_steps(m.text), encoder)) {
          s += *v;
          ++n;
        }
      if (n) out.scs_mean = s / static_cast<double>(n);
    });
    std::sort(outcomes.begin(), outcomes.end(),
              [](const PromptOutcome& a, const PromptOutcome& b) { return a.result.prompt_id < b.result.prompt_id; });

    double div_sum = 0.0, scs_sum = 0.0;
    std::size_t div_n = 0, scs_n = 0, scored = 0;
    std::vector<double> pass(K, 0.0);
    for (const auto& o : outcomes) {
      const auto& r = o.result;
      json members = json::array();
      for (const auto& m : r.members) members.push_back(member_json(m));
      json votes = json::array();
      for (const auto& [a, n] : r.vote.counts) votes.push_back({a, n});
      json rec{{"prompt_id", r.prompt_id},
               {"K", K},
               {"sigma", sigma},
               {"mode", std::string(to_string(c.noise_mode))},
               {"temperature", c.decode.temperature},
               {"prompt", r.prompt},
               {"members", members},
               {"consensus", r.vote.consensus ? json(*r.vote.consensus) : json(nullptr)},
               {"votes", votes},
               {"pass_at_k", r.pass_at_k},
               {"diversity", r.diversity ? json(*r.diversity) : json(nullptr)},
               {"scs_mean", o.scs_mean ? json(*o.scs_mean) : json(nullptr)}};
      jsonl += rec.dump() + "\n";
      if (r.diversity) {
        div_sum += *r.diversity;
        ++div_n;
      }
      if (o.scs_mean) {
        scs_sum += *o.scs_mean;
        ++scs_n;
      }
      if (!r.pass_at_k.empty()) {
        ++scored;
        for (std::size_t k = 0; k < K; ++k) pass[k] += r.pass_at_k[k];
      }
      if (K > 2) {
        auto pca = pca_project(o.embeddings, 2);
        for (std::size_t k = 0; k < K; ++k)
          pca_csv += num(sigma) + "," + r.prompt_id + "," + std::to_string(k) + "," + num(pca.coords[k][0]) + "," +
                     num(pca.coords[k][1]) + "," + r.members[k].answer.value_or("none") + "\n";
      }
    }
    const std::string div = div_n ? num(div_sum / static_cast<double>(div_n)) : "";
    const std::string scs_str = scs_n ? num(scs_sum / static_cast<double>(scs_n)) : "";
    diversity_csv += std::string(to_string(c.noise_mode)) + "," + num(sigma) + "," + num(c.decode.temperature) + "," +
                     div + "," + scs_str + "\n";
    summary_csv += num(sigma) + "," + std::to_string(prompts.size()) + "," + div;
    for (std::size_t k = 0; k < K; ++k)
      summary_csv += "," + (scored ? num(pass[k] / static_cast<double>(scored)) : std::string());
    summary_csv += "\n";
    std::cout << "sigma " << num(sigma) << "  diversity " << (div.empty() ? "-" : div) << "  scs "
              << (scs_str.empty() ? "-" : scs_str);
    if (scored) std::cout << "  pass@1 " << num(pass[0] / static_cast<double>(scored)) << "  pass@" << K << " "
                          << num(pass[K - 1] / static_cast<double>(scored));
    std::cout << "\n";
  }
  write_config_copy(dir, c);
  write_text(dir / "population.jsonl", jsonl);
  write_text(dir / "diversity.csv", diversity_csv);
  write_text(dir / "summary.csv", summary_csv);
  if (K > 2) write_text(dir / "pca.csv", pca_csv);
  return kExitOk;
}

// ------------------------------------------------------------------ ablate

int cmd_ablate(ExperimentConfig c) {
  auto base = load_base(c);
  c.validate();
  const auto dir = require_output(c);
  std::vector<TaskInstance> prompts =
      make_dataset(c.task, c.population.probe_prompts, c.population.probe_seed, Split::heldout);
  BaseEncoder<float> encoder(base);
  std::string csv = "mode,sigma,temperature,prompts,generations,accuracy,pass_at_1,pass_at_g,scs_mean,scs_chains,diversity\n";
  std::printf("%-9s %7s %9s %9s %9s %9s\n", "mode", "sigma", "accuracy", "pass@1", "scs", "diversity");
  for (auto mode : {NoiseMode::sequence, NoiseMode::token, NoiseMode::off}) {
    auto tc = c.effective_train();
    tc.rollout_mode = mode;
    tc.group_size = std::max<std::size_t>(2, c.population.K);
    auto w = apply_bayesian_transform(base, c.noise, c.target, mode, c.noise_seed);
    auto m = evaluate_seeded<float>(w, nullptr, prompts, tc, &encoder, c.noise_seed, c.decode.seed);
    csv += std::string(to_string(mode)) + "," + num(c.noise.sigma) + "," + num(c.decode.temperature) + "," +
           std::to_string(prompts.size()) + "," + std::to_string(m.generations) + "," + num(m.accuracy) + "," +
           num(m.pass_at_1) + "," + num(m.pass_at_g) + "," + (m.scs ? num(*m.scs) : "") + "," +
           std::to_string(m.scs_chains) + "," + (m.diversity ? num(*m.diversity) : "") + "\n";
    std::printf("%-9s %7s %9s %9s %9s %9s\n", std::string(to_string(mode)).c_str(), num(c.noise.sigma).c_str(),
                num(m.accuracy).c_str(), num(m.pass_at_1).c_str(), m.scs ? num(*m.scs).c_str() : "-",
                m.diversity ? num(*m.diversity).c_str() : "-");
  }
  write_config_copy(dir, c);
  write_text(dir / "ablation.csv", csv);
  return kExitOk;
}

// ------------------------------------------------------------------- train

json eval_json(const EvalMetrics& e) {
  return {{"pass_at_1", e.pass_at_1},
          {"pass_at_g", e.pass_at_g},
          {"accuracy", e.accuracy},
          {"diversity", e.diversity ? json(*e.diversity) : json(nullptr)},
          {"scs", e.scs ? json(*e.scs) : json(nullptr)}};
}

json record_json(const StepRecord& r) {
  json j{{"step", r.step}};
  j["mean_reward"] = r.mean_reward ? json(*r.mean_reward) : json(nullptr);
  if (r.update) {
    const auto& u = *r.update;
    j["loss"] = u.loss;
    j["mean_ratio"] = u.mean_ratio;
    j["clip_fraction"] = u.clip_fraction;
    j["kl"] = u.kl;
    j["grad_norm"] = u.grad_norm;
    j["tokens"] = u.tokens;
    j["trajectories"] = u.trajectories;
    j["skipped"] = u.skipped;
  }
  if (r.eval) j["eval"] = eval_json(*r.eval);
  return j;
}

std::string step_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu", step);
  return buf;
}

void save_state(const fs::path& dir, const Trainer<float>& trainer, const ModelConfig& cfg) {
  const auto snap = trainer.snapshot();
  const auto ck = dir / "checkpoints";
  fs::create_directories(ck);
  const auto name = step_name(snap.completed_steps);
  save_adapter(snap.adapter, cfg, ck / (name + ".lora.bin"));
  json state{{"completed_steps", snap.completed_steps},
             {"adam_t", snap.adam_t},
             {"adam_m", snap.adam_m},
             {"adam_v", snap.adam_v}};
  write_text(ck / (name + ".state.json"), state.dump() + "\n");
  write_text(dir / "latest.json", json{{"step", snap.completed_steps}, {"name", name}}.dump() + "\n");
}

TrainerState<float> load_state(const fs::path& dir, const ModelConfig& cfg) {
  const auto latest = json::parse(read_file(dir / "latest.json"));
  const auto name = latest.at("name").get<std::string>();
  const auto ck = dir / "checkpoints";
  TrainerState<float> s;
  s.adapter = load_adapter<float>(ck / (name + ".lora.bin"), cfg);
  for (auto& t : s.adapter.parameters()) t.set_requires_grad(true);
  const auto state = json::parse(read_file(ck / (name + ".state.json")));
  s.completed_steps = state.at("completed_steps").get<std::size_t>();
  s.adam_t = state.at("adam_t").get<std::size_t>();
  s.adam_m = state.at("adam_m").get<std::vector<std::vector<double>>>();
  s.adam_v = state.at("adam_v").get<std::vector<std::vector<double>>>();
  return s;
}

int cmd_train(ExperimentConfig c, const std::string& mode_name, std::optional<std::size_t> steps,
              std::optional<std::uint64_t> seed, bool resume) {
  const auto mode = parse_train_mode(mode_name);
  if (steps) c.train.steps = *steps;
  if (seed) c.train.seed = *seed;
  auto base = load_base(c);
  c.validate();
  const auto dir = require_output(c);
  const auto tc = c.effective_train();
  Trainer<float> trainer(base, c.task, tc, mode);

  std::vector<StepRecord> history;
  std::string log;
  if (resume) {
    if (!fs::exists(dir / "latest.json")) throw InputError("nothing to resume in '" + dir.string() + "'");
    auto state = load_state(dir, base.config);
    const std::size_t done = state.completed_steps;
    trainer.resume(std::move(state));
    // Keep only records up to the checkpoint; later ones are replayed.
    std::istringstream in(fs::exists(dir / "metrics.jsonl") ? read_file(dir / "metrics.jsonl") : "");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      StepRecord r;
      r.step = j.at("step").get<std::size_t>();
      if (r.step > done) break;
      if (!j.at("mean_reward").is_null()) r.mean_reward = j.at("mean_reward").get<double>();
      history.push_back(r);
      log += line + "\n";
    }
    std::cerr << "resuming after step " << done << "\n";
  } else {
    write_config_copy(dir, c);
  }
  write_text(dir / "metrics.jsonl", log);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::app);

  const auto t0 = std::chrono::steady_clock::now();
  TrainHooks hooks;
  hooks.on_record = [&](const StepRecord& r) {
    metrics << record_json(r).dump() << "\n";
    metrics.flush();
    history.push_back(r);
    std::cerr << "step " << r.step;
    if (r.mean_reward) std::cerr << " reward " << num(*r.mean_reward);
    if (r.eval) std::cerr << " pass@1 " << num(r.eval->pass_at_1) << " acc " << num(r.eval->accuracy);
    std::cerr << "\n";
  };
  hooks.on_checkpoint = [&](std::size_t) { save_state(dir, trainer, base.config); };
  std::vector<StepRecord> records;
  try {
    records = trainer.run(hooks);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (fs::exists(dir / "latest.json"))
      std::cerr << "last good checkpoint: " << read_file(dir / "latest.json");
    return kExitDiverged;
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::optional<EvalMetrics> final_eval;
  for (const auto& r : history)
    if (r.eval) final_eval = r.eval;
  for (const auto& r : records)
    if (r.eval) final_eval = r.eval;
  json summary{{"mode", mode_name},
               {"steps", tc.steps},
               {"sigma", tc.sigma},
               {"reward_threshold", tc.reward_threshold},
               {"reward_window", tc.reward_window},
               {"steps_to_threshold", steps_to_threshold(history, tc.reward_threshold, tc.reward_window, tc.steps)}};
  if (final_eval) summary["final_eval"] = eval_json(*final_eval);
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_text(dir / "timing.json", json{{"seconds_this_invocation", seconds}}.dump() + "\n");
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

// -------------------------------------------------------------------- eval

int cmd_eval(ExperimentConfig c, const std::string& adapter_path) {
  auto base = load_base(c);
  c.validate();
  std::optional<LoraAdapter<float>> adapter;
  if (!adapter_path.empty()) {
    if (!fs::exists(adapter_path)) throw InputError("adapter not found: " + adapter_path);
    adapter = load_adapter<float>(adapter_path, base.config);
  }
  const auto tc = c.effective_train();
  const auto prompts = make_dataset(c.task, tc.eval_prompts, tc.eval_seed, Split::heldout);
  auto w = apply_bayesian_transform(base, c.noise, c.target, c.noise_mode, c.noise_seed);
  BaseEncoder<float> encoder(base);
  auto m = evaluate<float>(w, adapter ? &*adapter : nullptr, prompts, tc, tc.eval_metrics ? &encoder : nullptr);
  json j = eval_json(m);
  j["prompts"] = prompts.size();
  j["generations"] = m.generations;
  j["sigma"] = c.noise.sigma;
  j["mode"] = std::string(to_string(c.noise_mode));
  std::cout << j.dump(2) << "\n";
  if (!c.output_dir.empty()) write_text(require_output(c) / "eval.json", j.dump(2) + "\n");
  return kExitOk;
}

// ----------------------------------------------------------- memory-report

json memory_entry(const std::string& label, const ModelConfig& m, std::size_t batch) {
  const auto noise = noise_cache_bytes(m, batch), mask = mask_cache_bytes(m, batch);
  json j{{"label", label},
         {"d_model", m.d_model},
         {"n_layers", m.n_layers},
         {"norm_sites", m.norm_sites()},
         {"parameters", m.parameter_count()},
         {"batch", batch},
         {"noise_cache_bytes", noise},
         {"mask_cache_bytes", mask}};
  j["mask_to_noise_ratio"] = noise ? json(static_cast<double>(mask) / static_cast<double>(noise)) : json(nullptr);
  return j;
}

int cmd_memory_report(ExperimentConfig c, std::size_t batch) {
  if (!c.checkpoint.empty()) {
    if (!fs::exists(c.checkpoint)) throw InputError("checkpoint not found: " + c.checkpoint);
    c.model = read_container(c.checkpoint).config;
  }
  c.model.validate();
  json toy = memory_entry("config", c.model, batch);
  if (batch > 0 && c.target.target == "all" && c.target.names.empty()) {
    auto p = init_model<float>(c.model, 0);
    auto w = apply_bayesian_transform(p, NoisePrior{}, c.target, NoiseMode::sequence, 0);
    std::vector<int> toks(batch, Tokenizer::kBos);
    NoGradScope<float> ng;
    w.forward(toks, batch, 1);
    toy["measured_noise_bytes"] = w.allocated_noise_bytes();
  }
  json j{{"entries", {toy, memory_entry("7b_class", ModelConfig::seven_b_class(), batch)}}};
  std::cout << j.dump(2) << "\n";
  if (!c.output_dir.empty()) write_text(require_output(c) / "memory.json", j.dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------- pretrain

int cmd_pretrain(ExperimentConfig c, std::optional<std::size_t> steps) {
  if (steps) c.sft.steps = *steps;
  c.validate();
  const auto dir = require_output(c);
  auto p = init_model<float>(c.model, c.init_seed);
  std::string log;
  supervised_pretrain(p, c.task, c.sft, [&](const SftRecord& r) {
    log += json{{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}}.dump() + "\n";
    if (r.step % 100 == 0 || r.step == c.sft.steps) std::cerr << "step " << r.step << " loss " << num(r.loss) << "\n";
  });
  write_config_copy(dir, c);
  write_text(dir / "sft.jsonl", log);
  save_checkpoint(p, dir / "base.bin");
  std::cout << (dir / "base.bin").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"btrans: stochastic norm offsets, populations and GRPO on a toy transformer"};
  app.require_subcommand(1);
  Overrides o;

  std::string prompt;
  auto* gen = app.add_subcommand("generate", "One persona, one generation");
  add_common(gen, o);
  gen->add_option("-p,--prompt", prompt, "Prompt text")->required();

  std::optional<std::size_t> K;
  std::optional<std::string> prompts_file;
  std::vector<double> sigmas;
  auto* pop = app.add_subcommand("population", "K personas per prompt, with diversity and pass@k");
  add_common(pop, o);
  pop->add_option("-K,--members", K, "Population size");
  pop->add_option("--prompts", prompts_file, "Prompts file (one per line, optional tab + answer)");
  pop->add_option("--sigmas", sigmas, "Sigma sweep");

  auto* abl = app.add_subcommand("ablate", "Sequence vs token vs off noise at matched sigma and seeds");
  add_common(abl, o);
  abl->add_option("-K,--members", K, "Generations per prompt");

  std::string train_mode = "rlvr";
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> train_seed;
  bool resume = false;
  auto* train = app.add_subcommand("train", "GRPO training of a low-rank adapter");
  add_common(train, o);
  train->add_option("kind", train_mode, "rlvr|ttrl")->check(CLI::IsMember({"rlvr", "ttrl"}));
  train->add_option("--steps", steps, "Training steps");
  train->add_option("--seed", train_seed, "Training seed");
  train->add_flag("--resume", resume, "Continue from the run directory's latest checkpoint");

  std::size_t batch = 1;
  auto* mem = app.add_subcommand("memory-report", "Noise-cache vs mask-cache bytes");
  add_common(mem, o);
  mem->add_option("-b,--batch", batch, "Instances held at once");

  std::string adapter;
  auto* ev = app.add_subcommand("eval", "Held-out accuracy, pass@1, pass@G, diversity and SCS");
  add_common(ev, o);
  ev->add_option("--adapter", adapter, "Adapter sidecar");

  std::optional<std::size_t> sft_steps;
  auto* pre = app.add_subcommand("pretrain", "Supervised pretraining on the task format");
  add_common(pre, o);
  pre->add_option("--steps", sft_steps, "Supervised steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    auto c = resolve(o);
    if (K) c.population.K = *K;
    if (prompts_file) c.population.prompts = *prompts_file;
    if (!sigmas.empty()) c.population.sigmas = sigmas;
    if (gen->parsed()) return cmd_generate(c, prompt);
    if (pop->parsed()) return cmd_population(c);
    if (abl->parsed()) return cmd_ablate(c);
    if (train->parsed()) return cmd_train(c, train_mode, steps, train_seed, resume);
    if (mem->parsed()) return cmd_memory_report(c, batch);
    if (ev->parsed()) return cmd_eval(c, adapter);
    if (pre->parsed()) return cmd_pretrain(c, sft_steps);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitInput;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const CorruptionError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const IndexError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
