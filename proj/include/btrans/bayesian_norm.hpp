// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0
//
// Stochastic post-normalization offsets. Each targeted norm site computes
//
//   y = rms_norm(x) * w + (b + z),   z ~ N(mu, sigma^2 I), z of shape [B, 1, d]
//
// where z is drawn once per sequence and reused at every decode step
// (sequence mode), redrawn at every forward call (token mode), pinned to mu
// (mean-shift mode) or absent (off). The base weights are never written.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "btrans/errors.hpp"
#include "btrans/generate.hpp"
#include "btrans/model.hpp"
#include "btrans/rng.hpp"

namespace btrans {

struct NoisePrior {
  double mu = 0.0;
  double sigma = 0.02;

  void validate() const {
    if (!(sigma >= 0.0) || !std::isfinite(sigma) || !std::isfinite(mu))
      throw ConfigError("noise prior: sigma must be finite and >= 0, mu finite");
  }
};

enum class NoiseMode {
  off,         // plain norm, no offset
  sequence,    // one draw per sequence, cached until reset
  token,       // fresh draw at every forward call
  mean_shift,  // z = mu exactly, no randomness (policy-update phase)
};

inline std::string_view to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::off: return "off";
    case NoiseMode::sequence: return "sequence";
    case NoiseMode::token: return "token";
    case NoiseMode::mean_shift: return "mean_shift";
  }
  return "?";
}

inline NoiseMode parse_noise_mode(std::string_view s) {
  if (s == "off") return NoiseMode::off;
  if (s == "sequence") return NoiseMode::sequence;
  if (s == "token") return NoiseMode::token;
  if (s == "mean_shift") return NoiseMode::mean_shift;
  throw ConfigError("noise mode must be off|sequence|token, got '" + std::string(s) + "'");
}

/// Norm-site names in site-index order.
inline std::vector<std::string> norm_site_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    names.push_back("blocks." + std::to_string(l) + ".attn_norm");
    names.push_back("blocks." + std::to_string(l) + ".mlp_norm");
  }
  names.push_back("final_norm");
  return names;
}

/// Which norm sites receive an offset: a named group (all | blocks_only |
/// final_only) or an explicit list of site names.
struct SiteSelector {
  std::string target = "all";
  std::vector<std::string> names;

  std::vector<std::size_t> resolve(const ModelConfig& cfg) const {
    const auto all = norm_site_names(cfg);
    std::vector<std::size_t> out;
    if (!names.empty()) {
      for (std::size_t i = 0; i < all.size(); ++i)
        for (const auto& n : names)
          if (n == all[i]) out.push_back(i);
    } else if (target == "all") {
      for (std::size_t i = 0; i < all.size(); ++i) out.push_back(i);
    } else if (target == "blocks_only") {
      for (std::size_t i = 0; i + 1 < all.size(); ++i) out.push_back(i);
    } else if (target == "final_only") {
      out.push_back(all.size() - 1);
    } else {
      throw ConfigError("noise target must be all|blocks_only|final_only, got '" + target + "'");
    }
    if (out.empty()) throw ContractError("apply_bayesian_transform: selector matches no norm sites");
    return out;
  }
};

/// Per-site sampler state. The offset of batch row r is drawn from its own
/// counter-based stream keyed by (row seed, site), so a row's persona does not
/// depend on which other rows share the batch.
template <typename T>
struct NoiseState {
  std::size_t site = 0;
  std::optional<Tensor<T>> z;  // [B, 1, d] when cached
  std::vector<CounterRng> streams;
  std::size_t draws = 0;  // number of times z was (re)sampled
  bool pinned_to_mean = false;
};

/// One offset application, recorded when tracing is enabled.
struct OffsetEvent {
  std::size_t forward_call;
  std::size_t site;
  std::uint64_t storage_id;  // identity of the z tensor that was applied
  std::uint64_t content_hash;
  bool fresh_draw;
};

template <typename T>
class WrappedModel final : public NormOffsets<T> {
 public:
  WrappedModel(ModelParams<T> base, NoisePrior prior, const SiteSelector& selector = {},
               NoiseMode mode = NoiseMode::sequence, std::uint64_t noise_seed = 0)
      : base_(std::move(base)), prior_(prior), mode_(mode), noise_seed_(noise_seed) {
    prior_.validate();
    const auto sites = selector.resolve(base_.config);
    slot_of_site_.assign(base_.config.norm_sites(), kNoSlot);
    for (auto s : sites) {
      slot_of_site_[s] = states_.size();
      states_.push_back(NoiseState<T>{s, std::nullopt, {}, 0, false});
    }
  }

  const ModelParams<T>& base() const noexcept { return base_; }
  const NoisePrior& prior() const noexcept { return prior_; }
  NoiseMode mode() const noexcept { return mode_; }
  void set_mode(NoiseMode m) { mode_ = m; }
  void set_prior(NoisePrior p) {
    p.validate();
    prior_ = p;
    reset_posterior();
  }

  std::size_t site_count() const noexcept { return states_.size(); }
  std::vector<std::size_t> wrapped_sites() const {
    std::vector<std::size_t> out;
    for (const auto& s : states_) out.push_back(s.site);
    return out;
  }
  const NoiseState<T>& state(std::size_t slot) const { return states_.at(slot); }

  /// Assigns one noise seed per batch row and drops all cached offsets; the
  /// next forward draws a fresh instance for every row.
  void reseed(std::span<const std::uint64_t> row_seeds) {
    row_seeds_.assign(row_seeds.begin(), row_seeds.end());
    for (auto& s : states_) {
      s.streams.clear();
      for (auto seed : row_seeds_) s.streams.emplace_back(derive_key(seed, s.site));
      s.z.reset();
    }
  }

  /// Clears every cached offset. Streams keep their position, so the next
  /// draw is a new instance rather than a replay.
  void reset_posterior() {
    for (auto& s : states_) s.z.reset();
  }

  /// Default row seeds when none were assigned: member_seed(noise_seed, r).
  std::uint64_t noise_seed() const noexcept { return noise_seed_; }

  /// Draws (or returns the cached) z for one wrapped site.
  const Tensor<T>& sample_offset(std::size_t slot, std::size_t batch, std::size_t d_model) {
    if (mode_ == NoiseMode::off) throw ContractError("sample_offset: noise mode is off");
    auto& s = states_.at(slot);
    const bool cached = s.z && s.z->dim(0) == batch && s.z->dim(2) == d_model;
    if (mode_ == NoiseMode::mean_shift) {
      if (!cached || !s.pinned_to_mean) {
        s.z = Tensor<T>::full({batch, 1, d_model}, static_cast<T>(prior_.mu));
        s.pinned_to_mean = true;
      }
      return *s.z;
    }
    if (mode_ == NoiseMode::sequence && cached && !s.pinned_to_mean) return *s.z;
    ensure_streams(batch);
    std::vector<T> values(batch * d_model);
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t i = 0; i < d_model; ++i)
        values[r * d_model + i] = static_cast<T>(s.streams[r].normal(prior_.mu, prior_.sigma));
    s.z = Tensor<T>({batch, 1, d_model}, std::move(values));
    s.pinned_to_mean = false;
    ++s.draws;
    last_was_draw_ = true;
    return *s.z;
  }

  void begin_forward(std::size_t /*batch*/) override { ++forward_calls_; }

  const Tensor<T>* offset(std::size_t site, std::size_t batch, std::size_t d_model) override {
    if (site >= slot_of_site_.size() || slot_of_site_[site] == kNoSlot) return nullptr;
    if (mode_ == NoiseMode::off) return nullptr;
    const std::size_t slot = slot_of_site_[site];
    last_was_draw_ = false;
    const Tensor<T>& z = sample_offset(slot, batch, d_model);
    if (tracing_) {
      std::uint64_t h = 0xCBF29CE484222325ULL;
      const auto* bytes = reinterpret_cast<const unsigned char*>(z.ptr());
      for (std::size_t i = 0; i < z.numel() * sizeof(T); ++i) h = (h ^ bytes[i]) * 0x100000001B3ULL;
      trace_.push_back({forward_calls_, site, z.id(), h, last_was_draw_});
    }
    return &z;
  }

  /// Bytes the offset cache occupies for `batch` rows: sites x batch x d x sizeof(T).
  std::size_t noise_cache_bytes(std::size_t batch) const {
    return states_.size() * batch * base_.config.d_model * sizeof(T);
  }

  /// Bytes actually held by cached offsets right now.
  std::size_t allocated_noise_bytes() const {
    std::size_t n = 0;
    for (const auto& s : states_)
      if (s.z) n += s.z->numel() * sizeof(T);
    return n;
  }

  std::size_t total_draws() const {
    std::size_t n = 0;
    for (const auto& s : states_) n += s.draws;
    return n;
  }

  /// Sum of stream positions; unchanged iff no random numbers were consumed.
  std::uint64_t rng_counter_sum() const {
    std::uint64_t n = 0;
    for (const auto& s : states_)
      for (const auto& r : s.streams) n += r.counter();
    return n;
  }

  void enable_trace(bool on) { tracing_ = on; }
  const std::vector<OffsetEvent>& trace() const noexcept { return trace_; }
  void clear_trace() { trace_.clear(); }
  std::size_t forward_calls() const noexcept { return forward_calls_; }

  /// Logits through the wrapped norms.
  Tensor<T> forward(std::span<const int> tokens, std::size_t batch, std::size_t steps,
                    KVCache<T>* cache = nullptr, const LoraAdapter<T>* adapter = nullptr) {
    return btrans::forward(base_, tokens, batch, steps, ForwardOptions<T>{cache, this, adapter});
  }

  /// Generates one continuation per row; row r uses noise seed row_noise[r]
  /// and decode seed row_decode[r]. Offsets are redrawn for the new rows.
  std::vector<Generation> generate_rows(std::span<const int> prompt, const DecodeConfig& cfg,
                                        std::span<const std::uint64_t> row_noise,
                                        std::span<const std::uint64_t> row_decode,
                                        const LoraAdapter<T>* adapter = nullptr) {
    if (row_noise.size() != row_decode.size())
      throw ContractError("generate_rows: noise and decode seed counts differ");
    reseed(row_noise);
    return btrans::generate_rows(base_, prompt, cfg, row_decode, this, adapter);
  }

 private:
  static constexpr std::size_t kNoSlot = static_cast<std::size_t>(-1);

  void ensure_streams(std::size_t batch) {
    if (row_seeds_.size() == batch && !states_.empty() && states_.front().streams.size() == batch)
      return;
    std::vector<std::uint64_t> seeds(batch);
    for (std::size_t r = 0; r < batch; ++r) seeds[r] = member_seed(noise_seed_, r);
    reseed(seeds);
  }

  ModelParams<T> base_;
  NoisePrior prior_;
  NoiseMode mode_;
  std::uint64_t noise_seed_;
  std::vector<std::uint64_t> row_seeds_;
  std::vector<NoiseState<T>> states_;
  std::vector<std::size_t> slot_of_site_;
  std::size_t forward_calls_ = 0;
  bool tracing_ = false;
  bool last_was_draw_ = false;
  std::vector<OffsetEvent> trace_;
};

/// Wraps the selected norm sites of `params` with stochastic offsets.
template <typename T>
WrappedModel<T> apply_bayesian_transform(const ModelParams<T>& params, NoisePrior prior,
                                         const SiteSelector& selector = {},
                                         NoiseMode mode = NoiseMode::sequence,
                                         std::uint64_t noise_seed = 0) {
  return WrappedModel<T>(params, prior, selector, mode, noise_seed);
}

/// Offset-cache size for a hypothetical configuration with all sites wrapped,
/// at 4 bytes per element.
inline std::size_t noise_cache_bytes(const ModelConfig& cfg, std::size_t batch) {
  return cfg.norm_sites() * batch * cfg.d_model * sizeof(float);
}

/// Frozen weight-mask cache a per-instance MC-dropout model would need: one
/// fp16 mask element per parameter for each of `batch` instances.
inline std::size_t mask_cache_bytes(const ModelConfig& cfg, std::size_t batch) {
  return cfg.parameter_count() * batch * 2;
}

}  // namespace btrans
