// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "btrans/bayesian_norm.hpp"
#include "btrans/tokenizer.hpp"
#include "test_util.hpp"

namespace btrans {
namespace {

using testing_util::tiny_config;

std::vector<int> random_tokens(std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(32));
  return t;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

TEST(Transform, DefaultSelectorWrapsNineSitesOnFourLayers) {
  auto p = init_model<float>(ModelConfig{}, 0);
  auto w = apply_bayesian_transform(p, NoisePrior{});
  EXPECT_EQ(w.site_count(), 9u);
  EXPECT_EQ(w.site_count(), 2 * p.config.n_layers + 1);
  SiteSelector blocks{"blocks_only", {}};
  EXPECT_EQ(apply_bayesian_transform(p, NoisePrior{}, blocks).site_count(), 8u);
  SiteSelector fin{"final_only", {}};
  EXPECT_EQ(apply_bayesian_transform(p, NoisePrior{}, fin).wrapped_sites(), std::vector<std::size_t>{8});
  SiteSelector named{"all", {"blocks.1.mlp_norm", "final_norm"}};
  EXPECT_EQ(apply_bayesian_transform(p, NoisePrior{}, named).wrapped_sites(), (std::vector<std::size_t>{3, 8}));
}

TEST(Transform, SelectorMatchingNothingRejected) {
  auto p = init_model<float>(tiny_config(), 0);
  SiteSelector none{"all", {"blocks.9.attn_norm"}};
  EXPECT_THROW(apply_bayesian_transform(p, NoisePrior{}, none), ContractError);
  SiteSelector bad{"everything", {}};
  EXPECT_THROW(apply_bayesian_transform(p, NoisePrior{}, bad), ConfigError);
}

TEST(Transform, OffModeIsBitIdentical) {
  auto p = init_model<float>(tiny_config(), 1);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.5}, {}, NoiseMode::off, 3);
  auto toks = random_tokens(2 * 9, 2);
  EXPECT_TRUE(bit_equal(w.forward(toks, 2, 9), forward(p, toks, 2, 9)));
}

TEST(Transform, ZeroSigmaIsBitIdenticalInEveryMode) {
  auto p = init_model<float>(tiny_config(), 1);
  auto toks = random_tokens(3 * 7, 4);
  auto ref = forward(p, toks, 3, 7);
  for (auto mode : {NoiseMode::sequence, NoiseMode::token, NoiseMode::mean_shift, NoiseMode::off}) {
    auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.0}, {}, mode, 17);
    EXPECT_TRUE(bit_equal(w.forward(toks, 3, 7), ref)) << to_string(mode);
  }
}

TEST(SampleOffset, ZeroSigmaGivesMuExactly) {
  auto p = init_model<float>(tiny_config(), 1);
  auto w = apply_bayesian_transform(p, NoisePrior{0.3, 0.0}, {}, NoiseMode::sequence, 1);
  const auto& z = w.sample_offset(0, 2, 32);
  ASSERT_EQ(z.shape(), (Shape{2, 1, 32}));
  for (float v : z.data()) EXPECT_EQ(v, 0.3f);
}

TEST(SampleOffset, OffModeRejected) {
  auto p = init_model<float>(tiny_config(), 1);
  auto w = apply_bayesian_transform(p, NoisePrior{}, {}, NoiseMode::off, 1);
  EXPECT_THROW(w.sample_offset(0, 1, 32), ContractError);
}

TEST(SampleOffset, SequenceModeCachesUntilReset) {
  auto p = init_model<float>(tiny_config(), 1);
  auto w = apply_bayesian_transform(p, NoisePrior{}, {}, NoiseMode::sequence, 1);
  const auto& a = w.sample_offset(2, 1, 32);
  const auto id = a.id();
  const std::vector<float> first(a.data().begin(), a.data().end());
  const auto& b = w.sample_offset(2, 1, 32);
  EXPECT_EQ(b.id(), id);
  w.reset_posterior();
  const auto& c = w.sample_offset(2, 1, 32);
  EXPECT_NE(c.id(), id);
  EXPECT_FALSE(std::equal(first.begin(), first.end(), c.data().begin()));
}

TEST(SampleOffset, Statistics) {
  auto p = init_model<float>(tiny_config(), 1);
  const double sigma = 0.02;
  auto w = apply_bayesian_transform<double>(p.cast<double>(), NoisePrior{0.0, sigma}, {}, NoiseMode::token, 11);
  const std::size_t per_draw = 32 * 25;
  double s = 0.0, ss = 0.0;
  std::size_t n = 0;
  while (n < 100000) {
    const auto& z = w.sample_offset(0, 25, 32);
    for (double v : z.data()) {
      s += v;
      ss += v * v;
    }
    n += per_draw;
  }
  const double mean = s / static_cast<double>(n);
  const double sd = std::sqrt(ss / static_cast<double>(n) - mean * mean);
  EXPECT_LT(std::abs(mean), 3.0 * sigma / std::sqrt(static_cast<double>(n)));
  EXPECT_LT(std::abs(sd - sigma) / sigma, 0.02);
}

TEST(WrappedNorm, ConstantOffsetShiftsEveryChannel) {
  auto p = init_model<double>(tiny_config(1), 2);
  const double c = 0.125;
  auto plain = apply_bayesian_transform(p, NoisePrior{0.0, 0.0}, SiteSelector{"final_only", {}}, NoiseMode::mean_shift, 0);
  auto shifted = apply_bayesian_transform(p, NoisePrior{c, 0.0}, SiteSelector{"final_only", {}}, NoiseMode::mean_shift, 0);
  auto toks = random_tokens(2 * 5, 3);
  auto h0 = forward_hidden(p, toks, 2, 5, ForwardOptions<double>{nullptr, &plain});
  auto h1 = forward_hidden(p, toks, 2, 5, ForwardOptions<double>{nullptr, &shifted});
  for (std::size_t i = 0; i < h0.numel(); ++i) EXPECT_NEAR(h1.data()[i] - h0.data()[i], c, 1e-12);
}

TEST(WrappedNorm, TokenModeDiffersAcrossCallsSequenceModeDoesNot) {
  auto p = init_model<float>(tiny_config(), 2);
  auto toks = random_tokens(6, 5);
  auto seq = apply_bayesian_transform(p, NoisePrior{0.0, 0.05}, {}, NoiseMode::sequence, 9);
  EXPECT_TRUE(bit_equal(seq.forward(toks, 1, 6), seq.forward(toks, 1, 6)));
  auto tok = apply_bayesian_transform(p, NoisePrior{0.0, 0.05}, {}, NoiseMode::token, 9);
  EXPECT_FALSE(bit_equal(tok.forward(toks, 1, 6), tok.forward(toks, 1, 6)));
}

TEST(Reset, SameSeedReproducesDifferentSeedsDiffer) {
  auto p = init_model<float>(tiny_config(), 3);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.05}, {}, NoiseMode::sequence, 0);
  auto prompt = Tokenizer::encode_prompt("12+9\n");
  DecodeConfig cfg;
  cfg.temperature = 0.0;
  cfg.max_new_tokens = 16;
  const std::uint64_t s1 = 101, s2 = 202, d = 0;
  auto a = w.generate_rows(prompt, cfg, std::span(&s1, 1), std::span(&d, 1));
  std::vector<float> z_a(w.state(0).z->data().begin(), w.state(0).z->data().end());
  auto b = w.generate_rows(prompt, cfg, std::span(&s1, 1), std::span(&d, 1));
  EXPECT_EQ(a[0].tokens, b[0].tokens);
  EXPECT_TRUE(std::equal(z_a.begin(), z_a.end(), w.state(0).z->data().begin()));
  w.generate_rows(prompt, cfg, std::span(&s2, 1), std::span(&d, 1));
  EXPECT_FALSE(std::equal(z_a.begin(), z_a.end(), w.state(0).z->data().begin()));
}

TEST(Reset, NoResetKeepsPersona) {
  auto p = init_model<float>(tiny_config(), 3);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.05}, {}, NoiseMode::sequence, 4);
  auto toks = random_tokens(5, 6);
  w.forward(toks, 1, 5);
  const auto id = w.state(1).z->id();
  w.forward(toks, 1, 5);
  EXPECT_EQ(w.state(1).z->id(), id);
  EXPECT_EQ(w.state(1).draws, 1u);
}

TEST(TemporalConsistency, OneDrawPerSiteInSequenceModeOnePerStepInTokenMode) {
  auto p = init_model<float>(tiny_config(), 4);
  auto prompt = Tokenizer::encode_prompt("345+678\n");
  DecodeConfig cfg;
  cfg.temperature = 1.0;
  cfg.max_new_tokens = 20;
  cfg.stop_token = -1;  // never stop early: exactly 20 forward calls
  const std::uint64_t ns = 77, ds = 5;
  for (auto mode : {NoiseMode::sequence, NoiseMode::token}) {
    auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.02}, {}, mode, 0);
    w.enable_trace(true);
    auto g = w.generate_rows(prompt, cfg, std::span(&ns, 1), std::span(&ds, 1));
    const std::size_t calls = w.forward_calls();
    EXPECT_EQ(calls, g[0].tokens.size());
    for (std::size_t slot = 0; slot < w.site_count(); ++slot) {
      const auto& st = w.state(slot);
      std::set<std::uint64_t> ids, hashes;
      std::size_t fresh = 0;
      for (const auto& e : w.trace())
        if (e.site == st.site) {
          ids.insert(e.storage_id);
          hashes.insert(e.content_hash);
          fresh += e.fresh_draw ? 1 : 0;
        }
      if (mode == NoiseMode::sequence) {
        EXPECT_EQ(st.draws, 1u);
        EXPECT_EQ(fresh, 1u);
        EXPECT_EQ(ids.size(), 1u);
        EXPECT_EQ(hashes.size(), 1u);
      } else {
        EXPECT_EQ(st.draws, calls);
        EXPECT_EQ(fresh, calls);
        EXPECT_EQ(hashes.size(), calls);
      }
    }
  }
}

TEST(Memory, CacheBytesMatchFormulaAndAllocation) {
  auto p = init_model<float>(ModelConfig{}, 0);
  auto w = apply_bayesian_transform(p, NoisePrior{}, {}, NoiseMode::sequence, 0);
  EXPECT_EQ(w.noise_cache_bytes(1), 9u * 1u * 128u * 4u);
  EXPECT_EQ(w.noise_cache_bytes(1), 4608u);
  EXPECT_EQ(w.noise_cache_bytes(0), 0u);
  for (std::size_t batch : {1u, 3u}) {
    w.reset_posterior();
    std::vector<int> toks(batch * 4, 5);
    w.forward(toks, batch, 4);
    EXPECT_EQ(w.allocated_noise_bytes(), w.noise_cache_bytes(batch));
  }
  ModelConfig big;
  big.d_model = 4096;
  big.n_layers = 32;
  big.n_heads = 32;
  EXPECT_EQ(noise_cache_bytes(big, 1), 65u * 4096u * 4u);
  EXPECT_LT(noise_cache_bytes(big, 1), 2u * 1024u * 1024u);
  const auto seven = ModelConfig::seven_b_class();
  EXPECT_EQ(noise_cache_bytes(seven, 1), 1064960u);
  EXPECT_GT(mask_cache_bytes(seven, 1), 10ull * 1000 * 1000 * 1000);
  EXPECT_EQ(mask_cache_bytes(seven, 0), 0u);
  EXPECT_EQ(mask_cache_bytes(ModelConfig{}, 3), 3u * 2u * ModelConfig{}.parameter_count());
}

TEST(Immutability, BaseWeightsUnchangedBySampling) {
  auto p = init_model<float>(tiny_config(), 5);
  const auto before = p.fingerprint();
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.1}, {}, NoiseMode::sequence, 0);
  auto prompt = Tokenizer::encode_prompt("1+1\n");
  DecodeConfig cfg;
  cfg.max_new_tokens = 8;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const std::uint64_t d = s;
    w.generate_rows(prompt, cfg, std::span(&s, 1), std::span(&d, 1));
    w.reset_posterior();
  }
  EXPECT_EQ(p.fingerprint(), before);
  EXPECT_EQ(w.base().fingerprint(), before);
}

TEST(Batching, RowsMatchSeparateRuns) {
  auto p = init_model<float>(tiny_config(), 6);
  auto prompt = Tokenizer::encode_prompt("88+19\n");
  DecodeConfig cfg;
  cfg.temperature = 1.0;
  cfg.max_new_tokens = 14;
  for (auto mode : {NoiseMode::sequence, NoiseMode::token}) {
    auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.05}, {}, mode, 0);
    std::vector<std::uint64_t> ns{3, 4, 5}, ds{7, 8, 9};
    auto batched = w.generate_rows(prompt, cfg, ns, ds);
    for (std::size_t r = 0; r < 3; ++r) {
      auto one = w.generate_rows(prompt, cfg, std::span(&ns[r], 1), std::span(&ds[r], 1));
      EXPECT_EQ(one[0].tokens, batched[r].tokens) << to_string(mode) << " row " << r;
    }
  }
}

TEST(MeanShift, ConsumesNoRandomness) {
  auto p = init_model<float>(tiny_config(), 7);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.05}, {}, NoiseMode::sequence, 0);
  auto toks = random_tokens(2 * 4, 1);
  w.forward(toks, 2, 4);
  const auto counters = w.rng_counter_sum();
  const auto draws = w.total_draws();
  w.set_mode(NoiseMode::mean_shift);
  auto a = w.forward(toks, 2, 4);
  auto b = w.forward(toks, 2, 4);
  EXPECT_EQ(w.rng_counter_sum(), counters);
  EXPECT_EQ(w.total_draws(), draws);
  EXPECT_TRUE(bit_equal(a, b));
  EXPECT_TRUE(bit_equal(a, forward(p, toks, 2, 4)));
}

TEST(NoiseMode, ParsingRoundTrip) {
  for (auto m : {NoiseMode::off, NoiseMode::sequence, NoiseMode::token})
    EXPECT_EQ(parse_noise_mode(to_string(m)), m);
  EXPECT_THROW(parse_noise_mode("hourly"), ConfigError);
  EXPECT_THROW(NoisePrior({0.0, -1.0}).validate(), ConfigError);
}

}  // namespace
}  // namespace btrans
