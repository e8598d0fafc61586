// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>
#include <string>
#include <vector>

#include "btrans/population.hpp"
#include "test_util.hpp"

namespace btrans {
namespace {

using testing_util::tiny_config;

std::vector<std::optional<std::string>> opts(std::initializer_list<const char*> xs) {
  std::vector<std::optional<std::string>> out;
  for (const char* x : xs) out.push_back(x ? std::optional<std::string>(x) : std::nullopt);
  return out;
}

TEST(MajorityVote, ClearMajority) {
  auto a = opts({"7", "7", "3"});
  auto v = majority_vote(std::span<const std::optional<std::string>>(a));
  ASSERT_TRUE(v.consensus);
  EXPECT_EQ(*v.consensus, "7");
  ASSERT_EQ(v.counts.size(), 2u);
  EXPECT_EQ(v.counts[0], (std::pair<std::string, std::size_t>{"7", 2}));
  EXPECT_EQ(v.counts[1], (std::pair<std::string, std::size_t>{"3", 1}));
  EXPECT_EQ(v.voters, 3u);
}

TEST(MajorityVote, TieGoesToFirstMember) {
  auto a = opts({"7", "3"});
  EXPECT_EQ(*majority_vote(std::span<const std::optional<std::string>>(a)).consensus, "7");
  auto b = opts({nullptr, "3", "7", "7", "3"});
  EXPECT_EQ(*majority_vote(std::span<const std::optional<std::string>>(b)).consensus, "3");
}

TEST(MajorityVote, NoExtractableAnswers) {
  auto a = opts({nullptr, nullptr});
  auto v = majority_vote(std::span<const std::optional<std::string>>(a));
  EXPECT_FALSE(v.consensus);
  EXPECT_EQ(v.voters, 0u);
  EXPECT_TRUE(v.counts.empty());
}

TEST(MajorityVote, CountsSumToVoters) {
  auto a = opts({"1", nullptr, "2", "1", nullptr, "5"});
  auto v = majority_vote(std::span<const std::optional<std::string>>(a));
  std::size_t total = 0;
  for (const auto& [ans, c] : v.counts) total += c;
  EXPECT_EQ(total, v.voters);
  EXPECT_EQ(v.voters, 4u);
}

TEST(PassAtK, SaturationAndEmptySuccess) {
  std::vector<std::vector<bool>> all(3, std::vector<bool>(4, true)), none(3, std::vector<bool>(4, false));
  for (std::size_t k = 1; k <= 4; ++k) {
    EXPECT_EQ(pass_at_k(all, k), 1.0);
    EXPECT_EQ(pass_at_k(none, k), 0.0);
  }
}

TEST(PassAtK, MatchesPrefixOracleAndIsMonotone) {
  CounterRng rng(5);
  std::vector<std::vector<bool>> bits(40, std::vector<bool>(8));
  for (auto& row : bits)
    for (std::size_t m = 0; m < row.size(); ++m) row[m] = rng.uniform() < 0.2;
  double prev = 0.0;
  for (std::size_t k = 1; k <= 8; ++k) {
    std::size_t hits = 0;
    for (const auto& row : bits) {
      bool any = false;
      for (std::size_t m = 0; m < k; ++m) any = any || row[m];
      hits += any;
    }
    const double got = pass_at_k(bits, k);
    EXPECT_EQ(got, static_cast<double>(hits) / 40.0);
    EXPECT_GE(got, prev);
    prev = got;
  }
  for (const auto& row : bits) {
    auto curve = pass_curve(row);
    for (std::size_t k = 1; k < curve.size(); ++k) EXPECT_GE(curve[k], curve[k - 1]);
  }
}

TEST(PassAtK, KOutOfRange) {
  std::vector<std::vector<bool>> bits(2, std::vector<bool>(3, false));
  EXPECT_THROW(pass_at_k(bits, 0), ContractError);
  EXPECT_THROW(pass_at_k(bits, 4), ContractError);
}

TEST(AggregatePredictive, IdempotentAndSymmetric) {
  std::vector<double> d{0.1, 0.2, 0.7};
  auto same = aggregate_predictive({d, d, d});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(same[i], d[i], 1e-15);
  auto half = aggregate_predictive({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}});
  EXPECT_EQ(half, (std::vector<double>{0.5, 0.5, 0.0}));
}

TEST(AggregatePredictive, RandomSetMatchesDirectMean) {
  CounterRng rng(9);
  std::vector<std::vector<double>> ds(4, std::vector<double>(6));
  for (auto& d : ds) {
    double s = 0.0;
    for (auto& p : d) s += (p = rng.uniform());
    for (auto& p : d) p /= s;
  }
  auto avg = aggregate_predictive(ds);
  double total = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(avg[i], (ds[0][i] + ds[1][i] + ds[2][i] + ds[3][i]) / 4.0, 1e-12);
    total += avg[i];
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(AggregatePredictive, ShapeAndNormalizationErrors) {
  EXPECT_THROW(aggregate_predictive({{0.5, 0.5}, {1.0}}), DimensionError);
  EXPECT_THROW(aggregate_predictive({{0.5, 0.6}}), ContractError);
  EXPECT_THROW(aggregate_predictive({}), ContractError);
}

TEST(ExtractAnswer, Grammar) {
  EXPECT_EQ(extract_answer("3+4\n= 42"), "42");
  EXPECT_EQ(extract_answer("= 7 then = 9"), "9");
  EXPECT_EQ(extract_answer("no answer here"), std::nullopt);
  EXPECT_EQ(extract_answer("=007"), "7");
  EXPECT_EQ(extract_answer("=-0"), "0");
  EXPECT_EQ(extract_answer("=+15"), "15");
  EXPECT_EQ(extract_answer("=-15"), "-15");
  EXPECT_EQ(extract_answer("=12\n=x"), "12");
  EXPECT_EQ(extract_answer(""), std::nullopt);
}

TEST(SamplePopulation, SingleMemberAtZeroSigmaMatchesPlainGeneration) {
  auto p = init_model<float>(tiny_config(), 21);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.0});
  PopulationOptions o;
  o.K = 1;
  o.decode.temperature = 1.0;
  o.decode.max_new_tokens = 12;
  o.decode.seed = 4;
  auto r = sample_population(w, "12+34\n", o);
  DecodeConfig d = o.decode;
  d.seed = member_seed(o.decode.seed, 0);
  auto g = generate(p, Tokenizer::encode_prompt("12+34\n"), d);
  ASSERT_EQ(r.members.size(), 1u);
  EXPECT_EQ(r.members[0].tokens, g.tokens);
  EXPECT_EQ(r.members[0].logprobs, g.logprobs);
}

TEST(SamplePopulation, GreedyZeroSigmaMembersIdentical) {
  auto p = init_model<float>(tiny_config(), 22);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.0});
  PopulationOptions o;
  o.K = 8;
  o.decode.temperature = 0.0;
  o.decode.max_new_tokens = 10;
  auto r = sample_population(w, "5+5\n", o);
  for (const auto& m : r.members) EXPECT_EQ(m.tokens, r.members[0].tokens);
}

TEST(SamplePopulation, NoiseIsTheOnlyDiversitySourceWhenGreedy) {
  auto p = init_model<float>(tiny_config(), 23);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.5});
  PopulationOptions o;
  o.K = 8;
  o.decode.temperature = 0.0;
  o.decode.max_new_tokens = 10;
  auto r = sample_population(w, "5+5\n", o);
  std::set<std::vector<int>> distinct;
  for (const auto& m : r.members) distinct.insert(m.tokens);
  EXPECT_GE(distinct.size(), 2u);
}

TEST(SamplePopulation, SeedsDerivedPerMemberAndReproducible) {
  auto p = init_model<float>(tiny_config(), 24);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.05});
  PopulationOptions o;
  o.K = 4;
  o.noise_seed = 99;
  o.decode.seed = 3;
  o.decode.max_new_tokens = 12;
  auto a = sample_population(w, "71+8\n", o);
  auto b = sample_population(w, "71+8\n", o);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(a.members[k].noise_seed, member_seed(99, k));
    EXPECT_EQ(a.members[k].decode_seed, member_seed(3, k));
    EXPECT_EQ(a.members[k].tokens, b.members[k].tokens);
    EXPECT_EQ(a.members[k].logprobs, b.members[k].logprobs);
  }
}

TEST(SamplePopulation, BatchedAndSequentialPathsAgree) {
  auto p = init_model<float>(tiny_config(), 25);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.05});
  PopulationOptions o;
  o.K = 5;
  o.noise_seed = 8;
  o.decode.seed = 1;
  o.decode.max_new_tokens = 12;
  auto seq = sample_population(w, "4+99\n", o);
  o.batched = true;
  auto bat = sample_population(w, "4+99\n", o);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(seq.members[k].tokens, bat.members[k].tokens);
}

TEST(SamplePopulation, MemberRegeneratesFromStoredSeeds) {
  auto p = init_model<float>(tiny_config(), 26);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.05});
  PopulationOptions o;
  o.K = 3;
  o.noise_seed = 12;
  o.decode.max_new_tokens = 12;
  auto r = sample_population(w, "1+2\n", o);
  const auto& m = r.members[2];
  auto again = w.generate_rows(Tokenizer::encode_prompt("1+2\n"), o.decode, std::span(&m.noise_seed, 1),
                               std::span(&m.decode_seed, 1));
  EXPECT_EQ(again[0].tokens, m.tokens);
}

TEST(SamplePopulation, GenerationErrorsRecordedPerMember) {
  auto p = init_model<float>(tiny_config(), 27);
  auto w = apply_bayesian_transform(p, NoisePrior{});
  PopulationOptions o;
  o.K = 2;
  const std::string too_long(200, '1');  // longer than the tiny model's context
  auto r = sample_population(w, too_long, o);
  ASSERT_EQ(r.members.size(), 2u);
  for (const auto& m : r.members) EXPECT_TRUE(m.error.has_value());
  EXPECT_FALSE(r.vote.consensus);
}

TEST(ScorePopulation, CurveIsMonotone) {
  PopulationResult r;
  for (const char* a : {"1", "9", "4", "9"}) {
    MemberRecord m;
    m.answer = a;
    r.members.push_back(m);
  }
  score_population(r, "9");
  EXPECT_EQ(r.pass_at_k, (std::vector<double>{0, 1, 1, 1}));
}

TEST(MemberDistributions, AverageSumsToOne) {
  auto p = init_model<float>(tiny_config(), 28);
  auto w = apply_bayesian_transform(p, NoisePrior{0.0, 0.05});
  auto prompt = Tokenizer::encode_prompt("3+3\n");
  auto d = member_next_token_distributions(w, prompt, 4, 7);
  ASSERT_EQ(d.size(), 4u);
  EXPECT_NE(d[0], d[1]);
  auto avg = aggregate_predictive(d);
  double s = 0.0;
  for (double x : avg) s += x;
  EXPECT_NEAR(s, 1.0, 1e-6);
}

}  // namespace
}  // namespace btrans
