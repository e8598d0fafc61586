// Copyright 2026 The btrans Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "btrans/gradcheck.hpp"
#include "btrans/ops.hpp"
#include "btrans/tensor.hpp"

namespace btrans {
namespace {

using TF = Tensor<float>;
using TD = Tensor<double>;

template <typename T>
Tensor<T> leaf(Shape s, std::vector<T> v) {
  Tensor<T> t(std::move(s), std::move(v));
  t.set_requires_grad(true);
  return t;
}

TD random_tensor(Shape s, std::uint64_t seed, double sd = 1.0) {
  CounterRng rng(seed);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return TD(std::move(s), std::move(v));
}

TEST(Tensor, RejectsZeroDimensionsAndMismatchedData) {
  EXPECT_THROW(TF({2, 0}), DimensionError);
  EXPECT_THROW(TF({2, 2}, {1, 2, 3}), DimensionError);
  TF t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
}

TEST(Tensor, ReshapeSharesStorage) {
  TF t({2, 2}, {1, 2, 3, 4});
  auto r = t.reshape({4});
  r.mutable_data()[0] = 9;
  EXPECT_EQ(t.data()[0], 9.0f);
  EXPECT_THROW(t.reshape({3}), DimensionError);
}

TEST(Matmul, IdentityAndZero) {
  TF a({2, 2}, {1, 2, 3, 4});
  auto id = matmul(TF({2, 2}, {1, 0, 0, 1}), a);
  EXPECT_EQ(std::vector<float>(id.data().begin(), id.data().end()), (std::vector<float>{1, 2, 3, 4}));
  auto z = matmul(a, TF::zeros({2, 2}));
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Matmul, HandExpandedProduct) {
  auto c = matmul(TF({2, 2}, {1, 2, 3, 4}), TF({2, 2}, {5, 6, 7, 8}));
  // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{19, 22, 43, 50}));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(TF({2, 3}), TF({2, 3})), DimensionError);
}

TEST(Softmax, SymmetricSaturatedAndDirect) {
  auto u = softmax(TF({3}, {0, 0, 0}), 0);
  for (float v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-6);
  auto s = softmax(TF({3}, {1000, 0, 0}), 0);
  EXPECT_NEAR(s.data()[0], 1.0, 1e-6);
  EXPECT_NEAR(s.data()[1], 0.0, 1e-6);
  auto d = softmax(TF({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(d.data()[i], std::exp(i + 1.0) / z, 1e-6);
  EXPECT_NEAR(d.data()[0], 0.0900, 1e-3);
  EXPECT_NEAR(d.data()[1], 0.2447, 1e-3);
  EXPECT_NEAR(d.data()[2], 0.6652, 1e-3);
}

TEST(Softmax, SumsToOneAndShiftInvariantAlongAnyAxis) {
  auto x = random_tensor({3, 4, 5}, 11).cast<float>();
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto y = softmax(x, axis);
    std::vector<float> shifted(x.data().begin(), x.data().end());
    for (auto& v : shifted) v += 7.5f;
    auto y2 = softmax(TF(x.shape(), shifted), axis);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], y2.data()[i], 1e-6);
  }
  auto y = softmax(x, 1);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 5; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < 4; ++b) s += y.data()[(a * 4 + b) * 5 + c];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  EXPECT_THROW(softmax(x, 3), DimensionError);
}

TEST(RmsNorm, UnitZeroAndHandValues) {
  auto ones = rms_norm(TF({4}, {1, 1, 1, 1}), TF::full({4}, 1.0f), 0.0);
  for (float v : ones.data()) EXPECT_NEAR(v, 1.0, 1e-7);
  auto zero = rms_norm(TF({3}, {0, 0, 0}), TF({3}, {2, -1, 5}), 1e-6);
  for (float v : zero.data()) EXPECT_EQ(v, 0.0f);
  auto h = rms_norm(TF({2}, {3, 4}), TF::full({2}, 1.0f), 0.0);
  EXPECT_NEAR(h.data()[0], 3.0 / std::sqrt(12.5), 1e-6);
  EXPECT_NEAR(h.data()[1], 4.0 / std::sqrt(12.5), 1e-6);
  EXPECT_NEAR(h.data()[0], 0.8485, 1e-3);
  EXPECT_NEAR(h.data()[1], 1.1314, 1e-3);
}

TEST(RmsNorm, ScaleInvariantWithoutEps) {
  auto x = random_tensor({5, 16}, 3).cast<float>();
  auto w = random_tensor({16}, 4).cast<float>();
  auto a = rms_norm(x, w, 0.0);
  for (float c : {0.01f, 3.0f, 250.0f}) {
    std::vector<float> v(x.data().begin(), x.data().end());
    for (auto& e : v) e *= c;
    auto b = rms_norm(TF(x.shape(), v), w, 0.0);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-5);
  }
}

TEST(CrossEntropy, UniformCertainAndHandValue) {
  auto uni = cross_entropy(TF({1, 1, 4}, {0, 0, 0, 0}), std::vector<int>{2});
  EXPECT_NEAR(uni.item(), std::log(4.0), 1e-6);
  auto sure = cross_entropy(TF({1, 1, 3}, {50, 0, 0}), std::vector<int>{0});
  EXPECT_NEAR(sure.item(), 0.0, 1e-6);
  auto hand = cross_entropy(TF({1, 1, 3}, {1, 2, 3}), std::vector<int>{0});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(hand.item(), -std::log(std::exp(1.0) / z), 1e-5);
  EXPECT_NEAR(hand.item(), 2.4076, 1e-3);
}

TEST(CrossEntropy, MaskAndRangeChecks) {
  TF logits({1, 2, 3}, {1, 2, 3, 0, 0, 0});
  std::vector<std::uint8_t> mask{0, 1};
  auto l = cross_entropy(logits, std::vector<int>{99, 1}, mask);  // masked target is ignored
  EXPECT_NEAR(l.item(), std::log(3.0), 1e-6);
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{0, 3}), IndexError);
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{0, -1}), IndexError);
}

TEST(Backward, LinearSumGivesOnes) {
  TapeScope<float> scope;
  auto w = leaf<float>({3}, {0.5f, -2.0f, 4.0f});
  scope.backward(sum(w));
  for (float g : w.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, DisconnectedLeafGetsZero) {
  TapeScope<float> scope;
  auto w = leaf<float>({3}, {1, 2, 3});
  auto c = leaf<float>({3}, {4, 5, 6});
  auto unused = mul(w, c);
  scope.backward(sum(c));
  for (float g : w.grad()) EXPECT_EQ(g, 0.0f);
  (void)unused;
}

TEST(Backward, SquaredDotProductChainRule) {
  TapeScope<double> scope;
  auto w = leaf<double>({1, 2}, {1, 2});
  TD x({2, 1}, {3, 4});
  auto dot = matmul(w, x);  // 11
  auto loss = sum(mul(dot, dot));
  scope.backward(loss);
  // d/dw (w.x)^2 = 2 (w.x) x
  EXPECT_DOUBLE_EQ(w.grad()[0], 2.0 * 11.0 * 3.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 2.0 * 11.0 * 4.0);
  EXPECT_DOUBLE_EQ(w.grad()[0], 66.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 88.0);
}

TEST(Backward, NonScalarLossRejected) {
  TapeScope<float> scope;
  auto w = leaf<float>({2}, {1, 2});
  auto y = mul(w, w);
  EXPECT_THROW(scope.backward(y), ContractError);
}

TEST(Backward, LossOffTapeRejected) {
  TapeScope<float> scope;
  TF constant({1}, {3});
  EXPECT_THROW(scope.backward(constant), ContractError);
}

TEST(Backward, EachNodeVisitedOnce) {
  TapeScope<double> scope;
  auto w = leaf<double>({2}, {1, 2});
  auto y = add(w, w);  // w used twice by one node
  auto loss = sum(y);
  scope.backward(loss);
  EXPECT_EQ(scope.tape().backward_passes(), 1u);
  EXPECT_EQ(w.grad()[0], 2.0);
  EXPECT_EQ(scope.tape().nodes().size(), 2u);
}

TEST(Tracing, ForwardBitIdenticalOnAndOff) {
  auto x = random_tensor({2, 3, 8}, 5).cast<float>();
  auto w = random_tensor({8}, 6).cast<float>();
  auto m = random_tensor({8, 8}, 7).cast<float>();
  auto run = [&] { return softmax(linear(rms_norm(x, w), m), 2); };
  auto off = run();
  w.set_requires_grad(true);
  TapeScope<float> scope;
  auto on = run();
  EXPECT_FALSE(scope.tape().nodes().empty());
  ASSERT_EQ(on.numel(), off.numel());
  for (std::size_t i = 0; i < on.numel(); ++i) EXPECT_EQ(on.data()[i], off.data()[i]);
}

TEST(GradCheck, QuadraticForm) {
  auto w = random_tensor({4}, 21);
  auto A = random_tensor({4, 4}, 22);
  auto report = finite_diff_check(
      [&] {
        auto wr = w.reshape({1, 4});
        return sum(mul(matmul(wr, A), wr));
      },
      {w}, 1e-5);
  EXPECT_LT(report.max_rel_error, 1e-7);
  EXPECT_EQ(report.coordinates, 4u);
}

TEST(GradCheck, EpsOutOfRangeRejected) {
  auto w = random_tensor({2}, 1);
  auto f = [&] { return sum(w); };
  EXPECT_THROW(finite_diff_check(f, {w}, 0.0), ContractError);
  EXPECT_THROW(finite_diff_check(f, {w}, 0.1), ContractError);
}

TEST(GradCheck, NonFiniteLossRejected) {
  auto w = random_tensor({2}, 1);
  auto f = [&] { return scale(sum(w), std::numeric_limits<double>::infinity()); };
  EXPECT_THROW(finite_diff_check(f, {w}, 1e-5), NumericError);
}

// Each differentiable op against central differences on random small inputs.
class OpGradients : public ::testing::Test {
 protected:
  void check(const std::function<TD()>& f, std::vector<TD> params) {
    const auto r = finite_diff_check(f, std::move(params), 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-4) << "abs " << r.max_abs_error;
  }
};

TEST_F(OpGradients, MatmulLinearAddSubMulScale) {
  auto a = random_tensor({3, 4}, 1), b = random_tensor({4, 2}, 2), c = random_tensor({3, 2}, 3);
  auto x = random_tensor({2, 3, 4}, 4);
  check([&] { return sum(mul(sub(add(matmul(a, b), c), scale(c, 0.3)), c)); }, {a, b, c});
  check([&] { return sum(mul(linear(x, b), linear(x, b))); }, {x, b});
}

TEST_F(OpGradients, ExpClampMinimumSilu) {
  auto a = random_tensor({10}, 8), b = random_tensor({10}, 9);
  check([&] { return sum(mul(exp(a), b)); }, {a, b});
  check([&] { return sum(mul(minimum(a, b), silu(b))); }, {a, b});
  check([&] { return sum(mul(clamp(a, -0.5, 0.5), b)); }, {b});
}

TEST_F(OpGradients, MeanWeightedSumMulConst) {
  auto a = random_tensor({6}, 10);
  std::vector<double> c{1, -2, 3, 0.5, 0, 2};
  check([&] { return add(mean(mul(a, a)), weighted_sum(mul_const(a, std::span<const double>(c)), std::span<const double>(c))); }, {a});
}

TEST_F(OpGradients, SoftmaxEveryAxis) {
  auto x = random_tensor({2, 3, 4}, 12), w = random_tensor({2, 3, 4}, 13);
  for (std::size_t axis = 0; axis < 3; ++axis) check([&] { return sum(mul(softmax(x, axis), w)); }, {x});
}

TEST_F(OpGradients, RmsNormAndOffset) {
  auto x = random_tensor({2, 3, 8}, 14), w = random_tensor({8}, 15), b = random_tensor({8}, 16);
  auto z = random_tensor({2, 1, 8}, 17), m = random_tensor({2, 3, 8}, 18);
  check([&] { return sum(mul(add_offset(rms_norm(x, w), b, &z), m)); }, {x, w, b});
}

TEST_F(OpGradients, EmbeddingRopeAttention) {
  auto table = random_tensor({7, 8}, 19);
  std::vector<int> toks{1, 3, 6, 0, 2, 2};
  auto q = random_tensor({2, 3, 8}, 20), k = random_tensor({2, 3, 8}, 21), v = random_tensor({2, 3, 8}, 22);
  auto m = random_tensor({2, 3, 8}, 23);
  check([&] { return sum(mul(rope(embedding(table, toks, 2, 3), 2, 1), m)); }, {table});
  check([&] { return sum(mul(causal_attention(q, k, v, 2, 0), m)); }, {q, k, v});
}

TEST_F(OpGradients, TokenLogprobsAndCrossEntropy) {
  auto logits = random_tensor({2, 3, 5}, 24);
  std::vector<int> tg{0, 4, 2, 1, 3, 3};
  std::vector<double> w{1, 0.5, -1, 2, 0, 1};
  check([&] { return weighted_sum(token_logprobs(logits, tg, 0.7), std::span<const double>(w)); }, {logits});
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 1, 0};
  check([&] { return cross_entropy(logits, tg, mask); }, {logits});
}

}  // namespace
}  // namespace btrans
