// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "ringattn/ringattn.hpp"

using namespace ringattn;

namespace {

FfnParams<double> random_params(std::size_t hidden, Rng& rng) {
  auto p = FfnParams<double>::zeros(hidden);
  for (Tensor<double>* t : {&p.w1, &p.b1, &p.w2, &p.b2})
    for (auto& x : t->data()) x = rng.uniform(-1, 1);
  return p;
}

}  // namespace

TEST(FfnBlock, ZeroWeightsOutputBias) {
  auto p = FfnParams<double>::zeros(3);
  p.b2 = Tensor<double>({3}, {0.5, -1.0, 2.0});
  Rng rng(1);
  const auto out = ffn_block(random_tensor<double>({2, 4, 3}, rng), p);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t o = 0; o < 3; ++o) EXPECT_EQ(out[r * 3 + o], p.b2[o]);
}

TEST(FfnBlock, PaddedIdentityPassesNonNegativeInput) {
  const std::size_t h = 4;
  auto p = FfnParams<double>::zeros(h);
  for (std::size_t i = 0; i < h; ++i) {
    p.w1(i, i) = 1.0;
    p.w2(i, i) = 1.0;
  }
  Rng rng(2);
  const auto x = random_tensor<double>({1, 5, h}, rng, 0.0, 1.0);
  EXPECT_EQ(ffn_block(x, p), x);
}

TEST(FfnBlock, MatchesPerPositionLoopSeed9) {
  Rng rng(9);
  const std::size_t h = 4;
  const auto p = random_params(h, rng);
  const auto x = random_tensor<double>({1, 3, h}, rng);
  const auto out = ffn_block(x, p);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t o = 0; o < h; ++o) {
      double acc = 0;
      for (std::size_t k = 0; k < 4 * h; ++k) {
        double pre = p.b1[k];
        for (std::size_t i = 0; i < h; ++i) pre += x(0, r, i) * p.w1(i, k);
        acc += std::max(0.0, pre) * p.w2(k, o);
      }
      EXPECT_NEAR(out(0, r, o), acc + p.b2[o], 1e-14);
    }
  }
}

TEST(FfnBlock, ChunkingIsBitwiseInvariantAndBoundsTemporaries) {
  Rng rng(3);
  const auto p = random_params(8, rng);
  const auto x = random_tensor<double>({2, 6, 8}, rng);
  FfnStats whole, chunked;
  const auto ref = ffn_block(x, p, {}, &whole);
  const auto alt = ffn_block(x, p, {4}, &chunked);
  EXPECT_EQ(ref, alt);
  EXPECT_EQ(whole.peak_temporary_elements, 12u * 32u);
  EXPECT_EQ(chunked.peak_temporary_elements, 12u * 4u);
  EXPECT_THROW(ffn_block(x, p, {5}), ShapeError);
}

TEST(FfnBlock, PartitionedRowsMatchWholeSequence) {
  Rng rng(4);
  const auto p = random_params(4, rng);
  const auto x = random_tensor<double>({1, 8, 4}, rng);
  std::vector<Tensor<double>> parts;
  for (const auto& piece : split_rows(x, 4)) parts.push_back(ffn_block(piece, p));
  EXPECT_EQ(concat_rows(parts), ffn_block(x, p));
}

TEST(FfnBlock, ShapeErrors) {
  auto p = FfnParams<double>::zeros(4);
  EXPECT_THROW(ffn_block(Tensor<double>({1, 2, 3}), p), ShapeError);
  p.b1 = Tensor<double>({3});
  EXPECT_THROW(ffn_block(Tensor<double>({1, 2, 4}), p), ShapeError);
}

TEST(FfnBackward, ZeroUpstreamGivesZeroGrads) {
  Rng rng(5);
  const auto p = random_params(3, rng);
  const auto x = random_tensor<double>({1, 2, 3}, rng);
  const auto g = ffn_block_backward(x, p, Tensor<double>(x.shape(), 0.0));
  for (const auto* t : {&g.dx, &g.grads.w1, &g.grads.b1, &g.grads.w2, &g.grads.b2})
    for (double v : t->data()) EXPECT_EQ(v, 0.0);
}

TEST(FfnBackward, DeadReluBlocksInputGradient) {
  Rng rng(6);
  auto p = random_params(3, rng);
  p.b1.fill(-100.0);
  const auto x = random_tensor<double>({1, 2, 3}, rng);
  const auto g = ffn_block_backward(x, p, random_tensor<double>(x.shape(), rng));
  for (double v : g.dx.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.grads.w1.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.grads.w2.data()) EXPECT_EQ(v, 0.0);
}

TEST(FfnBackward, MatchesFiniteDifferencesSeed9) {
  Rng rng(9);
  auto p = random_params(4, rng);
  auto x = random_tensor<double>({1, 3, 4}, rng);
  const auto up = random_tensor<double>(x.shape(), rng);
  const auto g = ffn_block_backward(x, p, up);
  auto loss = [&] { return dot(up, ffn_block(x, p)); };
  EXPECT_LE(max_relative_error(g.dx, finite_difference_grad(loss, x, 1e-6)), 1e-6);
  EXPECT_LE(max_relative_error(g.grads.w1, finite_difference_grad(loss, p.w1, 1e-6)), 1e-6);
  EXPECT_LE(max_relative_error(g.grads.b1, finite_difference_grad(loss, p.b1, 1e-6)), 1e-6);
  EXPECT_LE(max_relative_error(g.grads.w2, finite_difference_grad(loss, p.w2, 1e-6)), 1e-6);
  EXPECT_LE(max_relative_error(g.grads.b2, finite_difference_grad(loss, p.b2, 1e-6)), 1e-6);
}

TEST(TransformerBlock, ZeroWeightsArePureResidual) {
  const auto w = LayerWeights<double>::zeros(4, 2);
  Rng rng(7);
  const auto x = random_tensor<double>({1, 3, 4}, rng);
  const auto attn = random_tensor<double>({1, 3, 2, 2}, rng);
  const auto out = transformer_block(x, attn, w);
  EXPECT_EQ(out.z, x);
  EXPECT_EQ(out.y, x);
}

TEST(TransformerBlock, RingLayerMatchesDenseLayerAt64) {
  Rng rng(42);
  const auto x = random_tensor<double>({1, 64, 16}, rng);
  const auto w = LayerWeights<double>::random(16, 2, rng);
  for (const auto& bias : {BiasSpec<double>::none(), BiasSpec<double>::causal()}) {
    auto fwd = ring_layer_forward(split_rows(x, 4), w, bias);
    EXPECT_LE(max_abs_diff(concat_rows(fwd.outputs), dense_layer_forward(x, w, bias)), 1e-12);
  }
}

TEST(LayerWeights, ValidateRejectsMismatch) {
  auto w = LayerWeights<double>::zeros(4, 2);
  EXPECT_NO_THROW(w.validate());
  w.heads = 3;
  EXPECT_THROW(w.validate(), ShapeError);
  w = LayerWeights<double>::zeros(4, 2);
  w.wo = Tensor<double>({4, 3});
  EXPECT_THROW(w.validate(), ShapeError);
}
