// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ringattn/ringattn.hpp"

using namespace ringattn;

namespace {

Block<double> random_block(Rng& rng, std::size_t b, std::size_t c, std::size_t n, std::size_t d,
                           std::size_t index = 0, std::size_t count = 1) {
  return Block<double>(random_tensor<double>({b, c, n, d}, rng), index, count);
}

// Row-by-row softmax(scores) V for a single block, computed directly.
Tensor<double> direct_softmax_times_v(const Tensor<double>& scores, const Block<double>& v) {
  const std::size_t B = scores.dim(0), H = scores.dim(1), CQ = scores.dim(2), CK = scores.dim(3);
  Tensor<double> out({B, CQ, H, v.head_dim()});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < CQ; ++i) {
        double mx = -INFINITY, sum = 0;
        for (std::size_t j = 0; j < CK; ++j) mx = std::max(mx, scores(b, h, i, j));
        std::vector<double> p(CK);
        for (std::size_t j = 0; j < CK; ++j) sum += p[j] = std::exp(scores(b, h, i, j) - mx);
        for (std::size_t x = 0; x < v.head_dim(); ++x) {
          double acc = 0;
          for (std::size_t j = 0; j < CK; ++j) acc += p[j] / sum * v.data()(b, j, h, x);
          out(b, i, h, x) = acc;
        }
      }
  return out;
}

}  // namespace

TEST(ScaledScores, SingleRowIsSquaredNormOverRootD) {
  const std::vector<double> vec{1.0, -2.0, 0.5, 3.0};
  Block<double> q(Tensor<double>({1, 1, 1, 4}, vec), 0, 1);
  const auto s = scaled_scores(q, q, BiasSpec<double>::none());
  ASSERT_EQ(s.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(s[0], (1.0 + 4.0 + 0.25 + 9.0) / 2.0);
}

TEST(ScaledScores, CausalFutureBlockFullyMasked) {
  Rng rng(1);
  auto q = random_block(rng, 1, 4, 2, 4, 0, 3);
  auto k = random_block(rng, 1, 4, 2, 4, 2, 3);
  const auto s = scaled_scores(q, k, BiasSpec<double>::causal());
  for (double x : s.data()) EXPECT_EQ(x, kNegInf<double>);
}

TEST(ScaledScores, MatchesNaiveLoopSeed7) {
  Rng rng(7);
  auto q = random_block(rng, 1, 2, 1, 4);
  auto k = random_block(rng, 1, 2, 1, 4);
  const auto s = scaled_scores(q, k, BiasSpec<double>::none());
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double dot = 0;
      for (std::size_t x = 0; x < 4; ++x) dot += q.data()(0, i, 0, x) * k.data()(0, j, 0, x);
      EXPECT_EQ(s(0, 0, i, j), dot / 2.0);
    }
}

TEST(ScaledScores, ErrorPaths) {
  Rng rng(2);
  auto q = random_block(rng, 1, 4, 2, 4);
  auto k = random_block(rng, 1, 4, 2, 8);
  EXPECT_THROW(scaled_scores(q, k, BiasSpec<double>::none()), ShapeError);
  auto k2 = random_block(rng, 1, 4, 2, 4, 1, 2);
  auto q2 = random_block(rng, 1, 4, 2, 4, 0, 2);
  const auto small = BiasSpec<double>::dense(Tensor<double>({4, 4}, 0.0));
  EXPECT_THROW(scaled_scores(q2, k2, small), BiasError);
}

TEST(BiasSpec, DenseRejectsBadTensors) {
  EXPECT_THROW(BiasSpec<double>::dense(Tensor<double>({2, 3})), BiasError);
  EXPECT_THROW(BiasSpec<double>::dense(Tensor<double>({2, 2}, NAN)), BiasError);
  EXPECT_THROW(BiasSpec<double>::dense(Tensor<double>({2, 2}, INFINITY)), BiasError);
  EXPECT_NO_THROW(BiasSpec<double>::dense(Tensor<double>({2, 2}, -INFINITY)));
}

TEST(OnlineUpdate, FullyMaskedBlockLeavesAccumulatorUnchanged) {
  Rng rng(3);
  auto q = random_block(rng, 1, 2, 2, 4);
  auto v = random_block(rng, 1, 3, 2, 4);
  auto acc = SoftmaxAccumulator<double>::like(q);
  online_update(acc, scaled_scores(q, RowRange{0, 2}, v, RowRange{0, 3}, BiasSpec<double>::none()),
                v, RowRange{0, 3});
  const auto before = acc;
  online_update(acc, Tensor<double>({1, 2, 2, 3}, kNegInf<double>), v);
  EXPECT_EQ(acc.numerator, before.numerator);
  EXPECT_EQ(acc.denominator, before.denominator);
  EXPECT_EQ(acc.max_score, before.max_score);
}

TEST(OnlineUpdate, SingleBlockEqualsDirectSoftmax) {
  Rng rng(4);
  auto q = random_block(rng, 2, 3, 2, 4);
  auto k = random_block(rng, 2, 5, 2, 4);
  auto v = random_block(rng, 2, 5, 2, 4);
  const auto scores = scaled_scores(q, RowRange{0, 3}, k, RowRange{0, 5}, BiasSpec<double>::none());
  auto acc = SoftmaxAccumulator<double>::like(q);
  online_update(acc, scores, v);
  EXPECT_LE(max_abs_diff(finalize(acc), direct_softmax_times_v(scores, v)), 1e-15);
}

TEST(OnlineUpdate, NanScoresFailFast) {
  Rng rng(5);
  auto v = random_block(rng, 1, 2, 1, 2);
  SoftmaxAccumulator<double> acc(1, 1, 1, 2);
  Tensor<double> scores({1, 1, 1, 2}, 0.0);
  scores[1] = NAN;
  EXPECT_THROW(online_update(acc, scores, v), NumericError);
  scores[1] = INFINITY;
  EXPECT_THROW(online_update(acc, scores, v), NumericError);
}

TEST(Finalize, IdentityAndUniformCases) {
  SoftmaxAccumulator<double> acc(1, 1, 1, 3);
  acc.denominator[0] = 2.0;
  acc.numerator = Tensor<double>({1, 1, 1, 3}, {2.0, 4.0, -6.0});
  const auto out = finalize(acc);
  EXPECT_EQ(out, Tensor<double>({1, 1, 1, 3}, {1.0, 2.0, -3.0}));

  Rng rng(6);
  auto v = random_block(rng, 1, 4, 1, 3);
  SoftmaxAccumulator<double> u(1, 1, 1, 3);
  online_update(u, Tensor<double>({1, 1, 1, 4}, 0.7), v);
  const auto mean = finalize(u);
  for (std::size_t x = 0; x < 3; ++x) {
    double m = 0;
    for (std::size_t j = 0; j < 4; ++j) m += v.data()(0, j, 0, x) / 4.0;
    EXPECT_NEAR(mean(0, 0, 0, x), m, 1e-15);
  }
}

TEST(Finalize, EmptyRowIsMaskedRowError) {
  SoftmaxAccumulator<double> acc(1, 2, 1, 2);
  EXPECT_THROW(finalize(acc), MaskedRowError);
}

TEST(BlockwiseForward, FourKeyBlocksMatchOracleSeed42) {
  Rng rng(42);
  const auto Q = random_tensor<double>({1, 16, 2, 8}, rng);
  const auto K = random_tensor<double>({1, 16, 2, 8}, rng);
  const auto V = random_tensor<double>({1, 16, 2, 8}, rng);
  const auto qs = partition_sequence(Q, 4), ks = partition_sequence(K, 4),
             vs = partition_sequence(V, 4);
  const auto oracle = dense_attention_oracle(Q, K, V, BiasSpec<double>::none());
  std::vector<Tensor<double>> outs;
  for (const auto& q : qs) {
    outs.push_back(blockwise_attention_forward<double>(q, ks, vs, BiasSpec<double>::none()).output);
  }
  EXPECT_LE(max_abs_diff(concat_rows(outs), oracle), 1e-12);
}

TEST(BlockwiseForward, InnerChunksDoNotChangeResult) {
  Rng rng(8);
  const auto Q = random_tensor<double>({1, 16, 2, 4}, rng);
  const auto qs = partition_sequence(Q, 2);
  const auto bias = BiasSpec<double>::causal();
  for (std::size_t chunk : {1u, 2u, 4u}) {
    auto ref = blockwise_attention_forward<double>(qs[1], qs, qs, bias);
    auto chunked = blockwise_attention_forward<double>(qs[1], qs, qs, bias, {chunk, chunk});
    EXPECT_LE(max_abs_diff(ref.output, chunked.output), 1e-15) << "chunk " << chunk;
  }
  EXPECT_THROW(blockwise_attention_forward<double>(qs[0], qs, qs, bias, {3, 3}), PartitionError);
}

TEST(DenseOracle, TrivialCases) {
  Rng rng(10);
  const auto Q = random_tensor<double>({1, 1, 2, 3}, rng);
  const auto V = random_tensor<double>({1, 1, 2, 3}, rng);
  EXPECT_LE(max_abs_diff(dense_attention_oracle(Q, Q, V, BiasSpec<double>::none()), V), 1e-16);

  // One-hot values: outputs are the probability rows.
  const std::size_t s = 4;
  const auto Qs = random_tensor<double>({1, s, 1, s}, rng);
  const auto Ks = random_tensor<double>({1, s, 1, s}, rng);
  Tensor<double> I({1, s, 1, s}, 0.0);
  for (std::size_t j = 0; j < s; ++j) I(0, j, 0, j) = 1.0;
  const auto P = dense_attention_oracle(Qs, Ks, I, BiasSpec<double>::none());
  for (std::size_t i = 0; i < s; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < s; ++j) sum += P(0, i, 0, j);
    EXPECT_NEAR(sum, 1.0, 1e-15);
  }
}

TEST(BlockBackward, ZeroUpstreamGivesZeroGrads) {
  Rng rng(11);
  auto q = random_block(rng, 1, 4, 2, 4);
  auto k = random_block(rng, 1, 4, 2, 4);
  auto v = random_block(rng, 1, 4, 2, 4);
  const std::vector<Block<double>> ks{k}, vs{v};
  const auto saved = blockwise_attention_forward<double>(q, ks, vs, BiasSpec<double>::none());
  Tensor<double> dq(q.data().shape(), 0.0), dk(dq), dv(dq);
  block_backward(q, k, v, Tensor<double>(q.data().shape(), 0.0), saved, BiasSpec<double>::none(), dq,
                 dk, dv);
  for (const auto* t : {&dq, &dk, &dv})
    for (double x : t->data()) EXPECT_EQ(x, 0.0);
}

// One query against two keys with scalar heads:
//   o = p1 v1 + p2 v2, p = softmax(q k1, q k2)
//   do/dq = p1 p2 (k1 - k2)(v1 - v2), do/dv1 = p1,
//   do/dk1 = q p1 p2 (v1 - v2)
TEST(BlockBackward, ScalarHeadClosedForm) {
  const double qv = 0.3, k1 = 0.8, k2 = -0.5, v1 = 1.5, v2 = -0.25;
  Block<double> q(Tensor<double>({1, 1, 1, 1}, {qv}), 0, 1);
  Block<double> k(Tensor<double>({1, 2, 1, 1}, {k1, k2}), 0, 1);
  Block<double> v(Tensor<double>({1, 2, 1, 1}, {v1, v2}), 0, 1);
  const std::vector<Block<double>> ks{k}, vs{v};
  const auto saved = blockwise_attention_forward<double>(q, ks, vs, BiasSpec<double>::none());
  const double e1 = std::exp(qv * k1), e2 = std::exp(qv * k2);
  const double p1 = e1 / (e1 + e2), p2 = e2 / (e1 + e2);
  EXPECT_NEAR(saved.output[0], p1 * v1 + p2 * v2, 1e-15);

  Tensor<double> dq({1, 1, 1, 1}, 0.0), dk({1, 2, 1, 1}, 0.0), dv({1, 2, 1, 1}, 0.0);
  block_backward(q, k, v, Tensor<double>({1, 1, 1, 1}, 1.0), saved, BiasSpec<double>::none(), dq,
                 dk, dv);
  EXPECT_NEAR(dq[0], p1 * p2 * (k1 - k2) * (v1 - v2), 1e-15);
  EXPECT_NEAR(dv[0], p1, 1e-15);
  EXPECT_NEAR(dv[1], p2, 1e-15);
  EXPECT_NEAR(dk[0], qv * p1 * p2 * (v1 - v2), 1e-15);
  EXPECT_NEAR(dk[1], -qv * p1 * p2 * (v1 - v2), 1e-15);
}

TEST(BlockBackward, MatchesFiniteDifferencesSeed42) {
  Rng rng(42);
  auto Q = random_tensor<double>({1, 16, 2, 8}, rng);
  auto K = random_tensor<double>({1, 16, 2, 8}, rng);
  auto V = random_tensor<double>({1, 16, 2, 8}, rng);
  const auto G = random_tensor<double>(Q.shape(), rng);
  const auto bias = BiasSpec<double>::none();

  const auto qs = partition_sequence(Q, 4), ks = partition_sequence(K, 4),
             vs = partition_sequence(V, 4);
  const auto gs = split_rows(G, 4);
  std::vector<Tensor<double>> dq, dk, dv;
  for (std::size_t i = 0; i < 4; ++i) {
    dq.emplace_back(qs[i].data().shape(), 0.0);
    dk.emplace_back(qs[i].data().shape(), 0.0);
    dv.emplace_back(qs[i].data().shape(), 0.0);
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const auto saved = blockwise_attention_forward<double>(qs[i], ks, vs, bias);
    for (std::size_t j = 0; j < 4; ++j) block_backward(qs[i], ks[j], vs[j], gs[i], saved, bias, dq[i], dk[j], dv[j]);
  }
  auto loss = [&] { return dot(G, dense_attention_oracle(Q, K, V, bias)); };
  EXPECT_LE(max_relative_error(concat_rows(dq), finite_difference_grad(loss, Q, 1e-6)), 1e-6);
  EXPECT_LE(max_relative_error(concat_rows(dk), finite_difference_grad(loss, K, 1e-6)), 1e-6);
  EXPECT_LE(max_relative_error(concat_rows(dv), finite_difference_grad(loss, V, 1e-6)), 1e-6);
}

TEST(BlockBackward, StaleOrMismatchedStateIsRejected) {
  Rng rng(12);
  auto q = random_block(rng, 1, 4, 1, 4);
  auto k = random_block(rng, 1, 4, 1, 4);
  const std::vector<Block<double>> ks{k};
  const auto saved = blockwise_attention_forward<double>(q, ks, ks, BiasSpec<double>::none());
  Tensor<double> g(q.data().shape(), 1.0), dq(g), dk(g), dv(g);
  auto q2 = q;
  q2.data()[0] += 1.0;
  EXPECT_THROW(block_backward(q2, k, k, g, saved, BiasSpec<double>::none(), dq, dk, dv), StateError);
  auto bad = saved;
  bad.denominator = Tensor<double>({1, 1, 3});
  EXPECT_THROW(block_backward(q, k, k, g, bad, BiasSpec<double>::none(), dq, dk, dv), StateError);
}
