// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>

#include "ringattn/ringattn.hpp"

using namespace ringattn;

TEST(FiniteDifference, SquareAndLinear) {
  const auto g = finite_difference_grad([](const std::vector<double>& x) { return x[0] * x[0]; },
                                        std::vector<double>{3.0}, 1e-6);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
  const auto lin = finite_difference_grad(
      [](const std::vector<double>& x) { return 2.5 * x[0] - 4.0 * x[1]; },
      std::vector<double>{0.3, -1.2}, 1e-3);
  EXPECT_NEAR(lin[0], 2.5, 1e-12);
  EXPECT_NEAR(lin[1], -4.0, 1e-12);
}

TEST(FiniteDifference, TensorFormRestoresParameter) {
  Tensor<double> p({3}, {1.0, 2.0, 3.0});
  const auto before = p;
  const auto g = finite_difference_grad([&] { return p[0] * p[1] + p[2]; }, p, 1e-6);
  EXPECT_EQ(p, before);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 1.0, 1e-8);
  EXPECT_NEAR(g[2], 1.0, 1e-8);
}

TEST(DenseAttentionBackward, MatchesFiniteDifferences) {
  Rng rng(3);
  auto Q = random_tensor<double>({1, 6, 2, 3}, rng);
  auto K = random_tensor<double>({1, 6, 2, 3}, rng);
  auto V = random_tensor<double>({1, 6, 2, 3}, rng);
  const auto G = random_tensor<double>(Q.shape(), rng);
  const auto bias = BiasSpec<double>::causal();
  const auto g = dense_attention_backward(Q, K, V, G, bias);
  auto loss = [&] { return dot(G, dense_attention_oracle(Q, K, V, bias)); };
  EXPECT_LE(max_relative_error(g.dq, finite_difference_grad(loss, Q)), 1e-6);
  EXPECT_LE(max_relative_error(g.dk, finite_difference_grad(loss, K)), 1e-6);
  EXPECT_LE(max_relative_error(g.dv, finite_difference_grad(loss, V)), 1e-6);
}

TEST(TestConfigSampler, RespectsBoundsAndStratifies) {
  const TestConfigSampler sampler(42);
  std::map<std::pair<std::size_t, BiasKind>, int> combos;
  for (std::size_t t = 0; t < 120; ++t) {
    const auto c = sampler.sample(t);
    EXPECT_LE(c.batch, 2u);
    EXPECT_LE(c.heads, 4u);
    EXPECT_LE(c.head_dim, 16u);
    EXPECT_LE(c.seq_len(), 256u);
    EXPECT_EQ(c.block_len % c.inner_chunk, 0u);
    combos[{c.hosts, c.bias}]++;
  }
  EXPECT_EQ(combos.size(), 12u);
  for (const auto& [key, count] : combos) EXPECT_EQ(count, 10);
  EXPECT_EQ(sampler.sample(17).describe(), TestConfigSampler(42).sample(17).describe());
}

TEST(EquivalenceSuite, SixtyFourBitTrials) {
  EquivalenceOptions o;
  o.trials = 100;
  const auto st = run_equivalence_suite<double>(TestConfigSampler(42), o);
  EXPECT_EQ(st.trials, 100u);
  EXPECT_LE(st.max_forward_error, 1e-12);
  EXPECT_LE(st.max_permutation_error, 1e-12);
  EXPECT_EQ(st.causal_violations, 0u);
  EXPECT_EQ(st.mode_mismatches, 0u);
  EXPECT_GE(st.causal_checks, 20u);
}

TEST(EquivalenceSuite, ThirtyTwoBitTrials) {
  EquivalenceOptions o;
  o.trials = 100;
  o.check_modes = false;
  const auto st = run_equivalence_suite<float>(TestConfigSampler(42), o);
  EXPECT_LE(st.max_forward_error, 1e-4);
}

TEST(EquivalenceSuite, ZeroTrialsIsAnError) {
  EquivalenceOptions o;
  o.trials = 0;
  EXPECT_THROW(run_equivalence_suite<double>(TestConfigSampler(1), o), ArgumentError);
}

TEST(EquivalenceSuite, InjectedFaultIsCaught) {
  EquivalenceOptions o;
  o.trials = 4;
  o.inject_fault = true;
  const auto st = run_equivalence_suite<double>(TestConfigSampler(1), o);
  EXPECT_GT(st.max_forward_error, 1e-12);
}

TEST(GradientSuite, SmallRun) {
  const auto st = run_gradient_suite(TestConfigSampler(7), GradientOptions{3});
  EXPECT_EQ(st.configs, 3u);
  EXPECT_GT(st.components, 0u);
  EXPECT_LE(st.max_attention_error, 1e-6);
  EXPECT_LE(st.max_layer_error, 1e-6);
  EXPECT_THROW(run_gradient_suite(TestConfigSampler(7), GradientOptions{0}), ArgumentError);
}

TEST(ScalingSuite, ResidencyIndependentOfRingSize) {
  const auto rows = run_scaling_suite(16, {1, 2, 4, 8}, 42);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.seq_len, 16 * r.hosts);
    EXPECT_EQ(r.peak_blocks, r.hosts == 1 ? 4u : 6u);
    EXPECT_LE(r.max_error, 1e-12);
  }
}
