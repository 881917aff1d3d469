// SPDX-License-Identifier: Apache-2.0
//
// Independent references and property drivers: randomized config sampling,
// central finite differences, a fully materialised attention backward, a
// naive dense transformer layer, and the suites that compare the ring
// runtime against them.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ringattn/attention.hpp"
#include "ringattn/ffn.hpp"
#include "ringattn/ring.hpp"
#include "ringattn/tensor.hpp"

namespace ringattn {

// |a - b| / max(1, |a|, |b|)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central differences, one component at a time. `fn` must be pure.
template <typename Fn>
std::vector<double> finite_difference_grad(Fn&& fn, std::vector<double> point, double step = 1e-6) {
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x = point[i];
    point[i] = x + step;
    const double up = fn(static_cast<const std::vector<double>&>(point));
    point[i] = x - step;
    const double down = fn(static_cast<const std::vector<double>&>(point));
    point[i] = x;
    grad[i] = (up - down) / (2 * step);
  }
  return grad;
}

// Same, perturbing one tensor in place; fn() reads it through a reference.
template <typename Fn>
Tensor<double> finite_difference_grad(Fn&& fn, Tensor<double>& param, double step = 1e-6) {
  Tensor<double> grad(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double x = param[i];
    param[i] = x + step;
    const double up = fn();
    param[i] = x - step;
    const double down = fn();
    param[i] = x;
    grad[i] = (up - down) / (2 * step);
  }
  return grad;
}

inline double max_relative_error(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_relative_error: shape mismatch");
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = relative_error(a[i], b[i]);
    if (!(e <= worst)) worst = e;
  }
  return worst;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("dot: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Reference backward and layer
// ---------------------------------------------------------------------------

// Gradients of sum(g * Attention(Q, K, V)) from the full probability matrix.
template <typename T>
AttentionGrads<T> dense_attention_backward(const Tensor<T>& Q, const Tensor<T>& K,
                                           const Tensor<T>& V, const Tensor<T>& g,
                                           const BiasSpec<T>& bias) {
  const std::size_t B = Q.dim(0), S = Q.dim(1), H = Q.dim(2), D = Q.dim(3), SK = K.dim(1);
  const T scale = T{1} / std::sqrt(static_cast<T>(D));
  AttentionGrads<T> out{Tensor<T>(Q.shape()), Tensor<T>(K.shape()), Tensor<T>(V.shape())};
  std::vector<T> P(S * SK), dP(S * SK);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < S; ++i) {
        T mx = kNegInf<T>;
        for (std::size_t j = 0; j < SK; ++j) {
          T s{0};
          for (std::size_t x = 0; x < D; ++x) s += Q(b, i, h, x) * K(b, j, h, x);
          P[i * SK + j] = s * scale + bias.at(i, j);
          mx = std::max(mx, P[i * SK + j]);
        }
        T sum{0};
        for (std::size_t j = 0; j < SK; ++j) sum += (P[i * SK + j] = std::exp(P[i * SK + j] - mx));
        for (std::size_t j = 0; j < SK; ++j) P[i * SK + j] /= sum;
      }
      for (std::size_t i = 0; i < S; ++i) {
        T row{0};
        for (std::size_t j = 0; j < SK; ++j) {
          T d{0};
          for (std::size_t x = 0; x < D; ++x) d += g(b, i, h, x) * V(b, j, h, x);
          dP[i * SK + j] = d;
          row += d * P[i * SK + j];
        }
        for (std::size_t j = 0; j < SK; ++j) {
          const T p = P[i * SK + j];
          const T ds = p * (dP[i * SK + j] - row) * scale;
          for (std::size_t x = 0; x < D; ++x) {
            out.dv(b, j, h, x) += p * g(b, i, h, x);
            out.dq(b, i, h, x) += ds * K(b, j, h, x);
            out.dk(b, j, h, x) += ds * Q(b, i, h, x);
          }
        }
      }
    }
  }
  return out;
}

// One transformer layer over the whole sequence x [batch, s, hidden],
// written with plain loops so it shares no kernels with the ring path.
template <typename T>
Tensor<T> dense_layer_forward(const Tensor<T>& x, const LayerWeights<T>& w,
                              const BiasSpec<T>& bias) {
  const std::size_t B = x.dim(0), S = x.dim(1), Hd = x.dim(2), N = w.heads, D = Hd / N;
  const std::size_t inner = w.ffn.inner();
  auto project = [&](const Tensor<T>& W) {
    Tensor<T> out({B, S, N, D});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t o = 0; o < Hd; ++o) {
          T acc{0};
          for (std::size_t i = 0; i < Hd; ++i) acc += x(b, s, i) * W(i, o);
          out(b, s, o / D, o % D) = acc;
        }
    return out;
  };
  const auto attn = dense_attention_oracle(project(w.wq), project(w.wk), project(w.wv), bias);
  Tensor<T> z({B, S, Hd});
  std::vector<T> y(Hd), a(inner);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t o = 0; o < Hd; ++o) {
        T acc{0};
        for (std::size_t i = 0; i < Hd; ++i) acc += attn(b, s, i / D, i % D) * w.wo(i, o);
        y[o] = x(b, s, o) + acc;
      }
      for (std::size_t k = 0; k < inner; ++k) {
        T acc = w.ffn.b1(k);
        for (std::size_t i = 0; i < Hd; ++i) acc += y[i] * w.ffn.w1(i, k);
        a[k] = acc > 0 ? acc : T{0};
      }
      for (std::size_t o = 0; o < Hd; ++o) {
        T acc = w.ffn.b2(o);
        for (std::size_t k = 0; k < inner; ++k) acc += a[k] * w.ffn.w2(k, o);
        z(b, s, o) = y[o] + acc;
      }
    }
  }
  return z;
}

// ---------------------------------------------------------------------------
// Config sampling
// ---------------------------------------------------------------------------

struct TestConfig {
  std::size_t batch = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 4;
  std::size_t hosts = 1;
  std::size_t block_len = 1;
  std::size_t inner_chunk = 0;
  BiasKind bias = BiasKind::none;
  std::uint64_t seed = 0;

  std::size_t seq_len() const { return hosts * block_len; }
  std::size_t hidden() const { return heads * head_dim; }

  std::string describe() const {
    return "b=" + std::to_string(batch) + " n=" + std::to_string(heads) +
           " d=" + std::to_string(head_dim) + " hosts=" + std::to_string(hosts) +
           " c=" + std::to_string(block_len) + " chunk=" + std::to_string(inner_chunk) +
           " bias=" + to_string(bias) + " seed=" + std::to_string(seed);
  }
};

// Stratified over host count and bias kind so every 12 consecutive samples
// cover each combination once; other axes are drawn from the seeded stream.
class TestConfigSampler {
 public:
  static constexpr std::array<std::size_t, 4> kHosts{1, 2, 4, 8};
  static constexpr std::array<BiasKind, 3> kBiases{BiasKind::none, BiasKind::causal,
                                                   BiasKind::dense};
  static constexpr std::size_t kMaxSeq = 256;

  explicit TestConfigSampler(std::uint64_t seed) : seed_(seed) {}

  TestConfig sample(std::size_t trial) const {
    Rng rng(seed_ * 0x9E3779B97F4A7C15ull + trial);
    TestConfig c;
    c.hosts = kHosts[trial % kHosts.size()];
    c.bias = kBiases[(trial / kHosts.size()) % kBiases.size()];
    c.batch = rng.pick(std::vector<std::size_t>{1, 2});
    c.heads = rng.pick(std::vector<std::size_t>{1, 2, 4});
    c.head_dim = rng.pick(std::vector<std::size_t>{4, 8, 16});
    std::vector<std::size_t> lens;
    for (std::size_t len = 1; len * c.hosts <= kMaxSeq && len <= 32; len *= 2) lens.push_back(len);
    c.block_len = rng.pick(lens);
    std::vector<std::size_t> chunks;
    for (std::size_t ch = 1; ch <= c.block_len; ch *= 2) chunks.push_back(ch);
    c.inner_chunk = rng.pick(chunks);
    c.seed = rng.next_u64() >> 16;
    return c;
  }

 private:
  std::uint64_t seed_;
};

template <typename T>
struct AttentionInputs {
  Tensor<T> q, k, v;  // [batch, s, heads, head_dim]
  BiasSpec<T> bias = BiasSpec<T>::none();
};

// Inputs in [-1, 1]; dense biases mask about a quarter of the pairs but
// never the diagonal.
inline AttentionInputs<double> make_attention_inputs(const TestConfig& c) {
  Rng rng(c.seed);
  const Shape shape{c.batch, c.seq_len(), c.heads, c.head_dim};
  AttentionInputs<double> in{random_tensor<double>(shape, rng), random_tensor<double>(shape, rng),
                             random_tensor<double>(shape, rng)};
  if (c.bias == BiasKind::causal) in.bias = BiasSpec<double>::causal();
  if (c.bias == BiasKind::dense) {
    const std::size_t s = c.seq_len();
    Tensor<double> bias({s, s});
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        const double u = rng.uniform01();
        bias(i, j) = (i != j && u < 0.25) ? kNegInf<double> : rng.uniform(-1.0, 1.0);
      }
    in.bias = BiasSpec<double>::dense(std::move(bias));
  }
  return in;
}

template <typename T>
AttentionInputs<T> cast_inputs(const AttentionInputs<double>& in) {
  return {in.q.cast<T>(), in.k.cast<T>(), in.v.cast<T>(), in.bias.cast<T>()};
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

struct EquivalenceStats {
  std::size_t trials = 0;
  double max_forward_error = 0;      // ring vs dense oracle
  double max_permutation_error = 0;  // shuffled key order vs list order
  std::size_t causal_checks = 0;
  std::size_t causal_violations = 0;
  std::size_t mode_checks = 0;
  std::size_t mode_mismatches = 0;
  std::map<std::size_t, std::size_t> hosts_seen;
  std::map<std::string, std::size_t> bias_seen;
};

struct EquivalenceOptions {
  std::size_t trials = 100;
  bool check_modes = true;
  // Test hook: perturb one ring output element before comparison.
  bool inject_fault = false;
};

namespace detail {

template <typename T>
bool bitwise_equal(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
  return a == b;
}

// Output rows 0..row must not move when K/V rows after `row` change.
template <typename T>
bool causal_rows_independent(const TestConfig& c, const AttentionInputs<T>& in, std::size_t row,
                             Rng& rng) {
  const RingOptions opt{RingMode::sequential, ChunkSizes{c.inner_chunk, c.inner_chunk}};
  auto run = [&](const Tensor<T>& k, const Tensor<T>& v) {
    auto q = partition_sequence(in.q, c.hosts);
    auto kb = partition_sequence(k, c.hosts);
    auto vb = partition_sequence(v, c.hosts);
    return concat_rows(ring_forward(q, kb, vb, BiasSpec<T>::causal(), opt).outputs);
  };
  const auto base = run(in.k, in.v);
  Tensor<T> k = in.k, v = in.v;
  for (std::size_t b = 0; b < c.batch; ++b)
    for (std::size_t j = row + 1; j < c.seq_len(); ++j)
      for (std::size_t h = 0; h < c.heads; ++h)
        for (std::size_t x = 0; x < c.head_dim; ++x) {
          k(b, j, h, x) = static_cast<T>(rng.uniform(-3, 3));
          v(b, j, h, x) = static_cast<T>(rng.uniform(-3, 3));
        }
  const auto perturbed = run(k, v);
  for (std::size_t b = 0; b < c.batch; ++b)
    for (std::size_t i = 0; i <= row; ++i)
      for (std::size_t h = 0; h < c.heads; ++h)
        for (std::size_t x = 0; x < c.head_dim; ++x)
          if (!(base(b, i, h, x) == perturbed(b, i, h, x))) return false;
  return true;
}

}  // namespace detail

// Dense-vs-ring, block-order permutation, causal independence and
// sequential-vs-concurrent checks over `trials` sampled configs, computed in
// element type T against a 64-bit oracle.
template <typename T>
EquivalenceStats run_equivalence_suite(const TestConfigSampler& sampler,
                                       const EquivalenceOptions& options) {
  if (options.trials == 0) throw ArgumentError("equivalence suite needs at least one trial");
  EquivalenceStats st;
  for (std::size_t t = 0; t < options.trials; ++t) {
    const TestConfig c = sampler.sample(t);
    st.trials++;
    st.hosts_seen[c.hosts]++;
    st.bias_seen[to_string(c.bias)]++;

    const auto in64 = make_attention_inputs(c);
    const auto in = cast_inputs<T>(in64);
    // Oracle on exactly the values the ring sees.
    const auto oracle = dense_attention_oracle(in.q.template cast<double>(),
                                               in.k.template cast<double>(),
                                               in.v.template cast<double>(),
                                               in.bias.template cast<double>());

    RingOptions opt{RingMode::sequential, ChunkSizes{c.inner_chunk, c.inner_chunk}};
    opt.seed = c.seed;
    auto q = partition_sequence(in.q, c.hosts);
    auto k = partition_sequence(in.k, c.hosts);
    auto v = partition_sequence(in.v, c.hosts);
    auto fwd = ring_forward(q, k, v, in.bias, opt);
    if (options.inject_fault) fwd.outputs[0][0] += static_cast<T>(1);
    st.max_forward_error =
        std::max(st.max_forward_error, max_abs_diff(concat_rows(fwd.outputs), oracle));

    // Same query blocks against a shuffled key-block order.
    Rng rng(c.seed ^ 0xA5A5A5A5ull);
    std::vector<std::size_t> order(c.hosts);
    for (std::size_t i = 0; i < c.hosts; ++i) order[i] = i;
    for (std::size_t i = 0; i < c.hosts; ++i) {
      rng.shuffle(order);
      const ChunkSizes ch{c.inner_chunk, c.inner_chunk};
      const auto in_order = blockwise_attention_forward<T>(q[i], k, v, in.bias, ch);
      const auto shuffled = blockwise_attention_forward<T>(q[i], k, v, in.bias, ch, order);
      st.max_permutation_error =
          std::max(st.max_permutation_error, max_abs_diff(in_order.output, shuffled.output));
    }

    if (c.bias == BiasKind::causal) {
      st.causal_checks++;
      const std::size_t row = rng.index(c.seq_len());
      if (!detail::causal_rows_independent(c, in, row, rng)) st.causal_violations++;
    }

    if (options.check_modes) {
      st.mode_checks++;
      RingOptions copt = opt;
      copt.mode = RingMode::concurrent;
      auto cfwd = ring_forward(q, k, v, in.bias, copt);
      if (options.inject_fault) cfwd.outputs[0][0] += static_cast<T>(1);
      Rng grng(c.seed + 17);
      std::vector<Tensor<T>> g;
      for (std::size_t i = 0; i < c.hosts; ++i) {
        g.push_back(random_tensor<T>(q[i].data().shape(), grng));
      }
      auto sb = ring_backward(g, q, k, v, fwd.saved, in.bias, opt);
      auto cb = ring_backward(g, q, k, v, cfwd.saved, in.bias, copt);
      if (!(fwd.outputs == cfwd.outputs && sb.dq == cb.dq && sb.dk == cb.dk && sb.dv == cb.dv)) {
        st.mode_mismatches++;
      }
    }
  }
  return st;
}

struct GradientStats {
  std::size_t configs = 0;
  std::size_t components = 0;
  double max_attention_error = 0;  // dQ, dK, dV vs finite differences
  double max_layer_error = 0;      // dx and every weight vs finite differences
  std::vector<std::string> described;
};

struct GradientOptions {
  std::size_t configs = 20;
  double step = 1e-6;
  // Skip sampled configs whose finite-difference sweep is too expensive.
  double max_cost = 4e8;
};

inline double attention_fd_cost(const TestConfig& c) {
  const double b = static_cast<double>(c.batch), s = static_cast<double>(c.seq_len()),
               h = static_cast<double>(c.hidden());
  return 3 * b * s * h * 2 * (b * s * s * h * 2);
}

inline double layer_fd_cost(const TestConfig& c) {
  const double b = static_cast<double>(c.batch), s = static_cast<double>(c.seq_len()),
               h = static_cast<double>(c.hidden());
  return (b * s * h + 12 * h * h) * 2 * (b * s * s * h * 2 + b * s * 14 * h * h);
}

// Ring backward (attention alone and the full layer) against central
// differences of the dense references, in 64-bit.
inline GradientStats run_gradient_suite(const TestConfigSampler& sampler,
                                        const GradientOptions& options) {
  if (options.configs == 0) throw ArgumentError("gradient suite needs at least one config");
  GradientStats st;
  for (std::size_t t = 0; st.configs < options.configs && t < 100000; ++t) {
    const TestConfig c = sampler.sample(t);
    if (attention_fd_cost(c) + layer_fd_cost(c) > options.max_cost) continue;
    st.configs++;
    st.described.push_back(c.describe());
    auto in = make_attention_inputs(c);
    Rng rng(c.seed + 99);
    const RingOptions opt{RingMode::sequential, ChunkSizes{c.inner_chunk, c.inner_chunk}};

    // Attention: loss = sum(g * O).
    {
      const auto g = random_tensor<double>(in.q.shape(), rng);
      auto q = partition_sequence(in.q, c.hosts);
      auto k = partition_sequence(in.k, c.hosts);
      auto v = partition_sequence(in.v, c.hosts);
      auto fwd = ring_forward(q, k, v, in.bias, opt);
      auto back = ring_backward(split_rows(g, c.hosts), q, k, v, fwd.saved, in.bias, opt);
      auto loss = [&] { return dot(g, dense_attention_oracle(in.q, in.k, in.v, in.bias)); };
      const auto dq = finite_difference_grad(loss, in.q, options.step);
      const auto dk = finite_difference_grad(loss, in.k, options.step);
      const auto dv = finite_difference_grad(loss, in.v, options.step);
      st.max_attention_error = std::max({st.max_attention_error,
                                         max_relative_error(concat_rows(back.dq), dq),
                                         max_relative_error(concat_rows(back.dk), dk),
                                         max_relative_error(concat_rows(back.dv), dv)});
      st.components += dq.size() + dk.size() + dv.size();
    }

    // Full layer: loss = sum(g * z) over x and every weight.
    {
      auto x = random_tensor<double>({c.batch, c.seq_len(), c.hidden()}, rng);
      auto w = LayerWeights<double>::random(c.hidden(), c.heads, rng);
      const auto g = random_tensor<double>(x.shape(), rng);
      auto fwd = ring_layer_forward(split_rows(x, c.hosts), w, in.bias, opt);
      auto back = ring_layer_backward(split_rows(g, c.hosts), fwd.saved, w, in.bias, opt);
      auto loss = [&] { return dot(g, dense_layer_forward(x, w, in.bias)); };
      auto check = [&](const Tensor<double>& analytic, Tensor<double>& param) {
        const auto fd = finite_difference_grad(loss, param, options.step);
        st.max_layer_error = std::max(st.max_layer_error, max_relative_error(analytic, fd));
        st.components += fd.size();
      };
      check(concat_rows(back.dx), x);
      check(back.dweights.wq, w.wq);
      check(back.dweights.wk, w.wk);
      check(back.dweights.wv, w.wv);
      check(back.dweights.wo, w.wo);
      check(back.dweights.ffn.w1, w.ffn.w1);
      check(back.dweights.ffn.b1, w.ffn.b1);
      check(back.dweights.ffn.w2, w.ffn.w2);
      check(back.dweights.ffn.b2, w.ffn.b2);
    }
  }
  return st;
}

struct ScalingRow {
  std::size_t hosts = 0;
  std::size_t seq_len = 0;
  std::size_t peak_blocks = 0;
  double max_error = 0;
};

// Fixed block length, growing ring: sequence grows with the host count,
// per-host residency must not.
inline std::vector<ScalingRow> run_scaling_suite(std::size_t block_len,
                                                 const std::vector<std::size_t>& hosts,
                                                 std::uint64_t seed) {
  std::vector<ScalingRow> rows;
  for (std::size_t n : hosts) {
    TestConfig c{1, 2, 8, n, block_len, 0, BiasKind::causal, seed + n};
    const auto in = make_attention_inputs(c);
    auto fwd = ring_forward(partition_sequence(in.q, n), partition_sequence(in.k, n),
                            partition_sequence(in.v, n), in.bias);
    const auto oracle = dense_attention_oracle(in.q, in.k, in.v, in.bias);
    rows.push_back({n, c.seq_len(), memory_audit(fwd.report).peak_blocks,
                    max_abs_diff(concat_rows(fwd.outputs), oracle)});
  }
  return rows;
}

}  // namespace ringattn
