// SPDX-License-Identifier: Apache-2.0
//
// Blockwise attention with an online softmax.
//
// A query block is combined with a stream of key/value blocks one at a time.
// Each update keeps, per query row, the running maximum logit, the running
// softmax denominator and the unnormalised weighted sum of values. Earlier
// contributions are rescaled whenever the running maximum grows, so the
// final result is independent of the order in which key blocks arrive.
//
// The backward pass never stores attention probabilities. It recomputes them
// from the logits using the saved max_score and denominator, and uses the
// saved output for the rowsum(g * output) term of the softmax Jacobian.
//
// Layout conventions:
//   block data / numerator / output   [batch, len, heads, head_dim]
//   denominator / max_score           [batch, heads, len]
//   scores                            [batch, heads, q_len, k_len]

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ringattn/tensor.hpp"

namespace ringattn {

template <typename T>
inline constexpr T kNegInf = -std::numeric_limits<T>::infinity();

// ---------------------------------------------------------------------------
// Block
// ---------------------------------------------------------------------------

// One contiguous slice of a sequence-major tensor, tagged with its position
// in the partition. Rows of block `index` start at global position
// index * len.
template <typename T>
class Block {
 public:
  Block() = default;

  Block(Tensor<T> data, std::size_t index, std::size_t count)
      : data_(std::move(data)), index_(index), count_(count) {
    if (data_.rank() != 4) {
      throw ShapeError("block data must be rank 4 [batch, len, heads, head_dim], got " +
                       to_string(data_.shape()));
    }
    for (std::size_t d : data_.shape()) {
      if (d == 0) throw ShapeError("block dimensions must be >= 1, got " + to_string(data_.shape()));
    }
    if (count_ == 0 || index_ >= count_) {
      throw ShapeError("block index " + std::to_string(index_) + " outside [0, " +
                       std::to_string(count_) + ")");
    }
  }

  std::size_t batch() const { return data_.dim(0); }
  std::size_t len() const { return data_.dim(1); }
  std::size_t heads() const { return data_.dim(2); }
  std::size_t head_dim() const { return data_.dim(3); }
  std::size_t hidden() const { return heads() * head_dim(); }

  std::size_t index() const noexcept { return index_; }
  std::size_t count() const noexcept { return count_; }
  std::size_t position() const { return index_ * len(); }
  std::size_t sequence_length() const { return count_ * len(); }

  const Tensor<T>& data() const noexcept { return data_; }
  Tensor<T>& data() noexcept { return data_; }

  friend bool operator==(const Block& a, const Block& b) {
    return a.index_ == b.index_ && a.count_ == b.count_ && a.data_ == b.data_;
  }

 private:
  Tensor<T> data_;
  std::size_t index_ = 0;
  std::size_t count_ = 1;
};

// Half-open range of rows [begin, begin + len) inside a block.
struct RowRange {
  std::size_t begin = 0;
  std::size_t len = 0;
};

// Inner query/key chunk lengths used inside one host's loops. Zero means
// "the whole block".
struct ChunkSizes {
  std::size_t query = 0;
  std::size_t key = 0;
};

inline std::size_t resolve_chunk(std::size_t chunk, std::size_t block_len) {
  const std::size_t c = chunk == 0 ? block_len : chunk;
  if (c > block_len || block_len % c != 0) {
    throw PartitionError("chunk size " + std::to_string(c) +
                         " does not divide block length " + std::to_string(block_len));
  }
  return c;
}

// FNV-1a over the raw bytes; used to tie saved forward state to its inputs.
template <typename T>
std::uint64_t fingerprint(const Tensor<T>& t) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.raw());
  for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Bias
// ---------------------------------------------------------------------------

enum class BiasKind { none, causal, dense };

inline const char* to_string(BiasKind kind) {
  switch (kind) {
    case BiasKind::none: return "none";
    case BiasKind::causal: return "causal";
    case BiasKind::dense: return "dense";
  }
  return "?";
}

// Additive logit bias, resolved from global query/key positions. The dense
// form is shared by every batch element and head.
template <typename T>
class BiasSpec {
 public:
  static BiasSpec none() { return BiasSpec(BiasKind::none, nullptr); }
  static BiasSpec causal() { return BiasSpec(BiasKind::causal, nullptr); }
  static BiasSpec dense(Tensor<T> bias) {
    if (bias.rank() != 2 || bias.dim(0) != bias.dim(1)) {
      throw BiasError("dense bias must be square [s, s], got " + to_string(bias.shape()));
    }
    for (T x : bias.data()) {
      if (std::isnan(x) || x == std::numeric_limits<T>::infinity()) {
        throw BiasError("dense bias entries must be finite or -inf");
      }
    }
    return BiasSpec(BiasKind::dense, std::make_shared<const Tensor<T>>(std::move(bias)));
  }

  BiasKind kind() const noexcept { return kind_; }
  const Tensor<T>* dense_bias() const noexcept { return dense_.get(); }

  // Throws unless the bias covers every (query, key) position pair.
  void check_covers(std::size_t q_seq, std::size_t k_seq) const {
    if (kind_ != BiasKind::dense) return;
    if (dense_->dim(0) < q_seq || dense_->dim(1) < k_seq) {
      throw BiasError("dense bias " + to_string(dense_->shape()) +
                      " smaller than sequence [" + std::to_string(q_seq) + ", " +
                      std::to_string(k_seq) + "]");
    }
  }

  T at(std::size_t q_pos, std::size_t k_pos) const {
    switch (kind_) {
      case BiasKind::none: return T{0};
      case BiasKind::causal: return k_pos > q_pos ? kNegInf<T> : T{0};
      case BiasKind::dense: return (*dense_)(q_pos, k_pos);
    }
    return T{0};
  }

  // True when every pair between the two position ranges is masked.
  bool fully_masked(std::size_t q_begin, std::size_t q_len, std::size_t k_begin) const {
    return kind_ == BiasKind::causal && k_begin > q_begin + q_len - 1;
  }

  template <typename U>
  BiasSpec<U> cast() const {
    if (kind_ == BiasKind::dense) return BiasSpec<U>::dense(dense_->template cast<U>());
    return kind_ == BiasKind::causal ? BiasSpec<U>::causal() : BiasSpec<U>::none();
  }

 private:
  BiasSpec(BiasKind kind, std::shared_ptr<const Tensor<T>> dense)
      : kind_(kind), dense_(std::move(dense)) {}

  BiasKind kind_ = BiasKind::none;
  std::shared_ptr<const Tensor<T>> dense_;
};

// ---------------------------------------------------------------------------
// Online softmax state
// ---------------------------------------------------------------------------

template <typename T>
struct SoftmaxAccumulator {
  SoftmaxAccumulator() = default;
  SoftmaxAccumulator(std::size_t batch, std::size_t len, std::size_t heads, std::size_t head_dim)
      : numerator({batch, len, heads, head_dim}, T{0}),
        denominator({batch, heads, len}, T{0}),
        max_score({batch, heads, len}, kNegInf<T>) {}

  template <typename U>
  static SoftmaxAccumulator like(const Block<U>& q) {
    return SoftmaxAccumulator(q.batch(), q.len(), q.heads(), q.head_dim());
  }

  std::size_t batch() const { return numerator.dim(0); }
  std::size_t len() const { return numerator.dim(1); }
  std::size_t heads() const { return numerator.dim(2); }
  std::size_t head_dim() const { return numerator.dim(3); }

  Tensor<T> numerator;
  Tensor<T> denominator;
  Tensor<T> max_score;
};

// Everything the backward pass needs besides the Q/K/V blocks themselves.
template <typename T>
struct SavedForwardState {
  Tensor<T> output;
  Tensor<T> denominator;
  Tensor<T> max_score;
  std::size_t query_index = 0;
  std::uint64_t query_fingerprint = 0;
};

namespace detail {

template <typename T>
void check_qk_compatible(const Block<T>& q, const Block<T>& k) {
  if (q.batch() != k.batch() || q.heads() != k.heads() || q.head_dim() != k.head_dim()) {
    throw ShapeError("query block " + to_string(q.data().shape()) +
                     " incompatible with key block " + to_string(k.data().shape()));
  }
}

template <typename T>
void check_kv_compatible(const Block<T>& k, const Block<T>& v) {
  if (k.data().shape() != v.data().shape()) {
    throw ShapeError("key block " + to_string(k.data().shape()) +
                     " and value block " + to_string(v.data().shape()) + " differ");
  }
}

inline void check_range(RowRange r, std::size_t len, const char* what) {
  if (r.len == 0 || r.begin + r.len > len) {
    throw ShapeError(std::string(what) + " row range [" + std::to_string(r.begin) + ", " +
                     std::to_string(r.begin + r.len) + ") outside block of length " +
                     std::to_string(len));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

// QK^T / sqrt(d) plus bias for the given query and key rows. Masked pairs
// are exactly -inf.
template <typename T>
Tensor<T> scaled_scores(const Block<T>& q, RowRange q_rows, const Block<T>& k,
                        RowRange k_rows, const BiasSpec<T>& bias) {
  detail::check_qk_compatible(q, k);
  detail::check_range(q_rows, q.len(), "query");
  detail::check_range(k_rows, k.len(), "key");
  bias.check_covers(q.sequence_length(), k.sequence_length());

  const std::size_t B = q.batch(), H = q.heads(), D = q.head_dim();
  const T scale = T{1} / std::sqrt(static_cast<T>(D));
  Tensor<T> scores({B, H, q_rows.len, k_rows.len});
  const auto& qd = q.data();
  const auto& kd = k.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < q_rows.len; ++i) {
        const std::size_t qi = q_rows.begin + i;
        const T* qrow = &qd(b, qi, h, 0);
        for (std::size_t j = 0; j < k_rows.len; ++j) {
          const std::size_t kj = k_rows.begin + j;
          const T bias_ij = bias.at(q.position() + qi, k.position() + kj);
          if (bias_ij == kNegInf<T>) {
            scores(b, h, i, j) = kNegInf<T>;
            continue;
          }
          const T* krow = &kd(b, kj, h, 0);
          T dot{0};
          for (std::size_t x = 0; x < D; ++x) dot += qrow[x] * krow[x];
          scores(b, h, i, j) = dot * scale + bias_ij;
        }
      }
    }
  }
  return scores;
}

template <typename T>
Tensor<T> scaled_scores(const Block<T>& q, const Block<T>& k, const BiasSpec<T>& bias) {
  return scaled_scores(q, RowRange{0, q.len()}, k, RowRange{0, k.len()}, bias);
}

// Folds one block of logits into the accumulator. `scores` covers
// accumulator rows [acc_row, acc_row + q_len) and value rows `v_rows`.
// Rows whose logits are all -inf are left untouched.
template <typename T>
void online_update(SoftmaxAccumulator<T>& acc, const Tensor<T>& scores, const Block<T>& v,
                   RowRange v_rows, std::size_t acc_row = 0) {
  if (scores.rank() != 4) throw ShapeError("scores must be rank 4, got " + to_string(scores.shape()));
  const std::size_t B = scores.dim(0), H = scores.dim(1), CQ = scores.dim(2), CK = scores.dim(3);
  const std::size_t D = acc.head_dim();
  if (B != acc.batch() || H != acc.heads() || acc_row + CQ > acc.len() || v.batch() != B ||
      v.heads() != H || v.head_dim() != D || v_rows.len != CK || v_rows.begin + CK > v.len()) {
    throw ShapeError("online_update: scores " + to_string(scores.shape()) + ", accumulator " +
                     to_string(acc.numerator.shape()) + ", values " + to_string(v.data().shape()));
  }
  for (T s : scores.data()) {
    if (std::isnan(s) || s == std::numeric_limits<T>::infinity()) {
      throw NumericError("online_update: scores contain NaN or +inf");
    }
  }

  const auto& vd = v.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < CQ; ++i) {
        const T* row = &scores(b, h, i, 0);
        T block_max = kNegInf<T>;
        for (std::size_t j = 0; j < CK; ++j) block_max = std::max(block_max, row[j]);
        if (block_max == kNegInf<T>) continue;

        const std::size_t r = acc_row + i;
        T& running_max = acc.max_score(b, h, r);
        T& denom = acc.denominator(b, h, r);
        T* num = &acc.numerator(b, r, h, 0);
        const T new_max = std::max(running_max, block_max);
        if (new_max != running_max) {
          // exp(-inf - x) == 0: an empty accumulator simply resets.
          const T rescale = running_max == kNegInf<T> ? T{0} : std::exp(running_max - new_max);
          denom *= rescale;
          for (std::size_t x = 0; x < D; ++x) num[x] *= rescale;
          running_max = new_max;
        }
        for (std::size_t j = 0; j < CK; ++j) {
          if (row[j] == kNegInf<T>) continue;
          const T p = std::exp(row[j] - new_max);
          if (p == T{0}) continue;
          denom += p;
          const T* vrow = &vd(b, v_rows.begin + j, h, 0);
          for (std::size_t x = 0; x < D; ++x) num[x] += p * vrow[x];
        }
      }
    }
  }
}

template <typename T>
void online_update(SoftmaxAccumulator<T>& acc, const Tensor<T>& scores, const Block<T>& v) {
  online_update(acc, scores, v, RowRange{0, v.len()}, 0);
}

// numerator / denominator, broadcast over head_dim.
template <typename T>
Tensor<T> finalize(const SoftmaxAccumulator<T>& acc) {
  const std::size_t B = acc.batch(), C = acc.len(), H = acc.heads(), D = acc.head_dim();
  Tensor<T> out({B, C, H, D});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < C; ++i) {
        const T denom = acc.denominator(b, h, i);
        if (!(denom > T{0})) {
          throw MaskedRowError("finalize: query row " + std::to_string(i) + " (batch " +
                               std::to_string(b) + ", head " + std::to_string(h) +
                               ") attended to no key");
        }
        const T* num = &acc.numerator(b, i, h, 0);
        T* o = &out(b, i, h, 0);
        for (std::size_t x = 0; x < D; ++x) o[x] = num[x] / denom;
      }
    }
  }
  return out;
}

// Attends every query chunk of `q` to every key chunk of one key/value
// block, in chunk order.
template <typename T>
void attend_block(SoftmaxAccumulator<T>& acc, const Block<T>& q, const Block<T>& k,
                  const Block<T>& v, const BiasSpec<T>& bias, ChunkSizes chunks,
                  bool skip_masked = false) {
  detail::check_qk_compatible(q, k);
  detail::check_kv_compatible(k, v);
  if (acc.numerator.shape() != q.data().shape()) {
    throw ShapeError("accumulator " + to_string(acc.numerator.shape()) +
                     " does not match query block " + to_string(q.data().shape()));
  }
  const std::size_t cq = resolve_chunk(chunks.query, q.len());
  const std::size_t ck = resolve_chunk(chunks.key, k.len());
  for (std::size_t q0 = 0; q0 < q.len(); q0 += cq) {
    for (std::size_t k0 = 0; k0 < k.len(); k0 += ck) {
      if (skip_masked && bias.fully_masked(q.position() + q0, cq, k.position() + k0)) continue;
      const auto scores = scaled_scores(q, RowRange{q0, cq}, k, RowRange{k0, ck}, bias);
      online_update(acc, scores, v, RowRange{k0, ck}, q0);
    }
  }
}

template <typename T>
SavedForwardState<T> save_state(const SoftmaxAccumulator<T>& acc, const Block<T>& q) {
  return SavedForwardState<T>{finalize(acc), acc.denominator, acc.max_score, q.index(),
                              fingerprint(q.data())};
}

// Single-host blockwise attention of `q` against a list of key/value
// blocks, presented in `order` (default: list order).
template <typename T>
SavedForwardState<T> blockwise_attention_forward(const Block<T>& q,
                                                 std::span<const Block<T>> keys,
                                                 std::span<const Block<T>> values,
                                                 const BiasSpec<T>& bias, ChunkSizes chunks = {},
                                                 std::span<const std::size_t> order = {}) {
  if (keys.size() != values.size() || keys.empty()) {
    throw ShapeError("need one value block per key block and at least one block");
  }
  std::vector<std::size_t> seq(keys.size());
  std::iota(seq.begin(), seq.end(), std::size_t{0});
  if (!order.empty()) {
    if (order.size() != keys.size()) throw ArgumentError("block order has the wrong length");
    seq.assign(order.begin(), order.end());
  }
  auto acc = SoftmaxAccumulator<T>::like(q);
  for (std::size_t j : seq) attend_block(acc, q, keys[j], values[j], bias, chunks);
  return save_state(acc, q);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionGrads {
  Tensor<T> dq;
  Tensor<T> dk;
  Tensor<T> dv;
};

namespace detail {

template <typename T>
void check_saved(const Block<T>& q, const SavedForwardState<T>& saved) {
  const Shape stats{q.batch(), q.heads(), q.len()};
  if (saved.output.shape() != q.data().shape() || saved.denominator.shape() != stats ||
      saved.max_score.shape() != stats) {
    throw StateError("saved forward state shapes do not match query block " +
                     to_string(q.data().shape()));
  }
  if (saved.query_index != q.index() || saved.query_fingerprint != fingerprint(q.data())) {
    throw StateError("saved forward state was produced for a different query block");
  }
}

}  // namespace detail

// Accumulates the gradient contribution of one key/value block into dq, dk
// and dv. Probabilities are recomputed from the saved statistics.
template <typename T>
void block_backward(const Block<T>& q, const Block<T>& k, const Block<T>& v,
                    const Tensor<T>& upstream, const SavedForwardState<T>& saved,
                    const BiasSpec<T>& bias, Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv,
                    ChunkSizes chunks = {}, bool skip_masked = false) {
  detail::check_qk_compatible(q, k);
  detail::check_kv_compatible(k, v);
  detail::check_saved(q, saved);
  expect_shape(upstream, q.data().shape(), "upstream gradient");
  expect_shape(dq, q.data().shape(), "dq");
  expect_shape(dk, k.data().shape(), "dk");
  expect_shape(dv, v.data().shape(), "dv");

  const std::size_t B = q.batch(), H = q.heads(), D = q.head_dim();
  const T scale = T{1} / std::sqrt(static_cast<T>(D));
  const std::size_t cq = resolve_chunk(chunks.query, q.len());
  const std::size_t ck = resolve_chunk(chunks.key, k.len());
  const auto& qd = q.data();
  const auto& kd = k.data();
  const auto& vd = v.data();

  // rowsum(g * output), one value per query row.
  Tensor<T> g_dot_o({B, H, q.len()});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < q.len(); ++i) {
        T acc{0};
        for (std::size_t x = 0; x < D; ++x) acc += upstream(b, i, h, x) * saved.output(b, i, h, x);
        g_dot_o(b, h, i) = acc;
      }

  for (std::size_t q0 = 0; q0 < q.len(); q0 += cq) {
    for (std::size_t k0 = 0; k0 < k.len(); k0 += ck) {
      if (skip_masked && bias.fully_masked(q.position() + q0, cq, k.position() + k0)) continue;
      const auto scores = scaled_scores(q, RowRange{q0, cq}, k, RowRange{k0, ck}, bias);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < cq; ++i) {
            const std::size_t qi = q0 + i;
            const T m = saved.max_score(b, h, qi);
            const T l = saved.denominator(b, h, qi);
            const T* g = &upstream(b, qi, h, 0);
            const T* qrow = &qd(b, qi, h, 0);
            T* dqrow = &dq(b, qi, h, 0);
            for (std::size_t j = 0; j < ck; ++j) {
              const T s = scores(b, h, i, j);
              if (s == kNegInf<T>) continue;
              const std::size_t kj = k0 + j;
              const T p = std::exp(s - m) / l;
              if (p == T{0}) continue;
              const T* vrow = &vd(b, kj, h, 0);
              const T* krow = &kd(b, kj, h, 0);
              T* dvrow = &dv(b, kj, h, 0);
              T* dkrow = &dk(b, kj, h, 0);
              T dp{0};
              for (std::size_t x = 0; x < D; ++x) {
                dvrow[x] += p * g[x];
                dp += g[x] * vrow[x];
              }
              const T ds = p * (dp - g_dot_o(b, h, qi)) * scale;
              for (std::size_t x = 0; x < D; ++x) {
                dqrow[x] += ds * krow[x];
                dkrow[x] += ds * qrow[x];
              }
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Dense reference
// ---------------------------------------------------------------------------

// softmax(QK^T / sqrt(d) + bias) V over full [batch, s, heads, head_dim]
// tensors, materialising every score row.
template <typename T>
Tensor<T> dense_attention_oracle(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                                 const BiasSpec<T>& bias) {
  if (Q.rank() != 4 || K.shape() != V.shape() || K.rank() != 4 || Q.dim(0) != K.dim(0) ||
      Q.dim(2) != K.dim(2) || Q.dim(3) != K.dim(3)) {
    throw ShapeError("dense_attention_oracle: incompatible shapes " + to_string(Q.shape()) +
                     ", " + to_string(K.shape()) + ", " + to_string(V.shape()));
  }
  const std::size_t B = Q.dim(0), SQ = Q.dim(1), SK = K.dim(1), H = Q.dim(2), D = Q.dim(3);
  bias.check_covers(SQ, SK);
  const T scale = T{1} / std::sqrt(static_cast<T>(D));
  Tensor<T> out(Q.shape());
  std::vector<T> row(SK);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < SQ; ++i) {
        T row_max = kNegInf<T>;
        for (std::size_t j = 0; j < SK; ++j) {
          T dot{0};
          for (std::size_t x = 0; x < D; ++x) dot += Q(b, i, h, x) * K(b, j, h, x);
          row[j] = dot * scale + bias.at(i, j);
          row_max = std::max(row_max, row[j]);
        }
        if (row_max == kNegInf<T>) throw MaskedRowError("dense oracle: fully masked row");
        T sum{0};
        for (std::size_t j = 0; j < SK; ++j) {
          row[j] = std::exp(row[j] - row_max);
          sum += row[j];
        }
        for (std::size_t x = 0; x < D; ++x) {
          T acc{0};
          for (std::size_t j = 0; j < SK; ++j) acc += row[j] * V(b, j, h, x);
          out(b, i, h, x) = acc / sum;
        }
      }
    }
  }
  return out;
}

}  // namespace ringattn
