// SPDX-License-Identifier: Apache-2.0
//
// Position-wise feedforward network and the residual composition that turns
// one host's attention output into the transformer-layer output:
//
//   y = x + Attn(x) Wo
//   z = y + FFN(y),    FFN(y) = max(0, y W1 + b1) W2 + b2
//
// No normalisation layers are applied.

#pragma once

#include <algorithm>
#include <cstddef>
#include <string>

#include "ringattn/attention.hpp"
#include "ringattn/tensor.hpp"

namespace ringattn {

// x [..., in] times W [in, out] -> [..., out]. Each output element is
// summed in increasing `in` order.
template <typename T>
Tensor<T> matmul_last(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw ShapeError("matmul_last: " + to_string(x.shape()) + " x " + to_string(w.shape()));
  }
  const std::size_t in = w.dim(0), out = w.dim(1), rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = out;
  Tensor<T> y(std::move(shape), T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.raw() + r * in;
    T* yr = y.raw() + r * out;
    for (std::size_t k = 0; k < in; ++k) {
      const T a = xr[k];
      const T* wr = w.raw() + k * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += a * wr[o];
    }
  }
  return y;
}

// x [..., out] times W^T for W [in, out] -> [..., in].
template <typename T>
Tensor<T> matmul_last_transposed(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(1)) {
    throw ShapeError("matmul_last_transposed: " + to_string(x.shape()) + " x " +
                     to_string(w.shape()) + "^T");
  }
  const std::size_t in = w.dim(0), out = w.dim(1), rows = x.size() / out;
  Shape shape = x.shape();
  shape.back() = in;
  Tensor<T> y(std::move(shape), T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.raw() + r * out;
    T* yr = y.raw() + r * in;
    for (std::size_t k = 0; k < in; ++k) {
      const T* wr = w.raw() + k * out;
      T acc{0};
      for (std::size_t o = 0; o < out; ++o) acc += xr[o] * wr[o];
      yr[k] = acc;
    }
  }
  return y;
}

// dW += x^T g over all leading positions; x [..., in], g [..., out].
template <typename T>
void accumulate_outer(Tensor<T>& dw, const Tensor<T>& x, const Tensor<T>& g) {
  const std::size_t in = dw.dim(0), out = dw.dim(1);
  if (x.shape().back() != in || g.shape().back() != out || x.size() / in != g.size() / out) {
    throw ShapeError("accumulate_outer: " + to_string(x.shape()) + ", " + to_string(g.shape()) +
                     " into " + to_string(dw.shape()));
  }
  const std::size_t rows = x.size() / in;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.raw() + r * in;
    const T* gr = g.raw() + r * out;
    for (std::size_t k = 0; k < in; ++k) {
      T* dr = dw.raw() + k * out;
      for (std::size_t o = 0; o < out; ++o) dr[o] += xr[k] * gr[o];
    }
  }
}

// ---------------------------------------------------------------------------
// Feedforward
// ---------------------------------------------------------------------------

template <typename T>
struct FfnParams {
  Tensor<T> w1;  // [hidden, inner]
  Tensor<T> b1;  // [inner]
  Tensor<T> w2;  // [inner, hidden]
  Tensor<T> b2;  // [hidden]

  static FfnParams zeros(std::size_t hidden, std::size_t ratio = 4) {
    const std::size_t inner = hidden * ratio;
    return {Tensor<T>({hidden, inner}), Tensor<T>({inner}), Tensor<T>({inner, hidden}),
            Tensor<T>({hidden})};
  }

  std::size_t hidden() const { return w1.dim(0); }
  std::size_t inner() const { return w1.dim(1); }

  void validate() const {
    if (w1.rank() != 2 || w2.rank() != 2 || b1.rank() != 1 || b2.rank() != 1 ||
        w2.dim(0) != w1.dim(1) || w2.dim(1) != w1.dim(0) || b1.dim(0) != w1.dim(1) ||
        b2.dim(0) != w1.dim(0)) {
      throw ShapeError("inconsistent FFN parameter shapes: W1 " + to_string(w1.shape()) +
                       ", b1 " + to_string(b1.shape()) + ", W2 " + to_string(w2.shape()) +
                       ", b2 " + to_string(b2.shape()));
    }
  }

  template <typename U>
  FfnParams<U> cast() const {
    return {w1.template cast<U>(), b1.template cast<U>(), w2.template cast<U>(),
            b2.template cast<U>()};
  }
};

template <typename T>
void add_into(FfnParams<T>& acc, const FfnParams<T>& g) {
  add_into(acc.w1, g.w1);
  add_into(acc.b1, g.b1);
  add_into(acc.w2, g.w2);
  add_into(acc.b2, g.b2);
}

struct FfnOptions {
  // Split the inner dimension into chunks of this width (0 = whole).
  std::size_t inner_chunk = 0;
};

struct FfnStats {
  std::size_t peak_temporary_elements = 0;
};

// FFN applied independently to every position of x [..., hidden].
// Output elements are summed in increasing inner index with b2 added last,
// so the result does not depend on inner chunking or block partitioning.
template <typename T>
Tensor<T> ffn_block(const Tensor<T>& x, const FfnParams<T>& params, FfnOptions options = {},
                    FfnStats* stats = nullptr) {
  params.validate();
  const std::size_t hidden = params.hidden(), inner = params.inner();
  if (x.rank() < 1 || x.shape().back() != hidden) {
    throw ShapeError("ffn_block: input " + to_string(x.shape()) + " but hidden size is " +
                     std::to_string(hidden));
  }
  const std::size_t chunk = options.inner_chunk == 0 ? inner : options.inner_chunk;
  if (inner % chunk != 0) {
    throw ShapeError("ffn inner chunk " + std::to_string(chunk) + " does not divide " +
                     std::to_string(inner));
  }
  const std::size_t rows = x.size() / hidden;
  Tensor<T> out(x.shape(), T{0});
  Tensor<T> act({rows, chunk});
  for (std::size_t c0 = 0; c0 < inner; c0 += chunk) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = x.raw() + r * hidden;
      for (std::size_t k = 0; k < chunk; ++k) {
        T pre{0};
        for (std::size_t i = 0; i < hidden; ++i) pre += xr[i] * params.w1(i, c0 + k);
        pre += params.b1(c0 + k);
        act(r, k) = std::max(T{0}, pre);
      }
      T* orow = out.raw() + r * hidden;
      for (std::size_t k = 0; k < chunk; ++k) {
        const T a = act(r, k);
        for (std::size_t o = 0; o < hidden; ++o) orow[o] += a * params.w2(c0 + k, o);
      }
    }
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < hidden; ++o) out[r * hidden + o] += params.b2(o);
  if (stats) stats->peak_temporary_elements = std::max(stats->peak_temporary_elements, act.size());
  return out;
}

template <typename T>
struct FfnBackward {
  Tensor<T> dx;
  FfnParams<T> grads;
};

// Chain rule through the ReLU with subgradient 0 at exactly 0.
template <typename T>
FfnBackward<T> ffn_block_backward(const Tensor<T>& x, const FfnParams<T>& params,
                                  const Tensor<T>& upstream) {
  params.validate();
  const std::size_t hidden = params.hidden(), inner = params.inner();
  if (x.rank() < 1 || x.shape().back() != hidden) {
    throw ShapeError("ffn_block_backward: input " + to_string(x.shape()));
  }
  expect_shape(upstream, x.shape(), "ffn upstream gradient");
  const std::size_t rows = x.size() / hidden;

  FfnBackward<T> res{Tensor<T>(x.shape()),
                     FfnParams<T>{Tensor<T>(params.w1.shape()), Tensor<T>(params.b1.shape()),
                                  Tensor<T>(params.w2.shape()), Tensor<T>(params.b2.shape())}};
  auto& g = res.grads;
  std::vector<T> act(inner), dact(inner);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.raw() + r * hidden;
    const T* gr = upstream.raw() + r * hidden;
    for (std::size_t k = 0; k < inner; ++k) {
      T pre{0};
      for (std::size_t i = 0; i < hidden; ++i) pre += xr[i] * params.w1(i, k);
      pre += params.b1(k);
      act[k] = std::max(T{0}, pre);
      T da{0};
      for (std::size_t o = 0; o < hidden; ++o) da += gr[o] * params.w2(k, o);
      dact[k] = pre > T{0} ? da : T{0};
    }
    for (std::size_t o = 0; o < hidden; ++o) g.b2(o) += gr[o];
    for (std::size_t k = 0; k < inner; ++k) {
      for (std::size_t o = 0; o < hidden; ++o) g.w2(k, o) += act[k] * gr[o];
      g.b1(k) += dact[k];
    }
    T* dxr = res.dx.raw() + r * hidden;
    for (std::size_t i = 0; i < hidden; ++i) {
      T acc{0};
      for (std::size_t k = 0; k < inner; ++k) {
        g.w1(i, k) += xr[i] * dact[k];
        acc += dact[k] * params.w1(i, k);
      }
      dxr[i] = acc;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Transformer layer pieces
// ---------------------------------------------------------------------------

template <typename T>
struct LayerWeights {
  std::size_t heads = 1;
  Tensor<T> wq, wk, wv, wo;  // [hidden, hidden]
  FfnParams<T> ffn;

  static LayerWeights zeros(std::size_t hidden, std::size_t heads, std::size_t ffn_ratio = 4) {
    Shape sq{hidden, hidden};
    return {heads, Tensor<T>(sq), Tensor<T>(sq), Tensor<T>(sq), Tensor<T>(sq),
            FfnParams<T>::zeros(hidden, ffn_ratio)};
  }

  static LayerWeights random(std::size_t hidden, std::size_t heads, Rng& rng,
                             std::size_t ffn_ratio = 4) {
    auto w = zeros(hidden, heads, ffn_ratio);
    const double a = 1.0 / std::sqrt(static_cast<double>(hidden));
    const double f = 1.0 / std::sqrt(static_cast<double>(hidden * ffn_ratio));
    for (Tensor<T>* t : {&w.wq, &w.wk, &w.wv, &w.wo, &w.ffn.w1})
      for (auto& x : t->data()) x = static_cast<T>(rng.uniform(-a, a));
    for (auto& x : w.ffn.w2.data()) x = static_cast<T>(rng.uniform(-f, f));
    for (auto& x : w.ffn.b1.data()) x = static_cast<T>(rng.uniform(-0.1, 0.1));
    for (auto& x : w.ffn.b2.data()) x = static_cast<T>(rng.uniform(-0.1, 0.1));
    return w;
  }

  std::size_t hidden() const { return wq.dim(0); }
  std::size_t head_dim() const { return hidden() / heads; }

  void validate() const {
    const std::size_t h = wq.rank() == 2 ? wq.dim(0) : 0;
    const Shape sq{h, h};
    if (h == 0 || heads == 0 || h % heads != 0 || wq.shape() != sq || wk.shape() != sq ||
        wv.shape() != sq || wo.shape() != sq || ffn.hidden() != h) {
      throw ShapeError("inconsistent layer weight shapes");
    }
    ffn.validate();
  }

  template <typename U>
  LayerWeights<U> cast() const {
    return {heads, wq.template cast<U>(), wk.template cast<U>(), wv.template cast<U>(),
            wo.template cast<U>(), ffn.template cast<U>()};
  }
};

template <typename T>
void add_into(LayerWeights<T>& acc, const LayerWeights<T>& g) {
  add_into(acc.wq, g.wq);
  add_into(acc.wk, g.wk);
  add_into(acc.wv, g.wv);
  add_into(acc.wo, g.wo);
  add_into(acc.ffn, g.ffn);
}

template <typename T>
struct QkvTensors {
  Tensor<T> q, k, v;  // [batch, len, heads, head_dim]
};

// x [batch, len, hidden] -> per-head Q, K, V.
template <typename T>
QkvTensors<T> qkv_projection(const Tensor<T>& x, const LayerWeights<T>& w) {
  w.validate();
  if (x.rank() != 3 || x.dim(2) != w.hidden()) {
    throw ShapeError("qkv_projection: input " + to_string(x.shape()));
  }
  const Shape heads{x.dim(0), x.dim(1), w.heads, w.head_dim()};
  return {matmul_last(x, w.wq).reshaped(heads), matmul_last(x, w.wk).reshaped(heads),
          matmul_last(x, w.wv).reshaped(heads)};
}

// Given dQ, dK, dV for this block: returns dx and accumulates dWq/dWk/dWv.
template <typename T>
Tensor<T> qkv_projection_backward(const Tensor<T>& x, const LayerWeights<T>& w,
                                  const QkvTensors<T>& grads, LayerWeights<T>& dw) {
  const Shape flat{x.dim(0), x.dim(1), w.hidden()};
  const auto dq = grads.q.reshaped(flat), dk = grads.k.reshaped(flat), dv = grads.v.reshaped(flat);
  accumulate_outer(dw.wq, x, dq);
  accumulate_outer(dw.wk, x, dk);
  accumulate_outer(dw.wv, x, dv);
  auto dx = matmul_last_transposed(dq, w.wq);
  add_into(dx, matmul_last_transposed(dk, w.wk));
  add_into(dx, matmul_last_transposed(dv, w.wv));
  return dx;
}

template <typename T>
struct BlockOutput {
  Tensor<T> y;  // after the attention residual
  Tensor<T> z;  // layer output
};

// Composes an attention output [batch, len, heads, head_dim] with the
// residual stream x [batch, len, hidden] and the feedforward network.
template <typename T>
BlockOutput<T> transformer_block(const Tensor<T>& x, const Tensor<T>& attn_out,
                                 const LayerWeights<T>& w, FfnOptions options = {},
                                 FfnStats* stats = nullptr) {
  w.validate();
  if (x.rank() != 3 || x.dim(2) != w.hidden() || attn_out.size() != x.size()) {
    throw ShapeError("transformer_block: x " + to_string(x.shape()) + ", attention " +
                     to_string(attn_out.shape()));
  }
  auto y = matmul_last(attn_out.reshaped(x.shape()), w.wo);
  add_into(y, x);
  auto z = ffn_block(y, w.ffn, options, stats);
  add_into(z, y);
  return {std::move(y), std::move(z)};
}

template <typename T>
struct BlockBackward {
  Tensor<T> dx_residual;  // gradient reaching x through both residual paths
  Tensor<T> d_attn_out;   // [batch, len, heads, head_dim]
};

// Backward of transformer_block. Accumulates dWo and FFN grads into dw.
template <typename T>
BlockBackward<T> transformer_block_backward(const Tensor<T>& x, const Tensor<T>& attn_out,
                                            const Tensor<T>& y, const LayerWeights<T>& w,
                                            const Tensor<T>& upstream, LayerWeights<T>& dw) {
  expect_shape(upstream, x.shape(), "layer upstream gradient");
  auto ffn = ffn_block_backward(y, w.ffn, upstream);
  add_into(dw.ffn, ffn.grads);
  auto dy = std::move(ffn.dx);
  add_into(dy, upstream);
  accumulate_outer(dw.wo, attn_out.reshaped(x.shape()), dy);
  auto d_attn = matmul_last_transposed(dy, w.wo).reshaped(attn_out.shape());
  return {std::move(dy), std::move(d_attn)};
}

}  // namespace ringattn
