// SPDX-License-Identifier: Apache-2.0
//
// Analytic capacity planning: activation sizes per layer, the minimal block
// and sequence length that hide key/value transfer behind compute, training
// FLOPs scaling and the decode-time overlap condition.
//
// Units: FLOP/s and bytes/s throughout (1 TF = 1e12, 1 GB = 1e9).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ringattn/tensor.hpp"

namespace ringattn {

inline constexpr double kTera = 1e12;
inline constexpr double kGiga = 1e9;

struct HardwareSpec {
  std::string label;
  double flops = 0;      // FLOP/s per host
  double bandwidth = 0;  // bytes/s, unidirectional between neighbours
  double hbm = 0;        // bytes per host, 0 when unknown

  void validate() const {
    if (!(flops > 0) || !(bandwidth > 0) || !(hbm >= 0)) {
      throw ArgumentError("hardware spec '" + label + "' needs positive flops and bandwidth");
    }
  }
};

// The five hosts of the reference capacity table.
inline std::vector<HardwareSpec> default_hardware_catalog() {
  return {
      {"A100 NVLink", 312 * kTera, 300 * kGiga, 80 * kGiga},
      {"A100 InfiniBand", 312 * kTera, 12.5 * kGiga, 80 * kGiga},
      {"TPU v3", 123 * kTera, 112 * kGiga, 16 * kGiga},
      {"TPU v4", 275 * kTera, 268 * kGiga, 32 * kGiga},
      {"TPU v5e", 196 * kTera, 186 * kGiga, 16 * kGiga},
  };
}

inline const HardwareSpec& find_hardware(const std::vector<HardwareSpec>& catalog,
                                         const std::string& label) {
  for (const auto& hw : catalog)
    if (hw.label == label) return hw;
  throw ArgumentError("unknown hardware '" + label + "'");
}

struct ModelConfig {
  std::size_t batch = 1;
  std::size_t seq_len = 1;
  std::size_t hidden = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  std::size_t block_len = 1;
  std::size_t hosts = 1;
  std::size_t layers = 1;
  std::size_t element_bytes = 2;

  void validate() const {
    if (!batch || !seq_len || !hidden || !heads || !head_dim || !block_len || !hosts || !layers ||
        !element_bytes) {
      throw ArgumentError("model config dimensions must be positive");
    }
    if (hidden != heads * head_dim) throw ArgumentError("hidden must equal heads * head_dim");
    if (hosts > 1 && seq_len != hosts * block_len) {
      throw ArgumentError("distributed config needs seq_len == hosts * block_len");
    }
  }
};

// c >= F / B: FLOP/s over bytes/s.
inline double minimal_block_size(const HardwareSpec& hw) {
  hw.validate();
  return hw.flops / hw.bandwidth;
}

// s = 6c.
inline double minimal_sequence_length(const HardwareSpec& hw) {
  return 6.0 * minimal_block_size(hw);
}

// ---------------------------------------------------------------------------
// Activation sizes
// ---------------------------------------------------------------------------

enum class ActivationVariant { vanilla, mem_eff_attn, mem_eff_attn_ffn, ring };

inline const char* to_string(ActivationVariant v) {
  switch (v) {
    case ActivationVariant::vanilla: return "vanilla";
    case ActivationVariant::mem_eff_attn: return "mem_eff_attn";
    case ActivationVariant::mem_eff_attn_ffn: return "mem_eff_attn_ffn";
    case ActivationVariant::ring: return "ring";
  }
  return "?";
}

inline ActivationVariant parse_activation_variant(const std::string& name) {
  for (auto v : {ActivationVariant::vanilla, ActivationVariant::mem_eff_attn,
                 ActivationVariant::mem_eff_attn_ffn, ActivationVariant::ring}) {
    if (name == to_string(v)) return v;
  }
  throw ArgumentError("unknown activation variant '" + name + "'");
}

// Maximum activation per layer in table units (the published cells, which
// fold a 2-byte element into the coefficient). `consistent` is false when
// the published total differs from max(self_attention, feedforward).
struct ActivationSizes {
  double self_attention = 0;
  double feedforward = 0;
  double total = 0;
  bool consistent = true;
};

inline ActivationSizes activation_bytes(ActivationVariant variant, const ModelConfig& cfg) {
  const double b = static_cast<double>(cfg.batch), s = static_cast<double>(cfg.seq_len),
               h = static_cast<double>(cfg.hidden), n = static_cast<double>(cfg.heads),
               c = static_cast<double>(cfg.block_len);
  ActivationSizes a;
  switch (variant) {
    case ActivationVariant::vanilla:
      a = {2 * b * n * s * s, 8 * b * s * h, 2 * b * h * s * s};
      break;
    case ActivationVariant::mem_eff_attn:
      a = {2 * b * s * h + 4 * b * c * h, 8 * b * s * h, 8 * b * s * h};
      break;
    case ActivationVariant::mem_eff_attn_ffn:
      a = {2 * b * s * h, 2 * b * s * h, 2 * b * s * h};
      break;
    case ActivationVariant::ring:
      a = {6 * b * c * h, 2 * b * c * h, 6 * b * c * h};
      break;
  }
  a.consistent = a.total == std::max(a.self_attention, a.feedforward);
  return a;
}

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

// (24 b s h^2 + 4 b s^2 h) * layers.
inline double flops_per_sequence(const ModelConfig& cfg) {
  const double b = static_cast<double>(cfg.batch), s = static_cast<double>(cfg.seq_len),
               h = static_cast<double>(cfg.hidden), n = static_cast<double>(cfg.layers);
  return (24 * b * s * h * h + 4 * b * s * s * h) * n;
}

// Per-dataset FLOPs growth when the context goes from s1 to s2 tokens.
inline double dataset_flops_ratio(double hidden, double s1, double s2) {
  if (!(hidden > 0) || !(s1 > 0) || !(s2 > 0)) {
    throw ArgumentError("dataset_flops_ratio needs positive inputs");
  }
  return (6 * hidden + s2) / (6 * hidden + s1);
}

// ---------------------------------------------------------------------------
// Decode-time overlap
// ---------------------------------------------------------------------------

struct OverlapCheck {
  bool overlaps = false;
  double ratio = 0;   // (B in GB/s) / (effective F in TFLOP/s)
  double margin = 0;  // ratio - 2
};

// Circulating a KV cache hides under compute when B/F_eff >= 2, with B in
// GB/s and F_eff = F * mfu in TFLOP/s.
inline OverlapCheck inference_overlap_check(const HardwareSpec& hw, double mfu) {
  if (!(hw.flops > 0) || !(hw.bandwidth > 0) || !(mfu > 0) || mfu > 1) {
    throw ArgumentError("inference_overlap_check needs positive rates and mfu in (0, 1]");
  }
  const double ratio = (hw.bandwidth / kGiga) / (hw.flops * mfu / kTera);
  return {ratio >= 2.0, ratio, ratio - 2.0};
}

// Exploration aid only: (HBM - parameter bytes) / activation bytes per token.
// Ignores optimizer state, sharding and runtime buffers.
inline double rough_max_context_tokens(const HardwareSpec& hw, double parameter_bytes,
                                       double activation_bytes_per_token) {
  if (!(activation_bytes_per_token > 0)) throw ArgumentError("per-token bytes must be positive");
  const double free = hw.hbm - parameter_bytes;
  return free > 0 ? free / activation_bytes_per_token : 0.0;
}

}  // namespace ringattn
