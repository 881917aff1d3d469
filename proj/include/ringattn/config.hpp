// SPDX-License-Identifier: Apache-2.0
//
// JSON experiment configs, RingReport serialisation and the hardware
// catalog file.
//
// Experiment config fields:
//   batch, seq_len, heads, head_dim, hidden, num_hosts, inner_chunk,
//   bias_kind ("none" | "causal" | "dense"), element_bits (32 | 64), seed,
//   mode ("sequential" | "concurrent")
// Optional: backward (bool), hardware (catalog label), timeout_ms.

#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ringattn/attention.hpp"
#include "ringattn/perf_model.hpp"
#include "ringattn/ring.hpp"
#include "ringattn/tensor.hpp"

namespace ringattn {

using ordered_json = nlohmann::ordered_json;

inline constexpr const char* kSeedEnvVar = "RINGATTN_SEED";
inline constexpr std::uint64_t kDefaultSeed = 42;

inline std::uint64_t default_seed() {
  if (const char* env = std::getenv(kSeedEnvVar)) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string(kSeedEnvVar) + " is not an unsigned integer: " + env);
    }
  }
  return kDefaultSeed;
}

struct ExperimentConfig {
  std::size_t batch = 1;
  std::size_t seq_len = 64;
  std::size_t heads = 2;
  std::size_t head_dim = 8;
  std::size_t hidden = 16;
  std::size_t num_hosts = 4;
  std::size_t inner_chunk = 0;
  BiasKind bias_kind = BiasKind::none;
  int element_bits = 64;
  std::uint64_t seed = kDefaultSeed;
  RingMode mode = RingMode::sequential;
  bool backward = false;
  std::string hardware = "TPU v4";
  std::size_t timeout_ms = 5000;

  std::size_t block_len() const { return seq_len / num_hosts; }

  void validate() const {
    if (!batch || !seq_len || !heads || !head_dim || !hidden || !num_hosts) {
      throw ConfigError("batch, seq_len, heads, head_dim, hidden and num_hosts must be >= 1");
    }
    if (hidden != heads * head_dim) {
      throw ConfigError("hidden (" + std::to_string(hidden) + ") must equal heads * head_dim (" +
                        std::to_string(heads * head_dim) + ")");
    }
    if (seq_len % num_hosts != 0) {
      throw ConfigError("seq_len " + std::to_string(seq_len) + " is not divisible by num_hosts " +
                        std::to_string(num_hosts));
    }
    if (inner_chunk != 0 && block_len() % inner_chunk != 0) {
      throw ConfigError("inner_chunk " + std::to_string(inner_chunk) +
                        " does not divide the host block length " + std::to_string(block_len()));
    }
    if (element_bits != 32 && element_bits != 64) throw ConfigError("element_bits must be 32 or 64");
    if (timeout_ms == 0) throw ConfigError("timeout_ms must be positive");
  }
};

inline BiasKind parse_bias_kind(const std::string& s) {
  if (s == "none") return BiasKind::none;
  if (s == "causal") return BiasKind::causal;
  if (s == "dense") return BiasKind::dense;
  throw ConfigError("unknown bias_kind '" + s + "'");
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");

  static const std::set<std::string> known{
      "batch",        "seq_len", "heads", "head_dim", "hidden",   "num_hosts",  "inner_chunk",
      "bias_kind",    "element_bits", "seed", "mode", "backward", "hardware", "timeout_ms"};
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) throw ConfigError("unknown config field '" + item.key() + "'");
  }

  ExperimentConfig c;
  c.seed = default_seed();
  try {
    auto size = [&](const char* key, std::size_t& out) {
      if (!j.contains(key)) return;
      const auto& v = j.at(key);
      if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError(std::string("field '") + key + "' must be a non-negative integer");
      }
      out = v.get<std::size_t>();
    };
    size("batch", c.batch);
    size("seq_len", c.seq_len);
    size("heads", c.heads);
    size("head_dim", c.head_dim);
    size("hidden", c.hidden);
    size("num_hosts", c.num_hosts);
    size("inner_chunk", c.inner_chunk);
    size("timeout_ms", c.timeout_ms);
    if (j.contains("element_bits")) {
      std::size_t bits = 0;
      size("element_bits", bits);
      c.element_bits = static_cast<int>(bits);
    }
    if (j.contains("seed")) {
      std::size_t seed = 0;
      size("seed", seed);
      c.seed = seed;
    }
    if (j.contains("bias_kind")) c.bias_kind = parse_bias_kind(j.at("bias_kind").get<std::string>());
    if (j.contains("mode")) c.mode = parse_ring_mode(j.at("mode").get<std::string>());
    if (j.contains("backward")) c.backward = j.at("backward").get<bool>();
    if (j.contains("hardware")) c.hardware = j.at("hardware").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad field type: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config(read_text_file(path));
}

inline ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["batch"] = c.batch;
  j["seq_len"] = c.seq_len;
  j["heads"] = c.heads;
  j["head_dim"] = c.head_dim;
  j["hidden"] = c.hidden;
  j["num_hosts"] = c.num_hosts;
  j["inner_chunk"] = c.inner_chunk;
  j["bias_kind"] = to_string(c.bias_kind);
  j["element_bits"] = c.element_bits;
  j["seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  j["backward"] = c.backward;
  j["hardware"] = c.hardware;
  j["timeout_ms"] = c.timeout_ms;
  return j;
}

inline ordered_json to_json(const TimingReport& t) {
  ordered_json j;
  j["compute_time"] = t.compute_time;
  j["transfer_time"] = t.transfer_time;
  j["step_latency"] = t.step_latency;
  j["overhead_fraction"] = t.overhead_fraction;
  j["total_time"] = t.total_time;
  j["compute_only_time"] = t.compute_only_time;
  ordered_json steps = ordered_json::array();
  for (const auto& s : t.steps) {
    steps.push_back({{"step", s.step},
                     {"compute_time", s.compute_time},
                     {"transfer_time", s.transfer_time},
                     {"latency", s.latency}});
  }
  j["steps"] = std::move(steps);
  return j;
}

inline ordered_json to_json(const ResidencySummary& m) {
  ordered_json j;
  j["peak_blocks"] = m.peak_blocks;
  j["per_host"] = m.per_host;
  j["block_elements"] = m.block_elements;
  j["peak_elements"] = m.peak_elements;
  j["peak_bytes"] = m.peak_bytes;
  j["within_bound"] = m.within_bound;
  return j;
}

// Error figures filled in by whoever compared the run against an oracle.
struct RunErrors {
  std::optional<double> max_abs_error;
  std::optional<double> layer_max_abs_error;
  std::optional<double> grad_max_abs_error;
};

inline ordered_json to_json(const RingReport& r, const RunErrors& errors = {}) {
  ordered_json j;
  j["seed"] = r.seed;
  j["mode"] = to_string(r.mode);
  j["num_hosts"] = r.num_hosts;
  j["degenerate_ring"] = r.degenerate_ring();
  j["batch"] = r.batch;
  j["block_len"] = r.block_len;
  j["hidden"] = r.hidden;
  j["element_bytes"] = r.element_bytes;
  j["compute_steps"] = r.compute_steps;
  j["rotations"] = r.rotations;
  j["messages"] = r.messages;
  j["visit_order"] = r.visit_order;
  j["forward_peak_blocks"] = r.forward_peak_blocks;
  j["backward_peak_blocks"] = r.backward_peak_blocks;
  j["memory"] = to_json(memory_audit(r));
  j["timing"] = r.timing ? to_json(*r.timing) : ordered_json(nullptr);
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  j["max_abs_error"] = opt(errors.max_abs_error);
  j["layer_max_abs_error"] = opt(errors.layer_max_abs_error);
  j["grad_max_abs_error"] = opt(errors.grad_max_abs_error);
  return j;
}

// ---------------------------------------------------------------------------
// Hardware catalog
// ---------------------------------------------------------------------------
//
// {"hosts": [{"label": "...", "flops_tf": 312, "hbm_gb": 80,
//             "bandwidth_gbps": 300}, ...]}

inline ordered_json catalog_to_json(const std::vector<HardwareSpec>& catalog) {
  ordered_json hosts = ordered_json::array();
  for (const auto& hw : catalog) {
    hosts.push_back({{"label", hw.label},
                     {"flops_tf", hw.flops / kTera},
                     {"hbm_gb", hw.hbm / kGiga},
                     {"bandwidth_gbps", hw.bandwidth / kGiga}});
  }
  return ordered_json{{"hosts", std::move(hosts)}};
}

inline std::vector<HardwareSpec> parse_hardware_catalog(const std::string& text) {
  std::vector<HardwareSpec> out;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& h : j.at("hosts")) {
      HardwareSpec hw{h.at("label").get<std::string>(), h.at("flops_tf").get<double>() * kTera,
                      h.at("bandwidth_gbps").get<double>() * kGiga,
                      h.value("hbm_gb", 0.0) * kGiga};
      hw.validate();
      out.push_back(std::move(hw));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad hardware catalog: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (out.empty()) throw ConfigError("hardware catalog has no hosts");
  return out;
}

inline std::vector<HardwareSpec> load_hardware_catalog(const std::string& path) {
  return parse_hardware_catalog(read_text_file(path));
}

}  // namespace ringattn
