// SPDX-License-Identifier: Apache-2.0
//
// ringattn: run verified ring-attention experiments, print capacity tables
// and produce machine-readable reports.
//
// Exit codes: 0 success, 1 a check failed, 2 bad config or arguments.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ringattn/ringattn.hpp"

namespace {

using namespace ringattn;

constexpr int kExitCheckFailed = 1;
constexpr int kExitBadInput = 2;

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_json_file(const std::string& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

double tolerance_for_bits(int bits) { return bits == 64 ? 1e-12 : 1e-4; }

// ---------------------------------------------------------------------------
// run / audit
// ---------------------------------------------------------------------------

struct RunOutcome {
  RingReport report;
  RunErrors errors;
  bool passed = true;
};

template <typename T>
RunOutcome run_experiment(const ExperimentConfig& cfg) {
  const TestConfig tc{cfg.batch, cfg.heads, cfg.head_dim, cfg.num_hosts, cfg.block_len(),
                      cfg.inner_chunk, cfg.bias_kind, cfg.seed};
  const auto in64 = make_attention_inputs(tc);
  const auto in = cast_inputs<T>(in64);
  RingOptions opt;
  opt.mode = cfg.mode;
  opt.chunks = {cfg.inner_chunk, cfg.inner_chunk};
  opt.seed = cfg.seed;
  opt.channel_timeout = std::chrono::milliseconds(cfg.timeout_ms);

  const auto q = partition_sequence(in.q, cfg.num_hosts, cfg.inner_chunk);
  const auto k = partition_sequence(in.k, cfg.num_hosts, cfg.inner_chunk);
  const auto v = partition_sequence(in.v, cfg.num_hosts, cfg.inner_chunk);
  auto fwd = ring_forward(q, k, v, in.bias, opt);

  const auto q64 = in.q.template cast<double>(), k64 = in.k.template cast<double>(),
             v64 = in.v.template cast<double>();
  const auto bias64 = in.bias.template cast<double>();
  RunOutcome out;
  out.report = fwd.report;
  out.errors.max_abs_error = max_abs_diff(concat_rows(fwd.outputs), dense_attention_oracle(q64, k64, v64, bias64));

  if (cfg.backward) {
    Rng rng(cfg.seed + 1);
    const auto g = random_tensor<T>(in.q.shape(), rng);
    auto back = ring_backward(split_rows(g, cfg.num_hosts), q, k, v, fwd.saved, in.bias, opt);
    out.report.backward_peak_blocks = back.report.backward_peak_blocks;
    out.report.messages += back.report.messages;
    const auto ref = dense_attention_backward(q64, k64, v64, g.template cast<double>(), bias64);
    out.errors.grad_max_abs_error = std::max({max_abs_diff(concat_rows(back.dq), ref.dq),
                                              max_abs_diff(concat_rows(back.dk), ref.dk),
                                              max_abs_diff(concat_rows(back.dv), ref.dv)});
  }

  // The same sequence through a full layer with seeded weights.
  Rng wrng(cfg.seed + 2);
  const auto x = random_tensor<T>({cfg.batch, cfg.seq_len, cfg.hidden}, wrng);
  const auto w = LayerWeights<T>::random(cfg.hidden, cfg.heads, wrng);
  auto layer = ring_layer_forward(split_rows(x, cfg.num_hosts), w, in.bias, opt);
  out.errors.layer_max_abs_error =
      max_abs_diff(concat_rows(layer.outputs),
                   dense_layer_forward(x.template cast<double>(), w.template cast<double>(), bias64));

  ModelConfig mc;
  mc.batch = cfg.batch;
  mc.seq_len = cfg.seq_len;
  mc.hidden = cfg.hidden;
  mc.heads = cfg.heads;
  mc.head_dim = cfg.head_dim;
  mc.block_len = cfg.block_len();
  mc.hosts = cfg.num_hosts;
  mc.element_bytes = sizeof(T);
  out.report.timing = simulate_timing(mc, find_hardware(default_hardware_catalog(), cfg.hardware));

  // Layer outputs pass through two residual paths and the FFN, so they get
  // a slightly looser bound than raw attention.
  const double tol = tolerance_for_bits(cfg.element_bits);
  out.passed = *out.errors.max_abs_error <= tol && *out.errors.layer_max_abs_error <= 10 * tol &&
               (!out.errors.grad_max_abs_error || *out.errors.grad_max_abs_error <= 10 * tol) &&
               memory_audit(out.report).within_bound;
  return out;
}

RunOutcome run_experiment(const ExperimentConfig& cfg) {
  return cfg.element_bits == 32 ? run_experiment<float>(cfg) : run_experiment<double>(cfg);
}

void print_run_summary(const ExperimentConfig& cfg, const RunOutcome& r) {
  const auto mem = memory_audit(r.report);
  std::cout << "field\tvalue\n";
  std::cout << "seed\t" << cfg.seed << '\n';
  std::cout << "mode\t" << to_string(cfg.mode) << '\n';
  std::cout << "num_hosts\t" << cfg.num_hosts << '\n';
  std::cout << "degenerate_ring\t" << (r.report.degenerate_ring() ? "true" : "false") << '\n';
  std::cout << "block_len\t" << r.report.block_len << '\n';
  std::cout << "bias_kind\t" << to_string(cfg.bias_kind) << '\n';
  std::cout << "element_bits\t" << cfg.element_bits << '\n';
  std::cout << "rotations\t" << r.report.rotations << '\n';
  std::cout << "messages\t" << r.report.messages << '\n';
  std::cout << "max_abs_error\t" << fmt("%.3e", *r.errors.max_abs_error) << '\n';
  std::cout << "layer_max_abs_error\t" << fmt("%.3e", *r.errors.layer_max_abs_error) << '\n';
  if (r.errors.grad_max_abs_error) {
    std::cout << "grad_max_abs_error\t" << fmt("%.3e", *r.errors.grad_max_abs_error) << '\n';
  }
  std::cout << "peak_blocks\t" << mem.peak_blocks << '\n';
  std::cout << "peak_bytes\t" << fmt("%.0f", mem.peak_bytes) << '\n';
  if (r.report.timing) {
    std::cout << "step_compute_s\t" << fmt("%.6e", r.report.timing->compute_time) << '\n';
    std::cout << "step_transfer_s\t" << fmt("%.6e", r.report.timing->transfer_time) << '\n';
    std::cout << "overhead_fraction\t" << fmt("%.6f", r.report.timing->overhead_fraction) << '\n';
  }
  std::cout << "status\t" << (r.passed ? "pass" : "FAIL") << '\n';
}

int cmd_run(const std::string& path, std::optional<std::size_t> hosts,
            std::optional<std::string> mode, bool backward, bool json, const std::string& out) {
  ExperimentConfig cfg = load_experiment_config(path);
  if (hosts) cfg.num_hosts = *hosts;
  if (mode) cfg.mode = parse_ring_mode(*mode);
  if (backward) cfg.backward = true;
  cfg.validate();
  const auto r = run_experiment(cfg);
  const auto j = to_json(r.report, r.errors);
  if (json) {
    std::cout << j.dump(2) << '\n';
  } else {
    print_run_summary(cfg, r);
  }
  if (!out.empty()) write_json_file(out, j);
  return r.passed ? 0 : kExitCheckFailed;
}

int cmd_audit(const std::string& path) {
  const ExperimentConfig cfg = load_experiment_config(path);
  const auto r = run_experiment(cfg);
  const auto mem = memory_audit(r.report);
  std::cout << "host\tpeak_blocks\n";
  for (std::size_t i = 0; i < mem.per_host.size(); ++i) std::cout << i << '\t' << mem.per_host[i] << '\n';
  std::cout << "\npeak_blocks\t" << mem.peak_blocks << '\n';
  std::cout << "block_elements\t" << fmt("%.0f", mem.block_elements) << '\n';
  std::cout << "peak_elements\t" << fmt("%.0f", mem.peak_elements) << '\n';
  std::cout << "peak_bytes\t" << fmt("%.0f", mem.peak_bytes) << '\n';
  std::cout << "within_bound\t" << (mem.within_bound ? "true" : "false") << '\n';

  ModelConfig mc;
  mc.batch = cfg.batch;
  mc.seq_len = cfg.seq_len;
  mc.hidden = cfg.hidden;
  mc.heads = cfg.heads;
  mc.head_dim = cfg.head_dim;
  mc.block_len = cfg.block_len();
  mc.hosts = cfg.num_hosts;
  std::cout << "\nvariant\tself_attention\tfeedforward\ttotal\tconsistent\n";
  for (auto v : {ActivationVariant::vanilla, ActivationVariant::mem_eff_attn,
                 ActivationVariant::mem_eff_attn_ffn, ActivationVariant::ring}) {
    const auto a = activation_bytes(v, mc);
    std::cout << to_string(v) << '\t' << fmt("%.0f", a.self_attention) << '\t'
              << fmt("%.0f", a.feedforward) << '\t' << fmt("%.0f", a.total) << '\t'
              << (a.consistent ? "true" : "false") << '\n';
  }
  return mem.within_bound ? 0 : kExitCheckFailed;
}

// ---------------------------------------------------------------------------
// plan / flops
// ---------------------------------------------------------------------------

int cmd_plan(bool catalog, const std::string& catalog_file, std::optional<double> flops,
             std::optional<double> bandwidth, const std::string& out) {
  std::vector<HardwareSpec> rows;
  if (catalog || !catalog_file.empty()) {
    rows = catalog_file.empty() ? default_hardware_catalog() : load_hardware_catalog(catalog_file);
  } else if (flops && bandwidth) {
    rows.push_back({"custom", *flops, *bandwidth, 0});
  } else {
    throw ArgumentError("plan needs --catalog, --catalog-file or both --flops and --bandwidth");
  }
  std::cout << "label\tflops_tf\thbm_gb\tbandwidth_gbps\tmin_block\tmin_seq\tmin_block_k\tmin_seq_k\n";
  ordered_json j = ordered_json::array();
  for (const auto& hw : rows) {
    const double c = minimal_block_size(hw), s = minimal_sequence_length(hw);
    std::cout << hw.label << '\t' << fmt("%g", hw.flops / kTera) << '\t' << fmt("%g", hw.hbm / kGiga)
              << '\t' << fmt("%g", hw.bandwidth / kGiga) << '\t' << fmt("%.4f", c) << '\t'
              << fmt("%.4f", s) << '\t' << fmt("%.1f", c / 1e3) << '\t' << fmt("%.1f", s / 1e3)
              << '\n';
    j.push_back({{"label", hw.label},
                 {"flops", hw.flops},
                 {"bandwidth", hw.bandwidth},
                 {"hbm", hw.hbm},
                 {"min_block", c},
                 {"min_seq", s}});
  }
  if (!out.empty()) write_json_file(out, j);
  return 0;
}

int cmd_flops(double hidden, double s1, double s2, std::size_t layers, std::size_t batch,
              const std::string& out) {
  ModelConfig a;
  a.hidden = static_cast<std::size_t>(hidden);
  a.layers = layers;
  a.batch = batch;
  a.seq_len = static_cast<std::size_t>(s1);
  ModelConfig b = a;
  b.seq_len = static_cast<std::size_t>(s2);
  const double f1 = flops_per_sequence(a), f2 = flops_per_sequence(b);
  const double ratio = dataset_flops_ratio(hidden, s1, s2);
  std::cout << "hidden\tfrom\tto\tflops_from\tflops_to\tsequence_ratio\tdataset_ratio\n";
  std::cout << fmt("%.0f", hidden) << '\t' << fmt("%.0f", s1) << '\t' << fmt("%.0f", s2) << '\t'
            << fmt("%.6e", f1) << '\t' << fmt("%.6e", f2) << '\t' << fmt("%.6f", f2 / f1) << '\t'
            << fmt("%.6f", ratio) << '\n';
  if (!out.empty()) {
    write_json_file(out, ordered_json{{"hidden", hidden},
                                      {"from", s1},
                                      {"to", s2},
                                      {"layers", layers},
                                      {"batch", batch},
                                      {"flops_from", f1},
                                      {"flops_to", f2},
                                      {"dataset_ratio", ratio}});
  }
  return 0;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct SuitePlan {
  std::size_t trials;
  std::size_t gradient_configs;
};

int cmd_verify(const std::string& suite, bool inject_fault, std::uint64_t seed) {
  SuitePlan plan{};
  if (suite == "small") {
    plan = {100, 20};
  } else if (suite == "full") {
    plan = {400, 40};
  } else {
    throw ArgumentError("unknown suite '" + suite + "' (small | full)");
  }
  const bool full = suite == "full";
  const TestConfigSampler sampler(seed);
  bool ok = true;
  auto line = [&](bool pass, const std::string& name, const std::string& detail) {
    ok = ok && pass;
    std::cout << (pass ? "PASS" : "FAIL") << '\t' << name << '\t' << detail << '\n';
  };

  EquivalenceOptions eo;
  eo.trials = plan.trials;
  eo.inject_fault = inject_fault;
  const auto s64 = run_equivalence_suite<double>(sampler, eo);
  eo.check_modes = false;
  const auto s32 = run_equivalence_suite<float>(sampler, eo);

  line(s64.max_forward_error <= 1e-12, "forward_oracle_f64",
       "max_abs_error=" + fmt("%.3e", s64.max_forward_error) + " trials=" + std::to_string(s64.trials));
  line(s32.max_forward_error <= 1e-4, "forward_oracle_f32",
       "max_abs_error=" + fmt("%.3e", s32.max_forward_error) + " trials=" + std::to_string(s32.trials));
  line(s64.max_permutation_error <= 1e-12, "permutation_invariance",
       "max_abs_error=" + fmt("%.3e", s64.max_permutation_error));
  line(s64.causal_violations == 0, "causal_independence",
       "checks=" + std::to_string(s64.causal_checks) +
           " violations=" + std::to_string(s64.causal_violations));
  line(s64.mode_mismatches == 0, "mode_equivalence",
       "checks=" + std::to_string(s64.mode_checks) +
           " mismatches=" + std::to_string(s64.mode_mismatches));

  const auto g = run_gradient_suite(sampler, GradientOptions{plan.gradient_configs});
  line(g.max_attention_error <= 1e-6 && g.max_layer_error <= 1e-6, "gradients_fd",
       "configs=" + std::to_string(g.configs) + " components=" + std::to_string(g.components) +
           " attention_rel=" + fmt("%.3e", g.max_attention_error) +
           " layer_rel=" + fmt("%.3e", g.max_layer_error));

  const auto rows = run_scaling_suite(16, {1, 2, 4, 8}, seed);
  bool scaling_ok = true;
  std::string detail;
  for (const auto& r : rows) {
    scaling_ok = scaling_ok && (r.hosts == 1 ? r.peak_blocks <= 4 : r.peak_blocks == 6) &&
                 r.max_error <= 1e-12;
    detail += "N" + std::to_string(r.hosts) + ":s=" + std::to_string(r.seq_len) +
              ",peak=" + std::to_string(r.peak_blocks) + " ";
  }
  line(scaling_ok, "linear_scaling_residency", detail);

  if (full) {
    std::cout << "\ncounter\tvalue\n";
    for (const auto& [h, n] : s64.hosts_seen) std::cout << "hosts_" << h << '\t' << n << '\n';
    for (const auto& [b, n] : s64.bias_seen) std::cout << "bias_" << b << '\t' << n << '\n';
    std::cout << "causal_checks\t" << s64.causal_checks << '\n';
    std::cout << "mode_checks\t" << s64.mode_checks << '\n';
    std::cout << "gradient_components\t" << g.components << '\n';
  }
  return ok ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ring attention with blockwise transformers: verified runs and capacity planning"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run one ring experiment from a JSON config");
  std::string run_config, run_out;
  std::optional<std::size_t> run_hosts;
  std::optional<std::string> run_mode;
  bool run_backward = false, run_json = false;
  run->add_option("config", run_config, "Experiment config (JSON)")->required();
  run->add_option("--hosts", run_hosts, "Override num_hosts");
  run->add_option("--mode", run_mode, "Override mode (sequential | concurrent)");
  run->add_flag("--backward", run_backward, "Also run the backward pass");
  run->add_flag("--json", run_json, "Print the JSON report instead of the table");
  run->add_option("--out", run_out, "Write the JSON report to this file");

  auto* audit = app.add_subcommand("audit", "Memory residency audit for one config");
  std::string audit_config;
  audit->add_option("config", audit_config, "Experiment config (JSON)")->required();

  auto* plan = app.add_subcommand("plan", "Minimal block size and sequence length per host");
  bool plan_catalog = false;
  std::string plan_catalog_file, plan_out;
  std::optional<double> plan_flops, plan_bw;
  plan->add_flag("--catalog", plan_catalog, "Use the built-in hardware catalog");
  plan->add_option("--catalog-file", plan_catalog_file, "Hardware catalog (JSON)");
  plan->add_option("--flops", plan_flops, "FLOP/s per host");
  plan->add_option("--bandwidth", plan_bw, "Bytes/s between neighbouring hosts");
  plan->add_option("--out", plan_out, "Write the table as JSON");

  auto* flops = app.add_subcommand("flops", "Training FLOPs growth between context lengths");
  double f_hidden = 0, f_from = 0, f_to = 0;
  std::size_t f_layers = 1, f_batch = 1;
  std::string f_out;
  flops->add_option("--hidden", f_hidden, "Model hidden size")->required();
  flops->add_option("--from", f_from, "Old context length")->required();
  flops->add_option("--to", f_to, "New context length")->required();
  flops->add_option("--layers", f_layers, "Number of layers");
  flops->add_option("--batch", f_batch, "Batch size");
  flops->add_option("--out", f_out, "Write the row as JSON");

  auto* verify = app.add_subcommand("verify", "Run the property suites against the oracles");
  std::string v_suite = "small";
  bool v_fault = false;
  std::optional<std::uint64_t> v_seed;
  verify->add_option("--suite", v_suite, "small | full");
  verify->add_flag("--inject-fault", v_fault, "Perturb ring outputs to exercise the failure path");
  verify->add_option("--seed", v_seed, "Sampler seed (default: $RINGATTN_SEED or 42)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitBadInput;
  }

  try {
    if (*run) return cmd_run(run_config, run_hosts, run_mode, run_backward, run_json, run_out);
    if (*audit) return cmd_audit(audit_config);
    if (*plan) return cmd_plan(plan_catalog, plan_catalog_file, plan_flops, plan_bw, plan_out);
    if (*flops) return cmd_flops(f_hidden, f_from, f_to, f_layers, f_batch, f_out);
    if (*verify) return cmd_verify(v_suite, v_fault, v_seed ? *v_seed : default_seed());
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
  return 0;
}
