// SPDX-License-Identifier: Apache-2.0
//
// One PASS/FAIL line per acceptance criterion. Usage:
//   acceptance <path-to-ringattn-cli>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "oracles/flops_oracle_values.hpp"
#include "ringattn/ringattn.hpp"

using namespace ringattn;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "[PASS]" : "[FAIL]") << " AC" << id << " " << what << ": " << detail
            << std::endl;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string run_command(const std::string& cmd, int& status) {
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  if (!pipe) {
    status = -1;
    return {};
  }
  std::string out;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe.get())) out += buf.data();
  status = pclose(pipe.release());
  return out;
}

// Printed capacity table: label -> (minimal block, minimal sequence) in 1e3.
const std::map<std::string, std::pair<double, double>> kPublishedTable = {
    {"A100 NVLink", {1.0, 6.2}}, {"A100 InfiniBand", {24.5, 149.5}}, {"TPU v3", {1.1, 6.6}},
    {"TPU v4", {1.0, 6.2}},      {"TPU v5e", {1.1, 6.3}},
};

void check_table(const std::string& cli) {
  int status = 0;
  const std::string out = run_command("\"" + cli + "\" plan --catalog", status);
  if (status != 0) {
    report(6, false, "capacity table", "plan --catalog exited with status " + std::to_string(status));
    return;
  }
  std::istringstream in(out);
  std::string line;
  std::getline(in, line);  // header
  std::size_t matched = 0;
  double worst = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::istringstream ls(line);
    for (std::string col; std::getline(ls, col, '\t');) cols.push_back(col);
    if (cols.size() < 6) continue;
    const auto it = kPublishedTable.find(cols[0]);
    if (it == kPublishedTable.end()) continue;
    const double c = std::stod(cols[4]) / 1e3, s = std::stod(cols[5]) / 1e3;
    worst = std::max({worst, std::abs(c - it->second.first), std::abs(s - it->second.second)});
    ++matched;
  }
  report(6, matched == kPublishedTable.size() && worst <= 0.5, "capacity table",
         std::to_string(matched) + "/5 rows, max deviation " + std::to_string(worst) + "e3");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <ringattn-cli>\n";
    return 2;
  }
  const TestConfigSampler sampler(kDefaultSeed);

  // Shared randomized suite.
  const auto t0 = std::chrono::steady_clock::now();
  EquivalenceOptions eo;
  eo.trials = 100;
  const auto s64 = run_equivalence_suite<double>(sampler, eo);
  eo.check_modes = false;
  const auto s32 = run_equivalence_suite<float>(sampler, eo);
  const double forward_seconds = seconds_since(t0);

  {
    std::ostringstream hosts;
    for (const auto& [h, n] : s64.hosts_seen) hosts << h << ":" << n << " ";
    report(1,
           s64.trials >= 100 && s64.max_forward_error <= 1e-12 && s32.max_forward_error <= 1e-4 &&
               s64.hosts_seen.size() == 4 && s64.bias_seen.size() == 3 && forward_seconds < 60,
           "forward oracle equivalence",
           std::to_string(s64.trials) + " configs, f64 " + sci(s64.max_forward_error) + ", f32 " +
               sci(s32.max_forward_error) + ", hosts {" + hosts.str() + "}, " +
               std::to_string(forward_seconds) + " s");
  }

  {
    const auto g = run_gradient_suite(sampler, GradientOptions{20});
    report(2, g.configs >= 20 && g.max_attention_error <= 1e-6 && g.max_layer_error <= 1e-6,
           "gradients vs finite differences",
           std::to_string(g.configs) + " configs, " + std::to_string(g.components) +
               " components, attention rel " + sci(g.max_attention_error) + ", layer rel " +
               sci(g.max_layer_error));
  }

  report(3, s64.trials >= 20 && s64.max_permutation_error <= 1e-12, "permutation invariance",
         std::to_string(s64.trials) + " configs, max change " + sci(s64.max_permutation_error));

  {
    const auto rows = run_scaling_suite(16, {1, 2, 4, 8}, kDefaultSeed);
    bool ok = rows.size() == 4;
    std::ostringstream d;
    for (const auto& r : rows) {
      ok = ok && r.seq_len == 16 * r.hosts && r.max_error <= 1e-12 &&
           (r.hosts == 1 ? r.peak_blocks <= 4 : r.peak_blocks == 6);
      d << "N=" << r.hosts << " s=" << r.seq_len << " peak=" << r.peak_blocks << "; ";
    }
    report(4, ok, "ring schedule and linear scaling", d.str());
  }

  report(5, s64.mode_checks >= s64.trials && s64.mode_mismatches == 0, "mode equivalence",
         std::to_string(s64.mode_checks) + " forward+backward comparisons, " +
             std::to_string(s64.mode_mismatches) + " mismatches");

  check_table(argv[1]);

  {
    // Unit-rate host with F/B = 1024.
    const HardwareSpec hw{"unit", 1024.0, 1.0, 0};
    ModelConfig cfg;
    cfg.hidden = 8;
    cfg.heads = 1;
    cfg.head_dim = 8;
    cfg.hosts = 4;
    bool ok = true;
    for (std::size_t c : {64u, 256u, 512u, 1000u, 1023u, 1024u, 1025u, 2048u, 4096u}) {
      cfg.block_len = c;
      const auto t = simulate_timing(cfg, hw);
      ok = ok && ((t.overhead_fraction == 0.0) == (c >= 1024));
    }
    cfg.block_len = 512;
    const double half = simulate_timing(cfg, hw).overhead_fraction;
    report(7, ok && half == 1.0, "overlap boundary",
           "zero overhead iff c >= F/B over 9 block sizes; overhead at F/(2B) = " +
               std::to_string(half));
  }

  {
    double worst = 0;
    for (const auto& c : oracle::kSequenceCases) {
      ModelConfig m;
      m.batch = c.batch;
      m.seq_len = c.seq_len;
      m.hidden = c.hidden;
      m.layers = c.layers;
      worst = std::max(worst, std::abs(flops_per_sequence(m) - c.flops) / c.flops);
    }
    for (const auto& c : oracle::kRatioCases) {
      worst = std::max(worst, std::abs(dataset_flops_ratio(c.hidden, c.from, c.to) - c.ratio) / c.ratio);
    }
    bool identity = true;
    for (double h : {1.0, 768.0, 12288.0})
      for (double s : {1.0, 4096.0, 10485760.0}) identity = identity && dataset_flops_ratio(h, s, s) == 1.0;
    const auto& v5e = find_hardware(default_hardware_catalog(), "TPU v5e");
    const auto ov = inference_overlap_check(v5e, 0.40);
    const bool example = ov.overlaps && std::round(ov.ratio * 10) / 10 == 2.4;
    report(8, worst <= 1e-12 && identity && example, "analytic formulas",
           "max rel deviation " + sci(worst) + ", ratio(h,s,s)==1 " + (identity ? "yes" : "no") +
               ", B/F_eff at MFU 0.40 = " + std::to_string(ov.ratio));
  }

  report(9, s64.causal_checks >= 20 && s64.causal_violations == 0, "causal independence",
         std::to_string(s64.causal_checks) + " causal configs, " +
             std::to_string(s64.causal_violations) + " violations");

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
