#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "coserve/time.hpp"

namespace coserve {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Online latency objectives. The effective TBT budget handed to the batch
// builder is tbt_slo * scale * (1 - safety_margin) minus the per-iteration
// instrumentation overhead; the TTFT objective used by the preemption
// monitor is ttft_slo * scale.
struct SloConfig {
  double ttft_slo_s = 1.5;
  double tbt_slo_s = 0.1;
  double scale = 1.0;
  double safety_margin = 0.05;

  void validate() const;
  double tbt_budget_ms() const {
    return tbt_slo_s * 1e3 * scale * (1.0 - safety_margin);
  }
  double ttft_budget_ms() const { return ttft_slo_s * 1e3 * scale; }
};

struct ClusterConfig {
  int64_t num_layers = 32;
  int64_t safepoint_interval_layers = 4;
  int64_t kv_bytes_per_token = 196608;  // 192 KiB
  int64_t gpu_kv_capacity = 64424509440;   // 60 GiB
  int64_t host_kv_capacity = 274877906944;  // 256 GiB
  double d2h_bandwidth = 38797312000.0;  // bytes/s
  double h2d_bandwidth = 38797312000.0;
  double safepoint_check_cost_us = 21.0;
  double gather_cost_us = 500.0;  // per transfer job, off the compute path
  int64_t tp_degree = 1;
  int64_t page_tokens = 16;
  int64_t max_batched_tokens = 8192;

  void validate() const;

  // Interior safepoints only; the iteration-end boundary is a natural stop.
  int64_t checks_per_iteration() const {
    return (num_layers - 1) / safepoint_interval_layers;
  }
  double check_overhead_ms() const {
    return checks_per_iteration() * safepoint_check_cost_us / 1e3;
  }
  int64_t pages_for_tokens(int64_t tokens) const {
    return (tokens + page_tokens - 1) / page_tokens;
  }
};

enum class PolicyKind {
  kConServe,
  kSarathiPreemptive,
  kNonPreemptive,
  kOnlineOnly,
};

const char* to_string(PolicyKind k);
PolicyKind policy_kind_from_string(const std::string& s);

struct SchedulerPolicy {
  PolicyKind kind = PolicyKind::kConServe;
  int64_t chunk_size = 2048;
  int64_t chunk_floor = 128;  // degenerate minimum online admission
  // Ablation switches; only meaningful for kConServe.
  bool layerwise_preemption = true;
  bool incremental_kv = true;

  void validate() const;
  bool is_conserve() const { return kind == PolicyKind::kConServe; }
  bool instrumented() const { return is_conserve() && layerwise_preemption; }
  bool incremental() const { return is_conserve() && incremental_kv; }
};

// Ground-truth iteration latency model:
//   latency_ms = (k1 + k3) * sum(P_i) + k2 * sum(P_i * (P_i + C_i))
//              + k4 * sum(P_i + C_i) + k5
// optionally scaled by multiplicative Gaussian noise with cv = noise_cv.
struct OracleParams {
  double k1 = 0.0;  // ms per compute token, linear compute
  double k2 = 0.0;  // ms per token^2, attention
  double k3 = 0.0;  // ms per compute token, collective communication
  double k4 = 0.0;  // ms per token, KV/weight memory traffic
  double k5 = 0.0;  // ms, constant per-iteration cost
  double noise_cv = 0.0;

  void validate() const;
};

struct OnlineWorkload {
  double rate = 2.0;  // req/s
  double cv = 0.5;
  int64_t input_tokens = 4096;
  int64_t output_tokens = 256;
  double duration_s = 60.0;
  std::string lengths_file;  // optional empirical (in, out) pairs
};

struct OfflineWorkload {
  int64_t backlog = 0;
  int64_t input_tokens = 4096;
  int64_t output_tokens = 256;
  bool replenish = true;
  std::string lengths_file;
};

struct WorkloadSpec {
  OnlineWorkload online;
  OfflineWorkload offline;
  std::string trace_path;  // replaces the synthetic online spec when set

  void validate() const;
};

struct RunConfig {
  ClusterConfig cluster;
  OracleParams oracle;
  SchedulerPolicy policy;
  SloConfig slo;
  WorkloadSpec workload;
  uint64_t seed = 1;
  double max_sim_time_s = 3600.0;
  bool audit = false;
  bool log_events = true;

  void validate() const;
};

RunConfig run_config_from_json_text(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json_text(const RunConfig& config);

OracleParams oracle_params_from_json_file(const std::string& path);

}  // namespace coserve
