#include "coserve/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "coserve/request.hpp"

namespace coserve {

using nlohmann::json;

const char* to_string(RequestClass c) {
  return c == RequestClass::kOnline ? "online" : "offline";
}

const char* to_string(RequestState s) {
  switch (s) {
    case RequestState::kQueued: return "queued";
    case RequestState::kRunning: return "running";
    case RequestState::kPaused: return "paused";
    case RequestState::kFinished: return "finished";
  }
  return "?";
}

const char* to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::kConServe: return "conserve";
    case PolicyKind::kSarathiPreemptive: return "sarathi_preemptive";
    case PolicyKind::kNonPreemptive: return "non_preemptive";
    case PolicyKind::kOnlineOnly: return "online_only";
  }
  return "?";
}

PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "conserve") return PolicyKind::kConServe;
  if (s == "sarathi_preemptive") return PolicyKind::kSarathiPreemptive;
  if (s == "non_preemptive") return PolicyKind::kNonPreemptive;
  if (s == "online_only") return PolicyKind::kOnlineOnly;
  throw ConfigError("unknown policy kind: " + s);
}

void SloConfig::validate() const {
  if (ttft_slo_s <= 0 || tbt_slo_s <= 0 || scale <= 0) {
    throw ConfigError("SLO values and scale must be strictly positive");
  }
  if (safety_margin < 0 || safety_margin >= 1) {
    throw ConfigError("safety_margin must lie in [0, 1)");
  }
}

void ClusterConfig::validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (safepoint_interval_layers < 1) {
    throw ConfigError("safepoint_interval_layers must be >= 1");
  }
  if (page_tokens != 16) throw ConfigError("page_tokens is fixed at 16");
  if (kv_bytes_per_token < 1) throw ConfigError("kv_bytes_per_token must be positive");
  if (gpu_kv_capacity < 1 || host_kv_capacity < 1) {
    throw ConfigError("KV capacities must be positive");
  }
  if (d2h_bandwidth <= 0 || h2d_bandwidth <= 0) {
    throw ConfigError("transfer bandwidths must be positive");
  }
  if (safepoint_check_cost_us < 0 || gather_cost_us < 0) {
    throw ConfigError("instrumentation costs must be non-negative");
  }
  if (tp_degree < 1) throw ConfigError("tp_degree must be >= 1");
  if (max_batched_tokens < 1) throw ConfigError("max_batched_tokens must be >= 1");
}

void SchedulerPolicy::validate() const {
  if (chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
  if (chunk_floor < 1) throw ConfigError("chunk_floor must be >= 1");
}

void OracleParams::validate() const {
  if (k1 < 0 || k2 < 0 || k3 < 0 || k4 < 0 || k5 < 0) {
    throw ConfigError("oracle coefficients must be non-negative");
  }
  if (k1 == 0 && k2 == 0 && k4 == 0 && k5 == 0) {
    throw ConfigError("at least one of k1, k2, k4, k5 must be positive");
  }
  if (noise_cv < 0) throw ConfigError("noise_cv must be non-negative");
}

void WorkloadSpec::validate() const {
  if (!trace_path.empty()) return;
  if (online.rate <= 0 || online.cv <= 0 || online.duration_s <= 0) {
    throw ConfigError("online rate, cv and duration must be positive");
  }
  if (online.input_tokens < 1 || online.output_tokens < 1) {
    throw ConfigError("online token counts must be >= 1");
  }
  if (offline.backlog < 0) throw ConfigError("offline backlog must be >= 0");
  if (offline.backlog > 0 &&
      (offline.input_tokens < 1 || offline.output_tokens < 1)) {
    throw ConfigError("offline token counts must be >= 1");
  }
}

void RunConfig::validate() const {
  cluster.validate();
  oracle.validate();
  policy.validate();
  slo.validate();
  workload.validate();
  if (max_sim_time_s <= 0) throw ConfigError("max_sim_time_s must be positive");
}

namespace {

template <typename T>
void read_if(const json& obj, const char* key, T* out) {
  if (obj.contains(key)) *out = obj.at(key).get<T>();
}

OracleParams oracle_from_json(const json& obj) {
  OracleParams p;
  read_if(obj, "k1", &p.k1);
  read_if(obj, "k2", &p.k2);
  read_if(obj, "k3", &p.k3);
  read_if(obj, "k4", &p.k4);
  read_if(obj, "k5", &p.k5);
  read_if(obj, "noise_cv", &p.noise_cv);
  return p;
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig config;
  try {
    if (doc.contains("cluster")) {
      const json& c = doc["cluster"];
      read_if(c, "num_layers", &config.cluster.num_layers);
      read_if(c, "safepoint_interval_layers",
              &config.cluster.safepoint_interval_layers);
      read_if(c, "kv_bytes_per_token", &config.cluster.kv_bytes_per_token);
      read_if(c, "gpu_kv_capacity", &config.cluster.gpu_kv_capacity);
      read_if(c, "host_kv_capacity", &config.cluster.host_kv_capacity);
      read_if(c, "d2h_bandwidth", &config.cluster.d2h_bandwidth);
      read_if(c, "h2d_bandwidth", &config.cluster.h2d_bandwidth);
      read_if(c, "safepoint_check_cost_us",
              &config.cluster.safepoint_check_cost_us);
      read_if(c, "gather_cost_us", &config.cluster.gather_cost_us);
      read_if(c, "tp_degree", &config.cluster.tp_degree);
      read_if(c, "page_tokens", &config.cluster.page_tokens);
      read_if(c, "max_batched_tokens", &config.cluster.max_batched_tokens);
    }
    if (doc.contains("oracle")) {
      config.oracle = oracle_from_json(doc["oracle"]);
    }
    if (doc.contains("policy")) {
      const json& p = doc["policy"];
      if (p.contains("kind")) {
        config.policy.kind = policy_kind_from_string(p["kind"].get<std::string>());
      }
      read_if(p, "chunk_size", &config.policy.chunk_size);
      read_if(p, "chunk_floor", &config.policy.chunk_floor);
      read_if(p, "layerwise_preemption", &config.policy.layerwise_preemption);
      read_if(p, "incremental_kv", &config.policy.incremental_kv);
    }
    if (doc.contains("slo")) {
      const json& s = doc["slo"];
      read_if(s, "ttft_slo_s", &config.slo.ttft_slo_s);
      read_if(s, "tbt_slo_s", &config.slo.tbt_slo_s);
      read_if(s, "scale", &config.slo.scale);
      read_if(s, "safety_margin", &config.slo.safety_margin);
    }
    if (doc.contains("workload")) {
      const json& w = doc["workload"];
      read_if(w, "trace", &config.workload.trace_path);
      if (w.contains("online")) {
        const json& o = w["online"];
        read_if(o, "rate", &config.workload.online.rate);
        read_if(o, "cv", &config.workload.online.cv);
        read_if(o, "input_tokens", &config.workload.online.input_tokens);
        read_if(o, "output_tokens", &config.workload.online.output_tokens);
        read_if(o, "duration_s", &config.workload.online.duration_s);
        read_if(o, "lengths_file", &config.workload.online.lengths_file);
      }
      if (w.contains("offline")) {
        const json& o = w["offline"];
        read_if(o, "backlog", &config.workload.offline.backlog);
        read_if(o, "input_tokens", &config.workload.offline.input_tokens);
        read_if(o, "output_tokens", &config.workload.offline.output_tokens);
        read_if(o, "replenish", &config.workload.offline.replenish);
        read_if(o, "lengths_file", &config.workload.offline.lengths_file);
      }
    }
    read_if(doc, "seed", &config.seed);
    read_if(doc, "max_sim_time_s", &config.max_sim_time_s);
    read_if(doc, "audit", &config.audit);
    read_if(doc, "log_events", &config.log_events);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field has wrong type: ") + e.what());
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return run_config_from_json_text(buf.str());
}

std::string run_config_to_json_text(const RunConfig& config) {
  json doc;
  doc["cluster"] = {
      {"num_layers", config.cluster.num_layers},
      {"safepoint_interval_layers", config.cluster.safepoint_interval_layers},
      {"kv_bytes_per_token", config.cluster.kv_bytes_per_token},
      {"gpu_kv_capacity", config.cluster.gpu_kv_capacity},
      {"host_kv_capacity", config.cluster.host_kv_capacity},
      {"d2h_bandwidth", config.cluster.d2h_bandwidth},
      {"h2d_bandwidth", config.cluster.h2d_bandwidth},
      {"safepoint_check_cost_us", config.cluster.safepoint_check_cost_us},
      {"gather_cost_us", config.cluster.gather_cost_us},
      {"tp_degree", config.cluster.tp_degree},
      {"page_tokens", config.cluster.page_tokens},
      {"max_batched_tokens", config.cluster.max_batched_tokens}};
  doc["oracle"] = {{"k1", config.oracle.k1}, {"k2", config.oracle.k2},
                   {"k3", config.oracle.k3}, {"k4", config.oracle.k4},
                   {"k5", config.oracle.k5},
                   {"noise_cv", config.oracle.noise_cv}};
  doc["policy"] = {{"kind", to_string(config.policy.kind)},
                   {"chunk_size", config.policy.chunk_size},
                   {"chunk_floor", config.policy.chunk_floor},
                   {"layerwise_preemption", config.policy.layerwise_preemption},
                   {"incremental_kv", config.policy.incremental_kv}};
  doc["slo"] = {{"ttft_slo_s", config.slo.ttft_slo_s},
                {"tbt_slo_s", config.slo.tbt_slo_s},
                {"scale", config.slo.scale},
                {"safety_margin", config.slo.safety_margin}};
  json workload;
  if (!config.workload.trace_path.empty()) {
    workload["trace"] = config.workload.trace_path;
  }
  workload["online"] = {{"rate", config.workload.online.rate},
                        {"cv", config.workload.online.cv},
                        {"input_tokens", config.workload.online.input_tokens},
                        {"output_tokens", config.workload.online.output_tokens},
                        {"duration_s", config.workload.online.duration_s}};
  if (!config.workload.online.lengths_file.empty()) {
    workload["online"]["lengths_file"] = config.workload.online.lengths_file;
  }
  workload["offline"] = {
      {"backlog", config.workload.offline.backlog},
      {"input_tokens", config.workload.offline.input_tokens},
      {"output_tokens", config.workload.offline.output_tokens},
      {"replenish", config.workload.offline.replenish}};
  if (!config.workload.offline.lengths_file.empty()) {
    workload["offline"]["lengths_file"] = config.workload.offline.lengths_file;
  }
  doc["workload"] = workload;
  doc["seed"] = config.seed;
  doc["max_sim_time_s"] = config.max_sim_time_s;
  doc["audit"] = config.audit;
  doc["log_events"] = config.log_events;
  return doc.dump(2) + "\n";
}

OracleParams oracle_params_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  const json& obj = doc.contains("oracle") ? doc["oracle"] : doc;
  OracleParams params = oracle_from_json(obj);
  params.validate();
  return params;
}

}  // namespace coserve
