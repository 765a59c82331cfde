#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "coserve/config.hpp"
#include "coserve/metrics.hpp"
#include "coserve/perf_model.hpp"
#include "coserve/sim_engine.hpp"
#include "coserve/workload.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitLivelock = 3;

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << content;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Solves the latency-model coefficients from two measured anchor points of
// a 2048-token chunk (fresh and against a long context), with the memory
// and constant terms chosen per preset.
json calibrate_preset(const std::string& preset) {
  json doc;
  if (preset == "8b") {
    const double chunk = 2048, ctx = 40960;
    const double fresh_ms = 51.0, deep_ms = 124.0;
    const double k4 = 7e-5, k5 = 3.5, k3 = 0.0;
    const double k2 = (deep_ms - fresh_ms - k4 * ctx) / (chunk * ctx);
    const double k1 =
        (fresh_ms - k2 * chunk * chunk - k4 * chunk - k5) / chunk - k3;
    doc["oracle"] = {{"k1", k1}, {"k2", k2}, {"k3", k3},
                     {"k4", k4}, {"k5", k5}, {"noise_cv", 0.0}};
    doc["cluster"] = {{"num_layers", 32},
                      {"safepoint_interval_layers", 4},
                      {"kv_bytes_per_token", 196608},
                      {"gpu_kv_capacity", 64424509440},
                      {"host_kv_capacity", 274877906944},
                      {"d2h_bandwidth", 38797312000.0},
                      {"h2d_bandwidth", 38797312000.0},
                      {"safepoint_check_cost_us", 21.0},
                      {"gather_cost_us", 500.0},
                      {"tp_degree", 1},
                      {"page_tokens", 16},
                      {"max_batched_tokens", 8192}};
    doc["notes"] = {
        "single-GPU 8B setup: 60 GiB KV pool, 37 GB/s checkpoint bandwidth",
        "anchors: 2048-token chunk costs 51 ms fresh and 124 ms against a "
        "40960-token context; k2 and k1 solved from those two equations "
        "with k4 and k5 fixed",
        "k1 and k3 are not separately identifiable from latency "
        "observations; k3=0 on a single GPU"};
  } else if (preset == "70b") {
    const double chunk = 2048, ctx = 16384;
    const int64_t layers = 84, interval = 4;
    const double check_us = 167.2;
    const int64_t checks = (layers - 1) / interval;
    // Reference batch lands at 262 ms including safepoint checks.
    const double target_total_ms = 262.0;
    const double uninstrumented_ms =
        target_total_ms - static_cast<double>(checks) * check_us / 1e3;
    const double k4 = 4e-4, k5 = 20.0, k2 = 4e-6;
    const double lin = (uninstrumented_ms - k2 * chunk * (chunk + ctx) -
                        k4 * (chunk + ctx) - k5) /
                       chunk;
    const double k3 = 0.2 * lin;  // collective-communication share under TP
    const double k1 = lin - k3;
    doc["oracle"] = {{"k1", k1}, {"k2", k2}, {"k3", k3},
                     {"k4", k4}, {"k5", k5}, {"noise_cv", 0.0}};
    doc["cluster"] = {{"num_layers", layers},
                      {"safepoint_interval_layers", interval},
                      {"kv_bytes_per_token", 196608},
                      {"gpu_kv_capacity", 193273528320},
                      {"host_kv_capacity", 1099511627776},
                      {"d2h_bandwidth", 138412032000.0},
                      {"h2d_bandwidth", 138412032000.0},
                      {"safepoint_check_cost_us", check_us},
                      {"gather_cost_us", 500.0},
                      {"tp_degree", 4},
                      {"page_tokens", 16},
                      {"max_batched_tokens", 8192}};
    doc["notes"] = {
        "4-way TP setup: 180 GiB KV pool, 132 GB/s aggregate checkpoint "
        "bandwidth, 167.2 us safepoints",
        "anchor: the reference 2048-token/16K-context batch takes 262 ms "
        "including safepoint checks; linear term solved from that with k2, "
        "k4, k5 fixed",
        "84 instrumented stages keep the worst-case drop wait "
        "(interval * per-layer + check) under 13 ms at this operating "
        "point"};
  } else {
    throw coserve::ConfigError("unknown preset: " + preset +
                               " (expected 8b or 70b)");
  }
  return doc;
}

void write_run_outputs(const std::string& out_dir, coserve::SimEngine& engine,
                       const coserve::MetricsReport& report) {
  fs::create_directories(out_dir);
  write_file(out_dir + "/metrics.json", report.to_json_text());
  write_file(out_dir + "/requests.csv",
             coserve::requests_csv(engine.requests(), "tbt_samples.csv"));
  write_file(out_dir + "/tbt_samples.csv",
             coserve::tbt_samples_csv(engine.requests()));
  write_file(out_dir + "/timeseries.csv",
             coserve::timeseries_csv(engine.requests(),
                                     engine.offline_commits(),
                                     coserve::sec_from_usec(engine.horizon())));
}

int cmd_profile(const std::string& model_config, const std::string& out,
                uint64_t seed) {
  const auto params = coserve::oracle_params_from_json_file(model_config);
  const auto samples =
      coserve::profile(params, coserve::default_profile_grid(), seed);
  write_file(out, coserve::profile_to_json_text(samples));
  std::cout << "profiled " << samples.size() << " grid points -> " << out
            << "\n";
  return kExitOk;
}

int cmd_fit(const std::string& samples_path, const std::string& out) {
  const auto samples =
      coserve::profile_from_json_text(read_file(samples_path));
  const auto coeffs = coserve::fit(samples);
  write_file(out, coserve::fit_result_to_json_text(samples, coeffs));
  std::cout << "a_lin=" << coeffs.a_lin << " a_quad=" << coeffs.a_quad
            << " a_mem=" << coeffs.a_mem << " a_const=" << coeffs.a_const
            << " -> " << out << "\n";
  return kExitOk;
}

int cmd_gen_trace(double rate, double cv, double duration, int64_t in_tokens,
                  int64_t out_tokens, uint64_t seed, const std::string& out,
                  const std::string& lengths_file, const std::string& cls) {
  coserve::OnlineWorkload spec;
  spec.rate = rate;
  spec.cv = cv;
  spec.duration_s = duration;
  spec.input_tokens = in_tokens;
  spec.output_tokens = out_tokens;
  spec.lengths_file = lengths_file;
  auto entries = coserve::generate_online_trace(spec, seed);
  if (cls == "offline") {
    for (auto& e : entries) e.cls = coserve::RequestClass::kOffline;
  }
  coserve::save_trace(entries, out);
  std::cout << entries.size() << " requests -> " << out << "\n";
  return kExitOk;
}

int cmd_run(const std::string& config_path, const std::string& out_dir) {
  const auto config = coserve::load_run_config(config_path);
  coserve::SimEngine engine(config);
  fs::create_directories(out_dir);
  std::ofstream events;
  if (config.log_events) {
    events.open(out_dir + "/events.jsonl");
    engine.set_event_sink(&events);
  }
  const auto report = engine.run();
  write_run_outputs(out_dir, engine, report);
  std::cout << report.to_json_text();
  return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& axis_str,
              const std::vector<double>& values, const std::string& out_dir,
              int jobs) {
  const auto config = coserve::load_run_config(config_path);
  const auto axis = coserve::sweep_axis_from_string(axis_str);
  const auto reports = coserve::sweep(config, axis, values, jobs);
  fs::create_directories(out_dir);
  json summary = json::array();
  for (size_t i = 0; i < values.size(); ++i) {
    json entry;
    entry["axis"] = axis_str;
    entry["value"] = values[i];
    entry["metrics"] = json::parse(reports[i].to_json_text());
    summary.push_back(entry);
  }
  write_file(out_dir + "/summary.json", summary.dump(2) + "\n");
  std::cout << reports.size() << " runs -> " << out_dir << "/summary.json\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic simulator for LLM online/offline co-serving"};
  app.require_subcommand(1);

  auto* profile_cmd =
      app.add_subcommand("profile", "Measure the latency oracle on a P x C grid");
  std::string model_config, out_path;
  uint64_t seed = 1;
  profile_cmd->add_option("--model-config", model_config)->required();
  profile_cmd->add_option("--out", out_path)->required();
  profile_cmd->add_option("--seed", seed);

  auto* fit_cmd = app.add_subcommand("fit", "Fit coefficients to profile samples");
  std::string samples_path, fit_out;
  fit_cmd->add_option("--samples", samples_path)->required();
  fit_cmd->add_option("--out", fit_out)->required();

  auto* trace_cmd = app.add_subcommand("gen-trace", "Generate a synthetic trace");
  double rate = 2.0, cv = 0.5, duration = 60.0;
  int64_t in_tokens = 4096, out_tokens = 256;
  uint64_t trace_seed = 1;
  std::string trace_out, lengths_file, trace_class = "online";
  trace_cmd->add_option("--rate", rate);
  trace_cmd->add_option("--cv", cv);
  trace_cmd->add_option("--duration", duration);
  trace_cmd->add_option("--in-tokens", in_tokens);
  trace_cmd->add_option("--out-tokens", out_tokens);
  trace_cmd->add_option("--seed", trace_seed);
  trace_cmd->add_option("--out", trace_out)->required();
  trace_cmd->add_option("--lengths-file", lengths_file);
  trace_cmd->add_option("--class", trace_class)
      ->check(CLI::IsMember({"online", "offline"}));

  auto* run_cmd = app.add_subcommand("run", "Run one simulation");
  std::string run_config, run_out = "out";
  run_cmd->add_option("--config", run_config)->required();
  run_cmd->add_option("--out", run_out);

  auto* sweep_cmd = app.add_subcommand("sweep", "Run one simulation per value");
  std::string sweep_config, sweep_axis, sweep_out = "out";
  std::vector<double> sweep_values;
  int jobs = 1;
  sweep_cmd->add_option("--config", sweep_config)->required();
  sweep_cmd->add_option("--axis", sweep_axis)->required();
  sweep_cmd->add_option("--values", sweep_values)->required()->delimiter(',');
  sweep_cmd->add_option("--out", sweep_out);
  sweep_cmd->add_option("--jobs", jobs);

  auto* cal_cmd =
      app.add_subcommand("calibrate", "Derive oracle coefficients for a preset");
  std::string preset, cal_out;
  cal_cmd->add_option("--preset", preset)->required();
  cal_cmd->add_option("--out", cal_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (profile_cmd->parsed()) return cmd_profile(model_config, out_path, seed);
    if (fit_cmd->parsed()) return cmd_fit(samples_path, fit_out);
    if (trace_cmd->parsed()) {
      return cmd_gen_trace(rate, cv, duration, in_tokens, out_tokens,
                           trace_seed, trace_out, lengths_file, trace_class);
    }
    if (run_cmd->parsed()) return cmd_run(run_config, run_out);
    if (sweep_cmd->parsed()) {
      return cmd_sweep(sweep_config, sweep_axis, sweep_values, sweep_out, jobs);
    }
    if (cal_cmd->parsed()) {
      write_file(cal_out, calibrate_preset(preset).dump(2) + "\n");
      std::cout << "calibrated " << preset << " -> " << cal_out << "\n";
      return kExitOk;
    }
  } catch (const coserve::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const coserve::LivelockError& e) {
    std::cerr << "livelock: " << e.what() << "\n";
    return kExitLivelock;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
