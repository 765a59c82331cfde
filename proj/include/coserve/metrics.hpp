#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "coserve/config.hpp"
#include "coserve/request.hpp"

namespace coserve {

// TTFT: arrival to the completion of the final prefill chunk (which emits
// the first token). Requires at least one produced token.
double ttft_seconds(const RequestRecord& req);

// Successive gaps of token completion times. The prefill-finishing
// iteration produces token one, so the list has decode_done - 1 entries.
std::vector<double> tbt_samples_seconds(const RequestRecord& req);

// Useful tokens per second across offline requests within the horizon;
// recomputed tokens never count twice.
double offline_throughput_tokens_per_s(
    const std::map<int64_t, RequestRecord>& requests, double horizon_s);

// Nearest-rank percentile: element ceil(q * n) of the sorted sample.
double percentile(std::vector<double> samples, double q);

struct MetricsReport {
  double p50_ttft_s = 0, p90_ttft_s = 0, p99_ttft_s = 0, max_ttft_s = 0;
  double p50_tbt_s = 0, p90_tbt_s = 0, p99_tbt_s = 0, max_tbt_s = 0;
  double ttft_attainment = 1.0;
  double tbt_attainment = 1.0;
  double offline_throughput_tok_s = 0;
  double online_throughput_tok_s = 0;
  int64_t forced_admissions = 0;
  int64_t preemptions = 0;
  int64_t recomputed_tokens = 0;
  int64_t d2h_bytes = 0;
  int64_t h2d_bytes = 0;
  int64_t online_finished = 0;
  int64_t offline_finished = 0;
  int64_t ttft_unfinished = 0;  // online requests with no first token
  int64_t compute_stalled_by_transfers = 0;
  int64_t deferred_decodes = 0;
  bool offline_drained = false;
  double horizon_s = 0;

  std::string to_json_text() const;
};

struct RunCounters {
  int64_t forced_admissions = 0;
  int64_t preemptions = 0;
  int64_t d2h_bytes = 0;
  int64_t h2d_bytes = 0;
  int64_t compute_stalled_by_transfers = 0;
  int64_t deferred_decodes = 0;
  bool offline_drained = false;
};

MetricsReport build_report(const std::map<int64_t, RequestRecord>& requests,
                           const SloConfig& slo, double horizon_s,
                           const RunCounters& counters);

// Per-5-second series: t, p99_ttft_5s, p99_tbt_5s, offline_tput_5s.
std::string timeseries_csv(const std::map<int64_t, RequestRecord>& requests,
                           const std::vector<std::pair<UsecT, int64_t>>&
                               offline_commits,
                           double horizon_s);

std::string requests_csv(const std::map<int64_t, RequestRecord>& requests,
                         const std::string& tbt_path);
std::string tbt_samples_csv(const std::map<int64_t, RequestRecord>& requests);

}  // namespace coserve
