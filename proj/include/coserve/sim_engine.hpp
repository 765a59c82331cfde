#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "coserve/config.hpp"
#include "coserve/kv_cache.hpp"
#include "coserve/metrics.hpp"
#include "coserve/perf_model.hpp"
#include "coserve/preemption.hpp"
#include "coserve/request.hpp"
#include "coserve/rng.hpp"
#include "coserve/scheduler.hpp"
#include "coserve/workload.hpp"

namespace coserve {

struct LivelockError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tie order at identical timestamps: transfer completions beat arrivals beat
// layer boundaries beat iteration ends; the sequence number fixes the rest.
enum class EventKind : int {
  kTransferDone = 0,
  kArrival = 1,
  kLayerBoundary = 2,
  kIterationEnd = 3,
  kMonitorWake = 4,
};

struct SimEvent {
  UsecT time = 0;
  EventKind kind = EventKind::kMonitorWake;
  uint64_t sequence = 0;
  int64_t payload = 0;  // request id, job id, or layer
  uint64_t epoch = 0;   // iteration epoch; stale timeline events are skipped
};

// One deterministic run: a single simulated device, event-driven.
class SimEngine {
 public:
  explicit SimEngine(const RunConfig& config);

  void set_event_sink(std::ostream* sink) { events_ = sink; }
  MetricsReport run();

  const std::map<int64_t, RequestRecord>& requests() const { return requests_; }
  const std::vector<std::pair<UsecT, int64_t>>& offline_commits() const {
    return offline_commits_;
  }
  const SloConfig& slo() const { return config_.slo; }
  const PerfCoefficients& fitted_coeffs() const { return coeffs_; }
  int64_t iterations_dispatched() const { return iterations_; }
  UsecT horizon() const { return horizon_; }

 private:
  struct EventCompare {
    bool operator()(const SimEvent& a, const SimEvent& b) const {
      if (a.time != b.time) return a.time > b.time;
      if (a.kind != b.kind) return static_cast<int>(a.kind) > static_cast<int>(b.kind);
      return a.sequence > b.sequence;
    }
  };

  void schedule(UsecT time, EventKind kind, int64_t payload, uint64_t epoch = 0);
  void schedule_transfer(const TransferJob& job);
  void log_event(UsecT t, const std::string& line);

  void seed_workload();
  void handle_arrival(const SimEvent& ev);
  void handle_layer_boundary(const SimEvent& ev);
  void handle_iteration_end(const SimEvent& ev);
  void handle_transfer_done(const SimEvent& ev);
  void try_dispatch(UsecT now);
  void run_monitor(UsecT now);
  void replenish_offline(UsecT now);
  void audit_invariants(UsecT now);
  bool termination_reached() const;

  RunConfig config_;
  PerfCoefficients coeffs_;
  std::map<int64_t, RequestRecord> requests_;
  std::unique_ptr<KvCacheManager> kv_;
  std::unique_ptr<Scheduler> scheduler_;
  Rng noise_rng_;
  Rng workload_rng_;

  std::priority_queue<SimEvent, std::vector<SimEvent>, EventCompare> queue_;
  uint64_t next_sequence_ = 0;
  uint64_t iteration_epoch_ = 0;
  bool gpu_busy_ = false;
  std::optional<IterationExecution> exec_;
  double noise_factor_ = 1.0;
  std::map<int64_t, int64_t> progress_before_;  // id -> prefill+decode

  int64_t next_request_id_ = 0;
  int64_t pending_online_arrivals_ = 0;
  int64_t online_unfinished_ = 0;
  int64_t offline_unfinished_ = 0;
  int64_t total_online_ = 0;
  bool terminated_ = false;
  UsecT now_ = 0;
  UsecT horizon_ = 0;
  UsecT max_time_us_ = 0;
  int64_t iterations_ = 0;
  int64_t committed_tokens_ = 0;
  UsecT last_iteration_end_ = 0;
  UsecT last_iteration_start_ = -1;

  RunCounters counters_;
  std::vector<std::pair<UsecT, int64_t>> offline_commits_;
  std::ostream* events_ = nullptr;
};

enum class SweepAxis { kRate, kSloScale, kCv, kInLen, kOutLen };

SweepAxis sweep_axis_from_string(const std::string& s);
const char* to_string(SweepAxis axis);

// Applies one sweep value: slo_scale leaves the workload (and its seed)
// untouched so schedule-oblivious baselines reproduce bit-identically;
// length axes rescale the request rate to hold offered token load constant.
RunConfig apply_sweep_value(const RunConfig& base, SweepAxis axis, double value);

// Independent runs, one per value, in input order. `jobs` > 1 runs them on
// a thread pool; runs share nothing so the report list is identical.
std::vector<MetricsReport> sweep(const RunConfig& base, SweepAxis axis,
                                 const std::vector<double>& values, int jobs);

}  // namespace coserve
