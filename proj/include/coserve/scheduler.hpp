#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <vector>

#include "coserve/config.hpp"
#include "coserve/kv_cache.hpp"
#include "coserve/perf_model.hpp"
#include "coserve/request.hpp"

namespace coserve {

struct BuildResult {
  BatchPlan plan;
  std::vector<TransferJob> transfers;  // prefetches kicked during the build
  bool offline_optimized = false;
};

struct SchedulerCounters {
  int64_t forced_admissions = 0;
  int64_t deferred_decodes = 0;
  int64_t shortfall_with_pending_transfers = 0;
  int64_t offline_evictions = 0;
};

// Per-iteration batch composition. ConServe sizes offline admissions with
// the fitted latency model against the online TBT budget; the baselines
// fill a fixed chunk. Single-threaded, driven by the engine between events.
class Scheduler {
 public:
  Scheduler(const SchedulerPolicy& policy, const ClusterConfig& cluster,
            const SloConfig& slo, const PerfCoefficients& coeffs,
            std::map<int64_t, RequestRecord>* requests, KvCacheManager* kv);

  void add_request(int64_t id);
  BuildResult build_batch(UsecT now);

  // Safepoint drop: offline entries lose their in-flight work and pause.
  void on_offline_dropped(const std::vector<int64_t>& ids, UsecT now);

  // Commits progress for the surviving entries of the finished iteration;
  // returns ids of requests that reached their output length.
  std::vector<int64_t> on_iteration_end(const BatchPlan& finished_plan,
                                        UsecT now);

  // Frees GPU pages from paused offline requests, newest pause first,
  // host-resident copies preferred. Returns pages freed immediately.
  int64_t release_offline_kv_on_demand(int64_t needed_pages, UsecT now);

  // Pending online work expressed as a plan, for the TTFT monitor.
  BatchPlan pending_online_plan() const;
  bool online_work_pending() const;
  // True when admitting the next online chunk would need pages that only a
  // drop of the running offline entries could free.
  bool memory_pressure_preempt_needed(UsecT now) const;

  bool has_offline_candidates() const;
  const SchedulerCounters& counters() const { return counters_; }
  double effective_tbt_budget_ms() const;

 private:
  RequestRecord& req(int64_t id);
  const RequestRecord& req(int64_t id) const;

  BuildResult build_conserve(UsecT now);
  BuildResult build_chunked(UsecT now);

  // Allocates up to `tokens` for the request, evicting paused offline pages
  // on demand (ConServe / Sarathi paths). Returns tokens actually
  // allocatable, possibly 0.
  int64_t admit_with_eviction(int64_t id, int64_t tokens, UsecT now);
  // KV admission for a prefill chunk of p compute tokens. The chunk that
  // finishes the prefill also claims the emitted first token's slot, so the
  // footprint always covers prefill_done + decode_done. Returns the compute
  // tokens admitted.
  int64_t admit_prefill(int64_t id, int64_t p, UsecT now, bool reserved_mode);
  // Sarathi path: request-granular discard of the largest paused victim.
  bool discard_largest_paused_victim(UsecT now);
  bool reserve_footprint(int64_t id);  // NonPreemptive admission discipline

  void mark_active(int64_t id);
  void pause_offline(int64_t id, UsecT now);
  // Requests still owing recompute work park at the queue front instead of
  // the paused set, which only holds GPU-backed resume candidates.
  void park_offline(int64_t id, UsecT now);

  std::vector<int64_t> resident_paused_candidates() const;  // newest first

  SchedulerPolicy policy_;
  ClusterConfig cluster_;
  SloConfig slo_;
  PerfCoefficients coeffs_;
  std::map<int64_t, RequestRecord>* requests_;
  KvCacheManager* kv_;

  std::deque<int64_t> online_queue_;   // prefill pending, FIFO
  std::vector<int64_t> online_decoding_;  // prefill done, sorted by id
  std::deque<int64_t> offline_queue_;  // fresh or evicted-awaiting-resume
  std::map<int64_t, uint64_t> paused_offline_;  // id -> pause seq
  uint64_t pause_seq_ = 0;
  int64_t reserved_bytes_ = 0;  // NonPreemptive footprint reservations
  std::map<int64_t, int64_t> reservations_;
  SchedulerCounters counters_;
};

}  // namespace coserve
