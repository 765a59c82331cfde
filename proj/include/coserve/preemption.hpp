#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "coserve/config.hpp"
#include "coserve/perf_model.hpp"
#include "coserve/time.hpp"

namespace coserve {

// Cost of one safepoint check in seconds: a pinned-host flag read plus, when
// more than one worker participates, a broadcast/barrier whose effective cost
// grows with worker lag (calibrated against the measured 4-way value).
double tp_safepoint_cost(int64_t tp_degree, bool include_broadcast);
inline double tp_safepoint_cost(int64_t tp_degree) {
  return tp_safepoint_cost(tp_degree, tp_degree > 1);
}

enum class MonitorDecision { kNoOp, kSignalPreempt };

// Triggered at each online arrival: preempt when finishing the in-flight
// batch would already blow the new request's TTFT objective.
MonitorDecision on_recv_online_request(bool batch_has_offline,
                                       double t_on_ms, double t_remaining_ms,
                                       double ttft_budget_ms);

enum class SafepointAction { kContinue, kDropOffline };

// Timeline of one dispatched iteration. Layers run uniformly at
// latency / num_layers; interior safepoints every `interval` layers add
// check_cost each, preempted or not. After a drop the remaining layers are
// re-timed from the residual plan's latency scaled by the remaining-layer
// fraction.
class IterationExecution {
 public:
  IterationExecution() = default;
  IterationExecution(BatchPlan plan, UsecT start_time, double latency_ms,
                     int64_t num_layers, int64_t interval_layers,
                     double check_cost_us, bool instrumented);

  const BatchPlan& plan() const { return plan_; }
  UsecT start_time() const { return start_; }
  double latency_ms() const { return latency_ms_; }
  double per_layer_ms() const { return latency_ms_ / num_layers_; }
  bool instrumented() const { return instrumented_; }
  int64_t num_checks() const;
  bool preempt_flag() const { return preempt_flag_; }
  void signal_preempt() { preempt_flag_ = true; }
  std::optional<int64_t> preempted_at_layer() const { return preempted_at_; }
  int64_t layers_done() const { return layers_done_; }

  // Interior safepoint layers: interval, 2*interval, ... < num_layers.
  std::vector<int64_t> safepoint_layers() const;
  // Instant at which the worker reaches the safepoint at `layer`.
  UsecT safepoint_time(int64_t layer) const;
  UsecT end_time() const;

  // Observes the flag at the safepoint; on DropOffline the caller commits
  // the residual plan's latency so the remaining layers can be re-timed.
  SafepointAction safepoint_check(int64_t layer, UsecT now);
  void apply_drop(int64_t layer, UsecT check_end, double residual_latency_ms);

  // Total predicted duration including check costs (for tests).
  double instrumented_total_ms() const;

 private:
  BatchPlan plan_;
  UsecT start_ = 0;
  double latency_ms_ = 0.0;
  int64_t num_layers_ = 1;
  int64_t interval_ = 4;
  double check_cost_us_ = 0.0;
  bool instrumented_ = false;
  bool preempt_flag_ = false;
  std::optional<int64_t> preempted_at_;
  int64_t layers_done_ = 0;

  // Post-drop timeline base: time and layer where the residual began.
  UsecT rebase_time_ = 0;
  int64_t rebase_layer_ = 0;
  double residual_per_layer_ms_ = 0.0;
};

}  // namespace coserve
