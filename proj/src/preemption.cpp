#include "coserve/preemption.hpp"

#include <cmath>
#include <stdexcept>

namespace coserve {

namespace {
constexpr double kFlagReadUs = 7.0;
constexpr double kBroadcastUs = 13.0;
// Per-extra-worker lag, calibrated so a 4-way check averages 167.2us.
constexpr double kWorkerLagUs = (167.2 - kFlagReadUs - kBroadcastUs) / 3.0;
}  // namespace

double tp_safepoint_cost(int64_t tp_degree, bool include_broadcast) {
  if (tp_degree < 1) throw std::invalid_argument("tp_degree must be >= 1");
  double us = kFlagReadUs;
  if (include_broadcast) {
    us += kBroadcastUs + kWorkerLagUs * static_cast<double>(tp_degree - 1);
  }
  return us * 1e-6;
}

MonitorDecision on_recv_online_request(bool batch_has_offline, double t_on_ms,
                                       double t_remaining_ms,
                                       double ttft_budget_ms) {
  if (!batch_has_offline) return MonitorDecision::kNoOp;
  if (t_remaining_ms + t_on_ms > ttft_budget_ms) {
    return MonitorDecision::kSignalPreempt;
  }
  return MonitorDecision::kNoOp;
}

IterationExecution::IterationExecution(BatchPlan plan, UsecT start_time,
                                       double latency_ms, int64_t num_layers,
                                       int64_t interval_layers,
                                       double check_cost_us, bool instrumented)
    : plan_(std::move(plan)),
      start_(start_time),
      latency_ms_(latency_ms),
      num_layers_(num_layers),
      interval_(interval_layers),
      check_cost_us_(check_cost_us),
      instrumented_(instrumented),
      rebase_time_(start_time),
      rebase_layer_(0),
      residual_per_layer_ms_(latency_ms / static_cast<double>(num_layers)) {}

int64_t IterationExecution::num_checks() const {
  if (!instrumented_) return 0;
  return (num_layers_ - 1) / interval_;
}

std::vector<int64_t> IterationExecution::safepoint_layers() const {
  std::vector<int64_t> layers;
  if (!instrumented_) return layers;
  for (int64_t layer = interval_; layer < num_layers_; layer += interval_) {
    layers.push_back(layer);
  }
  return layers;
}

namespace {

// Safepoints sit at layer multiples of the interval, strictly inside the
// iteration; count of them in the open range (from_layer, to_layer).
int64_t checks_between(int64_t from_layer, int64_t to_layer, int64_t interval) {
  if (to_layer <= from_layer) return 0;
  return (to_layer - 1) / interval - from_layer / interval;
}

}  // namespace

UsecT IterationExecution::safepoint_time(int64_t layer) const {
  const int64_t checks_before =
      instrumented_ ? checks_between(rebase_layer_, layer, interval_) : 0;
  const double elapsed_ms =
      static_cast<double>(layer - rebase_layer_) * residual_per_layer_ms_;
  return rebase_time_ + static_cast<UsecT>(std::llround(
                            elapsed_ms * 1e3 +
                            static_cast<double>(checks_before) * check_cost_us_));
}

UsecT IterationExecution::end_time() const {
  const int64_t checks_after =
      instrumented_ ? checks_between(rebase_layer_, num_layers_, interval_) : 0;
  const double elapsed_ms =
      static_cast<double>(num_layers_ - rebase_layer_) * residual_per_layer_ms_;
  return rebase_time_ +
         static_cast<UsecT>(std::llround(
             elapsed_ms * 1e3 +
             static_cast<double>(checks_after) * check_cost_us_));
}

SafepointAction IterationExecution::safepoint_check(int64_t layer, UsecT now) {
  (void)now;
  layers_done_ = layer;
  if (!preempt_flag_) return SafepointAction::kContinue;
  if (!plan_.has_offline_entries()) {
    return SafepointAction::kContinue;  // nothing to drop
  }
  return SafepointAction::kDropOffline;
}

void IterationExecution::apply_drop(int64_t layer, UsecT check_end,
                                    double residual_latency_ms) {
  plan_ = plan_.online_only();
  preempt_flag_ = false;
  preempted_at_ = layer;
  rebase_layer_ = layer;
  rebase_time_ = check_end;
  residual_per_layer_ms_ =
      residual_latency_ms / static_cast<double>(num_layers_);
}

double IterationExecution::instrumented_total_ms() const {
  return latency_ms_ + static_cast<double>(num_checks()) * check_cost_us_ / 1e3;
}

}  // namespace coserve
