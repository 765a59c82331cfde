#include <doctest.h>

#include <random>

#include "coserve/preemption.hpp"
#include "coserve/rng.hpp"

using namespace coserve;

namespace {

BatchPlan mixed_plan() {
  BatchPlan plan;
  plan.entries.push_back(BatchEntry{1, 1, 4096, EntryKind::kDecode, true});
  plan.entries.push_back(BatchEntry{2, 2048, 0, EntryKind::kPrefill, false});
  return plan;
}

}  // namespace

TEST_CASE("safepoint cost matches the measured single-GPU and TP points") {
  CHECK(tp_safepoint_cost(1) == doctest::Approx(7e-6));
  CHECK(tp_safepoint_cost(1, true) == doctest::Approx(21e-6));
  CHECK(tp_safepoint_cost(4) == doctest::Approx(167.2e-6));
  CHECK_THROWS_AS(tp_safepoint_cost(0), std::invalid_argument);
}

TEST_CASE("monitor preempts only when the TTFT budget cannot be met") {
  CHECK(on_recv_online_request(true, 20.0, 50.0, 100.0) ==
        MonitorDecision::kNoOp);
  CHECK(on_recv_online_request(true, 20.0, 200.0, 100.0) ==
        MonitorDecision::kSignalPreempt);
  // No offline requests in the batch: nothing to preempt.
  CHECK(on_recv_online_request(false, 500.0, 500.0, 100.0) ==
        MonitorDecision::kNoOp);
}

TEST_CASE("safepoints run every four layers and charge their cost") {
  // 32 layers at 8 ms each, signal at t = 10 ms.
  IterationExecution exec(mixed_plan(), 0, 256.0, 32, 4, 100.0, true);
  CHECK(exec.num_checks() == 7);
  const auto layers = exec.safepoint_layers();
  REQUIRE(layers.size() == 7);
  CHECK(layers.front() == 4);
  CHECK(layers.back() == 28);
  CHECK(exec.safepoint_time(4) == 32'000);            // no prior checks
  CHECK(exec.safepoint_time(8) == 64'000 + 100);      // one prior check
  CHECK(exec.end_time() == 256'000 + 7 * 100);
  CHECK(exec.instrumented_total_ms() == doctest::Approx(256.7));

  const UsecT signal = 10'000;
  exec.signal_preempt();
  UsecT detected = 0;
  for (int64_t layer : layers) {
    const UsecT t = exec.safepoint_time(layer);
    if (t < signal) continue;
    if (exec.safepoint_check(layer, t) == SafepointAction::kDropOffline) {
      detected = t;
      break;
    }
  }
  CHECK(detected == 32'000);  // the safepoint after layer 4
  CHECK(detected - signal <= usec_from_ms(4 * 8.0) + 100);
}

TEST_CASE("uninstrumented iterations carry no check cost") {
  IterationExecution exec(mixed_plan(), 0, 256.0, 32, 4, 100.0, false);
  CHECK(exec.num_checks() == 0);
  CHECK(exec.safepoint_layers().empty());
  CHECK(exec.end_time() == 256'000);
}

TEST_CASE("a flag with an online-only batch is ignored") {
  BatchPlan online;
  online.entries.push_back(BatchEntry{1, 1, 128, EntryKind::kDecode, true});
  IterationExecution exec(online, 0, 64.0, 32, 4, 21.0, true);
  exec.signal_preempt();
  CHECK(exec.safepoint_check(4, exec.safepoint_time(4)) ==
        SafepointAction::kContinue);
}

TEST_CASE("dropping offline entries re-times the residual layers") {
  IterationExecution exec(mixed_plan(), 0, 256.0, 32, 4, 100.0, true);
  exec.signal_preempt();
  const UsecT t4 = exec.safepoint_time(4);
  REQUIRE(exec.safepoint_check(4, t4) == SafepointAction::kDropOffline);
  const UsecT check_end = t4 + 100;
  // Online-only residual runs at 64 ms for the full pass.
  exec.apply_drop(4, check_end, 64.0);
  CHECK(exec.preempted_at_layer() == 4);
  CHECK_FALSE(exec.preempt_flag());
  CHECK(exec.plan().entries.size() == 1);
  CHECK(exec.plan().entries[0].online);
  // 28 remaining layers at 2 ms each plus six remaining checks.
  CHECK(exec.end_time() == check_end + 56'000 + 6 * 100);
  CHECK(exec.safepoint_time(8) == check_end + 8'000);
}

TEST_CASE("detection latency is bounded by the safepoint spacing") {
  Rng rng(31);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const double latency_ms = 20.0 + unit(rng) * 400.0;
    const int64_t layers = 8 + static_cast<int64_t>(rng() % 120);
    const int64_t interval = 1 + static_cast<int64_t>(rng() % 8);
    const double check_us = unit(rng) * 200.0;
    IterationExecution exec(mixed_plan(), 0, latency_ms, layers, interval,
                            check_us, true);
    const UsecT end = exec.end_time();
    const UsecT signal = static_cast<UsecT>(unit(rng) * static_cast<double>(end));
    exec.signal_preempt();
    UsecT detected = end;  // the iteration-end boundary is a free safepoint
    for (int64_t layer : exec.safepoint_layers()) {
      const UsecT t = exec.safepoint_time(layer);
      if (t >= signal) {
        detected = t;
        break;
      }
    }
    const double bound_us = static_cast<double>(interval) *
                                (latency_ms / static_cast<double>(layers)) * 1e3 +
                            check_us;
    CHECK(static_cast<double>(detected - signal) <= bound_us + 1.0);
  }
}
