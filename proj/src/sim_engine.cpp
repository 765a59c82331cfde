#include "coserve/sim_engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <thread>

namespace coserve {

SimEngine::SimEngine(const RunConfig& config) : config_(config) {
  config_.validate();
  max_time_us_ = usec_from_sec(config_.max_sim_time_s);

  // The scheduler never sees the oracle, only coefficients fitted from a
  // profiling pass; with noise enabled the fit error becomes a real,
  // measurable source of SLO violations.
  const auto samples = profile(config_.oracle, default_profile_grid(),
                               seed_combine(config_.seed, "profile"));
  coeffs_ = fit(samples);

  kv_ = std::make_unique<KvCacheManager>(config_.cluster,
                                         config_.policy.incremental());
  scheduler_ = std::make_unique<Scheduler>(config_.policy, config_.cluster,
                                           config_.slo, coeffs_, &requests_,
                                           kv_.get());
  noise_rng_.seed(seed_combine(config_.seed, "iteration-noise"));
  workload_rng_.seed(seed_combine(config_.seed, "workload"));
}

void SimEngine::schedule(UsecT time, EventKind kind, int64_t payload,
                         uint64_t epoch) {
  if (time < now_) throw std::logic_error("event scheduled in the past");
  queue_.push(SimEvent{time, kind, next_sequence_++, payload, epoch});
}

void SimEngine::schedule_transfer(const TransferJob& job) {
  counters_.d2h_bytes = kv_->total_d2h_bytes();
  counters_.h2d_bytes = kv_->total_h2d_bytes();
  schedule(job.done_time, EventKind::kTransferDone, job.id);
}

void SimEngine::log_event(UsecT t, const std::string& line) {
  if (events_ != nullptr) {
    (*events_) << "{\"t\":" << format_sec(t) << "," << line << "}\n";
  }
}

void SimEngine::seed_workload() {
  std::vector<TraceEntry> entries;
  if (!config_.workload.trace_path.empty()) {
    entries = load_trace(config_.workload.trace_path);
  } else {
    entries = generate_offline_backlog(config_.workload.offline, config_.seed);
    const auto online = generate_online_trace(config_.workload.online,
                                              config_.seed);
    entries.insert(entries.end(), online.begin(), online.end());
    std::stable_sort(entries.begin(), entries.end(),
                     [](const TraceEntry& a, const TraceEntry& b) {
                       return a.arrival < b.arrival;
                     });
  }
  if (entries.empty()) {
    throw ConfigError("workload contains no requests");
  }
  for (const TraceEntry& e : entries) {
    RequestRecord r;
    r.id = next_request_id_++;
    r.cls = e.cls;
    r.arrival_time = e.arrival;
    r.input_tokens = e.input_tokens;
    r.output_tokens = e.output_tokens;
    requests_.emplace(r.id, r);
    schedule(e.arrival, EventKind::kArrival, r.id);
    if (e.cls == RequestClass::kOnline) {
      ++pending_online_arrivals_;
      ++total_online_;
      ++online_unfinished_;
    } else {
      ++offline_unfinished_;
    }
  }
}

void SimEngine::replenish_offline(UsecT now) {
  if (!config_.workload.offline.replenish) return;
  if (!config_.workload.trace_path.empty()) return;
  if (total_online_ == 0) return;  // offline-only runs must drain
  if (pending_online_arrivals_ == 0 && online_unfinished_ == 0) return;
  if (scheduler_->has_offline_candidates()) return;
  const int64_t backlog = config_.workload.offline.backlog;
  if (backlog == 0) return;
  auto batch = generate_offline_backlog(config_.workload.offline,
                                        workload_rng_());
  for (const TraceEntry& e : batch) {
    RequestRecord r;
    r.id = next_request_id_++;
    r.cls = RequestClass::kOffline;
    r.arrival_time = now;
    r.input_tokens = e.input_tokens;
    r.output_tokens = e.output_tokens;
    requests_.emplace(r.id, r);
    ++offline_unfinished_;
    scheduler_->add_request(r.id);
    log_event(now, "\"event\":\"arrival\",\"id\":" + std::to_string(r.id) +
                       ",\"class\":\"offline\"");
  }
}

void SimEngine::run_monitor(UsecT now) {
  if (!gpu_busy_ || !exec_.has_value()) return;
  if (!config_.policy.instrumented()) return;
  if (!exec_->plan().has_offline_entries()) return;
  if (exec_->preempt_flag()) return;

  const double t_on =
      estimate_exec_time(coeffs_, scheduler_->pending_online_plan());
  const double t_remaining =
      predict(coeffs_, exec_->plan()) - ms_from_usec(now - exec_->start_time());
  MonitorDecision decision = on_recv_online_request(
      true, t_on, t_remaining, config_.slo.ttft_budget_ms());
  if (decision == MonitorDecision::kNoOp &&
      scheduler_->memory_pressure_preempt_needed(now)) {
    // Idle offline KV would block the online admission path; preempting
    // turns the running entries into evictable paused ones.
    decision = MonitorDecision::kSignalPreempt;
  }
  if (decision == MonitorDecision::kSignalPreempt) {
    exec_->signal_preempt();
  }
}

void SimEngine::handle_arrival(const SimEvent& ev) {
  RequestRecord& r = requests_.at(ev.payload);
  scheduler_->add_request(r.id);
  if (r.cls == RequestClass::kOnline) {
    --pending_online_arrivals_;
    run_monitor(ev.time);
  }
  log_event(ev.time, "\"event\":\"arrival\",\"id\":" + std::to_string(r.id) +
                         ",\"class\":\"" + to_string(r.cls) + "\"");
  try_dispatch(ev.time);
}

void SimEngine::handle_layer_boundary(const SimEvent& ev) {
  if (!gpu_busy_ || !exec_.has_value() || ev.epoch != iteration_epoch_) return;
  const int64_t layer = ev.payload;
  const SafepointAction action = exec_->safepoint_check(layer, ev.time);
  if (action == SafepointAction::kContinue) return;

  std::vector<int64_t> dropped;
  for (const BatchEntry& entry : exec_->plan().entries) {
    if (!entry.online) dropped.push_back(entry.request_id);
  }
  const BatchPlan residual = exec_->plan().online_only();
  double residual_latency = 0.0;
  if (!residual.empty()) {
    residual_latency =
        oracle_latency_noise_free(config_.oracle, residual) * noise_factor_;
  }
  const UsecT check_end =
      ev.time + static_cast<UsecT>(std::llround(
                    config_.cluster.safepoint_check_cost_us));
  exec_->apply_drop(layer, check_end, residual_latency);
  scheduler_->on_offline_dropped(dropped, ev.time);
  ++counters_.preemptions;

  std::ostringstream ids;
  for (size_t i = 0; i < dropped.size(); ++i) {
    if (i > 0) ids << ",";
    ids << dropped[i];
  }
  log_event(ev.time, "\"event\":\"preempt\",\"layer\":" + std::to_string(layer) +
                         ",\"dropped\":[" + ids.str() + "]");

  // Stale timeline events die with the epoch bump; reschedule the rest.
  ++iteration_epoch_;
  for (int64_t next_layer : exec_->safepoint_layers()) {
    if (next_layer <= layer) continue;
    schedule(exec_->safepoint_time(next_layer), EventKind::kLayerBoundary,
             next_layer, iteration_epoch_);
  }
  schedule(exec_->end_time(), EventKind::kIterationEnd, 0, iteration_epoch_);
}

void SimEngine::handle_iteration_end(const SimEvent& ev) {
  if (!gpu_busy_ || !exec_.has_value() || ev.epoch != iteration_epoch_) return;
  const BatchPlan plan = exec_->plan();

  const auto completed = scheduler_->on_iteration_end(plan, ev.time);

  int64_t useful = 0;
  int64_t offline_useful = 0;
  for (const BatchEntry& entry : plan.entries) {
    const RequestRecord& r = requests_.at(entry.request_id);
    const int64_t before = progress_before_.at(entry.request_id);
    const int64_t delta = r.prefill_done + r.decode_done - before;
    useful += delta;
    if (!entry.online) offline_useful += delta;
    if (config_.policy.incremental() && delta > 0 &&
        entry.kind != EntryKind::kRecompute && !r.finished()) {
      kv_->stage_checkpoint(entry.request_id, before, before + delta);
    }
  }
  committed_tokens_ += useful;
  if (offline_useful > 0) offline_commits_.emplace_back(ev.time, offline_useful);
  online_unfinished_ -= static_cast<int64_t>(std::count_if(
      completed.begin(), completed.end(), [&](int64_t id) {
        return requests_.at(id).cls == RequestClass::kOnline;
      }));
  offline_unfinished_ -= static_cast<int64_t>(completed.size()) -
                         static_cast<int64_t>(std::count_if(
                             completed.begin(), completed.end(), [&](int64_t id) {
                               return requests_.at(id).cls == RequestClass::kOnline;
                             }));

  if (auto job = kv_->flush_checkpoints(ev.time)) {
    schedule_transfer(*job);
  }

  log_event(ev.time,
            "\"event\":\"iteration_end\",\"tokens\":" + std::to_string(useful) +
                ",\"completed\":" + std::to_string(completed.size()));

  gpu_busy_ = false;
  exec_.reset();
  progress_before_.clear();
  ++iteration_epoch_;
  last_iteration_end_ = ev.time;

  if (!scheduler_->has_offline_candidates() && offline_unfinished_ == 0) {
    if (config_.workload.offline.backlog > 0 &&
        !config_.workload.offline.replenish) {
      counters_.offline_drained = true;
    }
    replenish_offline(ev.time);
  }
  try_dispatch(ev.time);
}

void SimEngine::handle_transfer_done(const SimEvent& ev) {
  TransferDoneEffects effects = kv_->on_transfer_done(ev.payload, ev.time);
  log_event(ev.time, "\"event\":\"transfer_done\",\"job\":" +
                         std::to_string(ev.payload) + ",\"resident\":" +
                         std::to_string(effects.became_resident.size()));
  if (!gpu_busy_) try_dispatch(ev.time);
}

void SimEngine::try_dispatch(UsecT now) {
  if (gpu_busy_ || terminated_) return;
  BuildResult built = scheduler_->build_batch(now);
  for (const TransferJob& job : built.transfers) schedule_transfer(job);
  if (built.plan.empty()) return;

  double latency_ms = oracle_latency(config_.oracle, built.plan, noise_rng_);
  const double noise_free =
      oracle_latency_noise_free(config_.oracle, built.plan);
  noise_factor_ = noise_free > 0 ? latency_ms / noise_free : 1.0;

  exec_.emplace(built.plan, now, latency_ms, config_.cluster.num_layers,
                config_.cluster.safepoint_interval_layers,
                config_.cluster.safepoint_check_cost_us,
                config_.policy.instrumented());
  ++iteration_epoch_;
  gpu_busy_ = true;
  ++iterations_;
  if (now < last_iteration_end_) {
    throw std::logic_error("iterations overlap on the device");
  }
  last_iteration_start_ = now;

  progress_before_.clear();
  for (const BatchEntry& entry : built.plan.entries) {
    const RequestRecord& r = requests_.at(entry.request_id);
    progress_before_[entry.request_id] = r.prefill_done + r.decode_done;
  }

  for (int64_t layer : exec_->safepoint_layers()) {
    schedule(exec_->safepoint_time(layer), EventKind::kLayerBoundary, layer,
             iteration_epoch_);
  }
  UsecT end = exec_->end_time();
  if (end <= now) end = now + 1;  // keep token completion times strict
  schedule(end, EventKind::kIterationEnd, 0, iteration_epoch_);

  std::ostringstream line;
  line << "\"event\":\"dispatch\",\"tokens\":"
       << built.plan.total_compute_tokens()
       << ",\"entries\":" << built.plan.entries.size() << ",\"predicted_ms\":"
       << built.plan.predicted_latency_ms << ",\"latency_ms\":" << latency_ms;
  if (built.offline_optimized) line << ",\"offline_optimized\":true";
  log_event(now, line.str());
}

bool SimEngine::termination_reached() const {
  if (total_online_ > 0) {
    return pending_online_arrivals_ == 0 && online_unfinished_ == 0;
  }
  return offline_unfinished_ == 0;
}

void SimEngine::audit_invariants(UsecT now) {
  (void)now;
  kv_->audit();
  int64_t progress_total = 0;
  for (const auto& [id, r] : requests_) {
    progress_total += r.prefill_done + r.decode_done;
    if (r.prefill_done < 0 || r.prefill_done > r.input_tokens ||
        r.decode_done < 0 || r.decode_done > r.output_tokens) {
      throw std::logic_error("request progress out of range");
    }
    if (r.finished() != (r.decode_done == r.output_tokens)) {
      throw std::logic_error("finished state out of sync");
    }
    if (static_cast<int64_t>(r.token_completion_times.size()) != r.decode_done) {
      throw std::logic_error("token completion record out of sync");
    }
    for (size_t i = 1; i < r.token_completion_times.size(); ++i) {
      if (r.token_completion_times[i] <= r.token_completion_times[i - 1]) {
        throw std::logic_error("token completion times not increasing");
      }
    }
    if (!r.finished() && (r.prefill_done > 0 || r.decode_done > 0)) {
      const int64_t covered = kv_->covered_tokens(id);
      const int64_t pending = kv_->pending_append_tokens(id);
      if (covered != r.context_len() + pending) {
        throw std::logic_error("page coverage does not match context length");
      }
    }
  }
  if (progress_total != committed_tokens_) {
    throw std::logic_error("token conservation violated");
  }
}

MetricsReport SimEngine::run() {
  seed_workload();
  schedule(0, EventKind::kMonitorWake, 0);

  while (!queue_.empty()) {
    SimEvent ev = queue_.top();
    queue_.pop();
    if (ev.time > max_time_us_) {
      throw LivelockError(
          "simulated time exceeded max_sim_time at t=" + format_sec(ev.time) +
          "s with " + std::to_string(online_unfinished_) +
          " online requests unfinished");
    }
    now_ = ev.time;
    switch (ev.kind) {
      case EventKind::kArrival:
        handle_arrival(ev);
        break;
      case EventKind::kLayerBoundary:
        handle_layer_boundary(ev);
        break;
      case EventKind::kIterationEnd:
        handle_iteration_end(ev);
        break;
      case EventKind::kTransferDone:
        handle_transfer_done(ev);
        break;
      case EventKind::kMonitorWake:
        try_dispatch(ev.time);
        break;
    }
    if (config_.audit) audit_invariants(ev.time);
    if (termination_reached()) {
      terminated_ = true;
      break;
    }
  }

  if (!terminated_) {
    throw LivelockError(
        "event queue drained with unfinished work at t=" + format_sec(now_) +
        "s; " + std::to_string(online_unfinished_) + " online and " +
        std::to_string(offline_unfinished_) + " offline requests open");
  }

  horizon_ = std::max<UsecT>(now_, 1);
  const auto& sched_counters = scheduler_->counters();
  counters_.forced_admissions = sched_counters.forced_admissions;
  counters_.compute_stalled_by_transfers =
      sched_counters.shortfall_with_pending_transfers;
  counters_.deferred_decodes = sched_counters.deferred_decodes;
  counters_.d2h_bytes = kv_->total_d2h_bytes();
  counters_.h2d_bytes = kv_->total_h2d_bytes();
  return build_report(requests_, config_.slo, sec_from_usec(horizon_),
                      counters_);
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "rate") return SweepAxis::kRate;
  if (s == "slo_scale") return SweepAxis::kSloScale;
  if (s == "cv") return SweepAxis::kCv;
  if (s == "in_len") return SweepAxis::kInLen;
  if (s == "out_len") return SweepAxis::kOutLen;
  throw ConfigError("unknown sweep axis: " + s);
}

const char* to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kRate: return "rate";
    case SweepAxis::kSloScale: return "slo_scale";
    case SweepAxis::kCv: return "cv";
    case SweepAxis::kInLen: return "in_len";
    case SweepAxis::kOutLen: return "out_len";
  }
  return "?";
}

RunConfig apply_sweep_value(const RunConfig& base, SweepAxis axis,
                            double value) {
  RunConfig config = base;
  const double base_tokens = static_cast<double>(
      base.workload.online.input_tokens + base.workload.online.output_tokens);
  uint64_t value_bits;
  static_assert(sizeof(value_bits) == sizeof(value));
  std::memcpy(&value_bits, &value, sizeof(value));

  switch (axis) {
    case SweepAxis::kRate:
      config.workload.online.rate = value;
      break;
    case SweepAxis::kSloScale:
      config.slo.scale = value;
      // Workload and seeds untouched: baselines that ignore the SLO must
      // reproduce bit-identically across scales.
      return config;
    case SweepAxis::kCv:
      config.workload.online.cv = value;
      break;
    case SweepAxis::kInLen: {
      config.workload.online.input_tokens = static_cast<int64_t>(value);
      const double new_tokens = value + static_cast<double>(
                                            base.workload.online.output_tokens);
      config.workload.online.rate =
          base.workload.online.rate * base_tokens / new_tokens;
      break;
    }
    case SweepAxis::kOutLen: {
      config.workload.online.output_tokens = static_cast<int64_t>(value);
      const double new_tokens =
          static_cast<double>(base.workload.online.input_tokens) + value;
      config.workload.online.rate =
          base.workload.online.rate * base_tokens / new_tokens;
      break;
    }
  }
  config.seed = seed_combine(seed_combine(base.seed, to_string(axis)),
                             value_bits);
  return config;
}

std::vector<MetricsReport> sweep(const RunConfig& base, SweepAxis axis,
                                 const std::vector<double>& values, int jobs) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<MetricsReport> reports(values.size());
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= values.size()) break;
      SimEngine engine(apply_sweep_value(base, axis, values[i]));
      reports[i] = engine.run();
    }
  };
  const int thread_count =
      std::max(1, std::min<int>(jobs, static_cast<int>(values.size())));
  if (thread_count == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(thread_count));
    for (int i = 0; i < thread_count; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return reports;
}

}  // namespace coserve
