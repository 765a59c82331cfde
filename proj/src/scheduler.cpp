#include "coserve/scheduler.hpp"

#include <algorithm>
#include <stdexcept>

namespace coserve {

Scheduler::Scheduler(const SchedulerPolicy& policy,
                     const ClusterConfig& cluster, const SloConfig& slo,
                     const PerfCoefficients& coeffs,
                     std::map<int64_t, RequestRecord>* requests,
                     KvCacheManager* kv)
    : policy_(policy),
      cluster_(cluster),
      slo_(slo),
      coeffs_(coeffs),
      requests_(requests),
      kv_(kv) {}

RequestRecord& Scheduler::req(int64_t id) { return requests_->at(id); }
const RequestRecord& Scheduler::req(int64_t id) const {
  return requests_->at(id);
}

double Scheduler::effective_tbt_budget_ms() const {
  double budget = slo_.tbt_budget_ms();
  if (policy_.instrumented()) budget -= cluster_.check_overhead_ms();
  return budget;
}

void Scheduler::add_request(int64_t id) {
  const RequestRecord& r = req(id);
  kv_->register_request(id, r.cls == RequestClass::kOnline);
  if (r.cls == RequestClass::kOnline) {
    online_queue_.push_back(id);
  } else {
    offline_queue_.push_back(id);
  }
}

void Scheduler::mark_active(int64_t id) {
  paused_offline_.erase(id);
  kv_->on_request_active(id);
  req(id).state = RequestState::kRunning;
}

void Scheduler::pause_offline(int64_t id, UsecT now) {
  (void)now;
  paused_offline_[id] = ++pause_seq_;
  kv_->on_request_paused(id, pause_seq_);
  req(id).state = RequestState::kPaused;
}

void Scheduler::park_offline(int64_t id, UsecT now) {
  if (kv_->resume_cost(id).discarded_tokens > 0) {
    kv_->on_request_paused(id, ++pause_seq_);  // surviving pages stay evictable
    req(id).state = RequestState::kQueued;
    offline_queue_.push_front(id);
    return;
  }
  pause_offline(id, now);
}

std::vector<int64_t> Scheduler::resident_paused_candidates() const {
  std::vector<std::pair<uint64_t, int64_t>> order;
  for (const auto& [id, seq] : paused_offline_) {
    if (kv_->fully_resident(id)) order.emplace_back(seq, id);
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int64_t> ids;
  ids.reserve(order.size());
  for (const auto& [seq, id] : order) ids.push_back(id);
  return ids;
}

bool Scheduler::discard_largest_paused_victim(UsecT now) {
  int64_t victim = -1;
  int64_t victim_pages = 0;
  uint64_t victim_seq = 0;
  for (const auto& [id, seq] : paused_offline_) {
    const int64_t pages = kv_->request_gpu_pages(id);
    if (pages > victim_pages ||
        (pages == victim_pages && victim >= 0 && seq < victim_seq)) {
      victim = id;
      victim_pages = pages;
      victim_seq = seq;
    }
  }
  if (victim < 0 || victim_pages == 0) return false;
  EvictStats stats = kv_->discard_request(victim, now);
  RequestRecord& r = req(victim);
  r.recompute_pending += stats.discarded_tokens;
  r.state = RequestState::kQueued;
  paused_offline_.erase(victim);
  kv_->on_request_active(victim);  // no pages left to enumerate
  offline_queue_.push_front(victim);
  ++counters_.offline_evictions;
  return true;
}

int64_t Scheduler::admit_with_eviction(int64_t id, int64_t tokens, UsecT now) {
  if (tokens <= 0) return 0;
  const int64_t bpt = cluster_.kv_bytes_per_token;
  int64_t needed = tokens * bpt;
  if (needed > kv_->gpu_free_bytes()) {
    if (policy_.kind == PolicyKind::kNonPreemptive) return 0;
    if (policy_.incremental()) {
      const int64_t short_pages =
          (needed - kv_->gpu_free_bytes() + kv_->page_bytes() - 1) /
          kv_->page_bytes();
      ReleaseStats released =
          kv_->release_offline_pages_on_demand(short_pages, now);
      if (released.freed_pages > 0) ++counters_.offline_evictions;
      for (const auto& [victim, discarded] : released.discards) {
        req(victim).recompute_pending += discarded;
      }
    } else {
      // Request-granular fallback used by Sarathi-P and the ablation
      // variants without incremental checkpointing.
      while (needed > kv_->gpu_free_bytes() &&
             discard_largest_paused_victim(now)) {
      }
    }
  }
  if (needed > kv_->gpu_free_bytes()) {
    if (kv_->transfers_inflight()) {
      ++counters_.shortfall_with_pending_transfers;
    }
    tokens = kv_->gpu_free_bytes() / bpt;
    if (tokens <= 0) return 0;
  }
  AllocResult alloc = kv_->allocate(id, tokens, now);
  if (!alloc.ok) return 0;
  return tokens;
}

int64_t Scheduler::admit_prefill(int64_t id, int64_t p, UsecT now,
                                 bool reserved_mode) {
  if (p <= 0) return 0;
  const RequestRecord& r = req(id);
  const bool completes = (p == r.remaining_prefill());
  auto admit = [&](int64_t tokens) {
    if (reserved_mode) {
      return kv_->allocate(id, tokens, now).ok ? tokens : int64_t{0};
    }
    return admit_with_eviction(id, tokens, now);
  };
  if (!completes) return admit(p);

  const int64_t want = p + 1;  // first-token slot rides the final chunk
  const int64_t got = admit(want);
  if (got == want) return p;
  if (got > 0) kv_->rollback_allocations(id);
  if (got <= 1) return 0;
  const int64_t partial = got - 1;  // no completion, no extra slot
  return admit(partial) == partial ? partial : 0;
}

bool Scheduler::reserve_footprint(int64_t id) {
  if (reservations_.count(id)) return true;
  const RequestRecord& r = req(id);
  const int64_t bytes =
      (r.input_tokens + r.output_tokens) * cluster_.kv_bytes_per_token;
  if (reserved_bytes_ + bytes > cluster_.gpu_kv_capacity) return false;
  reserved_bytes_ += bytes;
  reservations_[id] = bytes;
  return true;
}

BuildResult Scheduler::build_batch(UsecT now) {
  if (policy_.is_conserve()) return build_conserve(now);
  return build_chunked(now);
}

BuildResult Scheduler::build_conserve(UsecT now) {
  BuildResult result;
  BatchPlan& plan = result.plan;
  const double budget = effective_tbt_budget_ms();
  const int64_t max_tokens = cluster_.max_batched_tokens;
  int64_t total_p = 0;

  // 1. Every online request with pending decode work, one token each.
  for (int64_t id : online_decoding_) {
    if (total_p >= max_tokens) break;
    RequestRecord& r = req(id);
    if (admit_with_eviction(id, 1, now) < 1) {
      ++counters_.deferred_decodes;
      continue;
    }
    plan.entries.push_back(
        BatchEntry{id, 1, r.context_len(), EntryKind::kDecode, true});
    r.state = RequestState::kRunning;
    total_p += 1;
  }

  // 2. Online prefill chunks sized by the latency model.
  bool first_online_prefill = true;
  for (int64_t id : online_queue_) {
    if (total_p >= max_tokens) break;
    RequestRecord& r = req(id);
    const int64_t cap = max_tokens - total_p;
    int64_t p = can_schedule(coeffs_, plan, r.remaining_prefill(),
                             r.context_len(), budget, cap);
    if (p == 0 && first_online_prefill) {
      // Even a single token would blow the budget; admit a minimum chunk
      // rather than starve the head online request.
      p = std::min({r.remaining_prefill(), policy_.chunk_floor, cap});
      if (p > 0) ++counters_.forced_admissions;
    }
    first_online_prefill = false;
    if (p <= 0) continue;
    const int64_t got = admit_prefill(id, p, now, false);
    if (got <= 0) continue;
    plan.entries.push_back(
        BatchEntry{id, got, r.context_len(), EntryKind::kPrefill, true});
    r.state = RequestState::kRunning;
    total_p += got;
  }

  // 3. Offline work. With no online traffic at all the scheduler switches
  // to the throughput-optimal batch size instead of the latency budget.
  const bool offline_optimized =
      online_queue_.empty() && online_decoding_.empty();
  result.offline_optimized = offline_optimized && has_offline_candidates();

  int64_t throughput_target = 0;
  bool target_set = false;
  auto offline_grant = [&](const RequestRecord& r, int64_t schedulable,
                           int64_t cap) -> int64_t {
    if (!offline_optimized) {
      return can_schedule(coeffs_, plan, schedulable, r.context_len(), budget,
                          cap);
    }
    if (!target_set) {
      throughput_target =
          max_throughput_tokens(coeffs_, r.context_len(), max_tokens);
      target_set = true;
    }
    const int64_t left = throughput_target - total_p;
    return std::clamp<int64_t>(std::min(schedulable, left), 0, cap);
  };

  bool stopped = false;
  auto try_admit_offline = [&](int64_t id) -> bool {
    // Returns false when offline admission should stop altogether.
    RequestRecord& r = req(id);
    const int64_t cap = max_tokens - total_p;
    if (cap <= 0) return false;
    const ResumeCost cost = kv_->resume_cost(id);
    if (cost.host_only_pages > 0) {
      if (!kv_->prefetch_inflight(id)) {
        if (auto job = kv_->start_prefetch(id, now)) {
          result.transfers.push_back(*job);
        }
      }
      return true;  // not schedulable yet, keep scanning
    }
    EntryKind kind;
    int64_t p = 0;
    if (cost.discarded_tokens > 0) {
      const int64_t desired = offline_grant(r, cost.discarded_tokens, cap);
      if (desired <= 0) return false;
      p = kv_->recompute_chunk(id, desired, cap);
      kind = EntryKind::kRecompute;
    } else {
      const int64_t schedulable = r.schedulable_tokens();
      if (schedulable <= 0) return true;
      p = offline_grant(r, schedulable, cap);
      kind = r.decoding() ? EntryKind::kDecode : EntryKind::kPrefill;
    }
    if (p <= 0) return false;
    int64_t got;
    if (kind == EntryKind::kPrefill) {
      got = admit_prefill(id, p, now, false);
    } else {
      got = admit_with_eviction(id, p, now);
      if (kind == EntryKind::kRecompute && got > 0 && got != p) {
        // Recompute re-materializes whole pages; a partial grab cannot be
        // represented, so roll it back and stop.
        kv_->rollback_allocations(id);
        got = 0;
      }
    }
    if (got <= 0) return false;  // memory exhausted
    plan.entries.push_back(BatchEntry{id, got, r.context_len(), kind, false});
    mark_active(id);
    total_p += got;
    return true;
  };

  for (int64_t id : resident_paused_candidates()) {
    if (stopped || total_p >= max_tokens) break;
    if (!try_admit_offline(id)) stopped = true;
  }
  if (!stopped) {
    // Bounded scan; prefetch-pending requests park at the front.
    int64_t scanned = 0;
    std::vector<int64_t> queue_snapshot(offline_queue_.begin(),
                                        offline_queue_.end());
    for (int64_t id : queue_snapshot) {
      if (stopped || total_p >= max_tokens || ++scanned > 128) break;
      const bool in_plan =
          std::any_of(plan.entries.begin(), plan.entries.end(),
                      [&](const BatchEntry& e) { return e.request_id == id; });
      if (in_plan) continue;
      if (!try_admit_offline(id)) {
        stopped = true;
      } else {
        RequestRecord& r = req(id);
        if (r.state == RequestState::kRunning) {
          offline_queue_.erase(
              std::find(offline_queue_.begin(), offline_queue_.end(), id));
        }
      }
    }
  }

  // Background restore for partially evicted paused requests; off the
  // admission path entirely.
  for (const auto& [id, seq] : paused_offline_) {
    if (kv_->fully_resident(id) || kv_->prefetch_inflight(id)) continue;
    if (kv_->resume_cost(id).host_only_pages == 0) continue;
    if (auto job = kv_->start_prefetch(id, now)) {
      result.transfers.push_back(*job);
    }
    break;  // one prefetch kick per build
  }

  plan.predicted_latency_ms = predict(coeffs_, plan);
  return result;
}

BuildResult Scheduler::build_chunked(UsecT now) {
  BuildResult result;
  BatchPlan& plan = result.plan;
  const int64_t chunk =
      std::min(policy_.chunk_size, cluster_.max_batched_tokens);
  int64_t total_p = 0;

  // Online decodes first.
  for (int64_t id : online_decoding_) {
    if (total_p >= chunk) break;
    RequestRecord& r = req(id);
    int64_t got;
    if (policy_.kind == PolicyKind::kNonPreemptive) {
      got = kv_->allocate(id, 1, now).ok ? 1 : 0;
    } else {
      got = admit_with_eviction(id, 1, now);
    }
    if (got < 1) {
      ++counters_.deferred_decodes;
      continue;
    }
    plan.entries.push_back(
        BatchEntry{id, 1, r.context_len(), EntryKind::kDecode, true});
    r.state = RequestState::kRunning;
    total_p += 1;
  }

  // Online prefill fills the remaining chunk space, FIFO.
  for (int64_t id : online_queue_) {
    if (total_p >= chunk) break;
    RequestRecord& r = req(id);
    if (policy_.kind == PolicyKind::kNonPreemptive && !reserve_footprint(id)) {
      break;  // head-of-line: memory is parked on offline reservations
    }
    int64_t p = std::min(r.remaining_prefill(), chunk - total_p);
    const int64_t got =
        admit_prefill(id, p, now, policy_.kind == PolicyKind::kNonPreemptive);
    if (got <= 0) continue;
    plan.entries.push_back(
        BatchEntry{id, got, r.context_len(), EntryKind::kPrefill, true});
    r.state = RequestState::kRunning;
    total_p += got;
  }

  if (policy_.kind == PolicyKind::kOnlineOnly) {
    plan.predicted_latency_ms = predict(coeffs_, plan);
    return result;
  }
  // Sarathi-P pauses all offline work while online prefill is pending.
  if (policy_.kind == PolicyKind::kSarathiPreemptive &&
      !online_queue_.empty()) {
    plan.predicted_latency_ms = predict(coeffs_, plan);
    return result;
  }

  bool stopped = false;
  auto try_admit_offline = [&](int64_t id) -> bool {
    RequestRecord& r = req(id);
    const int64_t cap = chunk - total_p;
    if (cap <= 0) return false;
    EntryKind kind;
    int64_t p;
    const ResumeCost cost = kv_->resume_cost(id);
    if (cost.discarded_tokens > 0) {
      p = kv_->recompute_chunk(id, std::min(cost.discarded_tokens, cap), cap);
      kind = EntryKind::kRecompute;
      if (p <= 0) return false;
    } else {
      p = std::min(r.schedulable_tokens(), cap);
      kind = r.decoding() ? EntryKind::kDecode : EntryKind::kPrefill;
      if (p <= 0) return true;
    }
    const bool reserved_mode = policy_.kind == PolicyKind::kNonPreemptive;
    if (reserved_mode && !reserve_footprint(id)) return false;
    int64_t got;
    if (kind == EntryKind::kPrefill) {
      got = admit_prefill(id, p, now, reserved_mode);
    } else if (reserved_mode) {
      got = kv_->allocate(id, p, now).ok ? p : 0;
    } else {
      got = admit_with_eviction(id, p, now);
      if (kind == EntryKind::kRecompute && got > 0 && got != p) {
        kv_->rollback_allocations(id);
        got = 0;
      }
    }
    if (got <= 0) return false;
    plan.entries.push_back(BatchEntry{id, got, r.context_len(), kind, false});
    mark_active(id);
    total_p += got;
    return true;
  };

  for (int64_t id : resident_paused_candidates()) {
    if (stopped || total_p >= chunk) break;
    if (!try_admit_offline(id)) stopped = true;
  }
  if (!stopped) {
    int64_t scanned = 0;
    std::vector<int64_t> queue_snapshot(offline_queue_.begin(),
                                        offline_queue_.end());
    for (int64_t id : queue_snapshot) {
      if (stopped || total_p >= chunk || ++scanned > 128) break;
      const bool in_plan =
          std::any_of(plan.entries.begin(), plan.entries.end(),
                      [&](const BatchEntry& e) { return e.request_id == id; });
      if (in_plan) continue;
      if (!try_admit_offline(id)) {
        stopped = true;
      } else {
        RequestRecord& r = req(id);
        if (r.state == RequestState::kRunning) {
          offline_queue_.erase(
              std::find(offline_queue_.begin(), offline_queue_.end(), id));
        }
      }
    }
  }

  plan.predicted_latency_ms = predict(coeffs_, plan);
  return result;
}

void Scheduler::on_offline_dropped(const std::vector<int64_t>& ids, UsecT now) {
  for (int64_t id : ids) {
    kv_->rollback_allocations(id);
    park_offline(id, now);
  }
}

std::vector<int64_t> Scheduler::on_iteration_end(const BatchPlan& finished_plan,
                                                 UsecT now) {
  std::vector<int64_t> completed;
  for (const BatchEntry& entry : finished_plan.entries) {
    RequestRecord& r = req(entry.request_id);
    kv_->commit_allocations(entry.request_id);
    switch (entry.kind) {
      case EntryKind::kRecompute:
        r.recompute_pending -= entry.compute_tokens;
        r.recompute_done += entry.compute_tokens;
        break;
      case EntryKind::kPrefill:
        r.prefill_done += entry.compute_tokens;
        if (!r.prefilling()) {
          // The iteration that finishes the last prefill chunk emits the
          // first output token.
          r.first_token_time = now;
          r.decode_done += 1;
          r.token_completion_times.push_back(now);
        }
        break;
      case EntryKind::kDecode:
        r.decode_done += 1;
        r.token_completion_times.push_back(now);
        break;
    }

    if (!r.prefilling() && r.decode_done == r.output_tokens) {
      r.state = RequestState::kFinished;
      kv_->release_request(entry.request_id);
      if (auto it = reservations_.find(entry.request_id);
          it != reservations_.end()) {
        reserved_bytes_ -= it->second;
        reservations_.erase(it);
      }
      paused_offline_.erase(entry.request_id);
      if (entry.online) {
        online_decoding_.erase(std::remove(online_decoding_.begin(),
                                           online_decoding_.end(),
                                           entry.request_id),
                               online_decoding_.end());
        auto qit =
            std::find(online_queue_.begin(), online_queue_.end(), entry.request_id);
        if (qit != online_queue_.end()) online_queue_.erase(qit);
      }
      completed.push_back(entry.request_id);
      continue;
    }

    if (entry.online) {
      if (entry.kind == EntryKind::kPrefill && !r.prefilling()) {
        auto qit = std::find(online_queue_.begin(), online_queue_.end(),
                             entry.request_id);
        if (qit != online_queue_.end()) online_queue_.erase(qit);
        online_decoding_.insert(
            std::upper_bound(online_decoding_.begin(), online_decoding_.end(),
                             entry.request_id),
            entry.request_id);
      }
    } else {
      park_offline(entry.request_id, now);
    }
  }
  return completed;
}

int64_t Scheduler::release_offline_kv_on_demand(int64_t needed_pages,
                                                UsecT now) {
  ReleaseStats stats = kv_->release_offline_pages_on_demand(needed_pages, now);
  for (const auto& [victim, discarded] : stats.discards) {
    req(victim).recompute_pending += discarded;
  }
  return stats.freed_pages;
}

BatchPlan Scheduler::pending_online_plan() const {
  BatchPlan plan;
  for (int64_t id : online_decoding_) {
    const RequestRecord& r = req(id);
    plan.entries.push_back(
        BatchEntry{id, 1, r.context_len(), EntryKind::kDecode, true});
  }
  for (int64_t id : online_queue_) {
    const RequestRecord& r = req(id);
    if (r.remaining_prefill() <= 0) continue;
    plan.entries.push_back(BatchEntry{id, r.remaining_prefill(),
                                      r.context_len(), EntryKind::kPrefill,
                                      true});
  }
  return plan;
}

bool Scheduler::online_work_pending() const {
  return !online_queue_.empty() || !online_decoding_.empty();
}

bool Scheduler::memory_pressure_preempt_needed(UsecT now) const {
  (void)now;
  if (online_queue_.empty()) return false;
  const RequestRecord& head = req(online_queue_.front());
  const int64_t head_tokens =
      std::min(head.remaining_prefill(), policy_.chunk_floor);
  const int64_t needed_pages =
      cluster_.pages_for_tokens(head_tokens) +
      static_cast<int64_t>(online_decoding_.size());
  const int64_t available =
      kv_->gpu_free_pages() + kv_->releasable_offline_pages_now();
  return available < needed_pages;
}

bool Scheduler::has_offline_candidates() const {
  return !paused_offline_.empty() || !offline_queue_.empty();
}

}  // namespace coserve
