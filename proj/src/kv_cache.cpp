#include "coserve/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace coserve {

const char* to_string(PageLocation loc) {
  switch (loc) {
    case PageLocation::kGpuOnly: return "gpu";
    case PageLocation::kHostOnly: return "host";
    case PageLocation::kBoth: return "both";
    case PageLocation::kDiscarded: return "discarded";
  }
  return "?";
}

TransferJob TransferChannel::enqueue(int64_t job_id, int64_t bytes, UsecT now) {
  TransferJob job;
  job.id = job_id;
  job.direction = direction;
  job.bytes = bytes;
  job.enqueue_time = now;
  job.start_time = std::max(now, busy_until);
  job.transfer_us = static_cast<double>(bytes) / bandwidth_bytes_per_s * 1e6;
  job.gather_us = gather_cost_us;
  job.done_time =
      job.start_time + static_cast<UsecT>(std::llround(job.transfer_us + job.gather_us));
  busy_until = job.done_time;
  return job;
}

KvCacheManager::KvCacheManager(const ClusterConfig& cluster, bool incremental)
    : cluster_(cluster), incremental_(incremental) {
  d2h_.direction = TransferDirection::kD2H;
  d2h_.bandwidth_bytes_per_s = cluster.d2h_bandwidth;
  d2h_.gather_cost_us = cluster.gather_cost_us;
  h2d_.direction = TransferDirection::kH2D;
  h2d_.bandwidth_bytes_per_s = cluster.h2d_bandwidth;
  h2d_.gather_cost_us = cluster.gather_cost_us;
}

KvCacheManager::RequestKv& KvCacheManager::kv(int64_t id) {
  auto it = requests_.find(id);
  if (it == requests_.end()) {
    throw std::logic_error("unknown request id in kv manager");
  }
  return it->second;
}

const KvCacheManager::RequestKv& KvCacheManager::kv(int64_t id) const {
  auto it = requests_.find(id);
  if (it == requests_.end()) {
    throw std::logic_error("unknown request id in kv manager");
  }
  return it->second;
}

void KvCacheManager::register_request(int64_t id, bool online) {
  RequestKv r;
  r.online = online;
  requests_.emplace(id, std::move(r));
}

AllocResult KvCacheManager::allocate(int64_t id, int64_t n_tokens, UsecT now) {
  (void)now;
  if (n_tokens < 1) throw std::invalid_argument("allocate requires n >= 1");
  RequestKv& r = kv(id);
  const int64_t bpt = cluster_.kv_bytes_per_token;

  // Recompute path: re-materialize discarded pages head-first, whole pages.
  auto first_discarded =
      std::find_if(r.pages.begin(), r.pages.end(),
                   [](const KvPage& p) { return p.discarded; });
  if (first_discarded != r.pages.end()) {
    int64_t tokens_left = n_tokens;
    int64_t need_bytes = 0;
    std::vector<size_t> targets;
    for (auto it = first_discarded; it != r.pages.end() && tokens_left > 0;
         ++it) {
      if (!it->discarded) continue;
      targets.push_back(static_cast<size_t>(it - r.pages.begin()));
      tokens_left -= it->token_count;
      need_bytes += it->token_count * bpt;
    }
    if (need_bytes > gpu_free_bytes()) {
      const int64_t short_bytes = need_bytes - gpu_free_bytes();
      return AllocResult{false, (short_bytes + page_bytes() - 1) / page_bytes()};
    }
    for (size_t idx : targets) {
      KvPage& page = r.pages[idx];
      r.pending.push_back(
          RequestKv::PendingSegment{idx, page.token_count, true, false});
      page.discarded = false;
      page.on_gpu = true;
      page.host_tokens = 0;
      page.recompute_on_evict = false;
      gpu_used_bytes_ += page.token_count * bpt;
      r.gpu_tokens += page.token_count;
    }
    return AllocResult{true, 0};
  }

  // Append path: fill the partial tail page, then fresh pages.
  const int64_t need_bytes = n_tokens * bpt;
  if (need_bytes > gpu_free_bytes()) {
    const int64_t short_bytes = need_bytes - gpu_free_bytes();
    return AllocResult{false, (short_bytes + page_bytes() - 1) / page_bytes()};
  }
  int64_t tokens_left = n_tokens;
  if (!r.pages.empty()) {
    KvPage& tail = r.pages.back();
    if (tail.on_gpu && tail.token_count < cluster_.page_tokens) {
      const int64_t add =
          std::min(tokens_left, cluster_.page_tokens - tail.token_count);
      r.pending.push_back(RequestKv::PendingSegment{
          r.pages.size() - 1, tail.token_count, false, true});
      tail.token_count += add;
      gpu_used_bytes_ += add * bpt;
      r.gpu_tokens += add;
      tokens_left -= add;
    }
  }
  while (tokens_left > 0) {
    const int64_t add = std::min(tokens_left, cluster_.page_tokens);
    KvPage page;
    page.index = static_cast<int64_t>(r.pages.size());
    page.token_count = add;
    page.on_gpu = true;
    r.pending.push_back(RequestKv::PendingSegment{r.pages.size(), 0, false, false});
    r.pages.push_back(page);
    gpu_used_bytes_ += add * bpt;
    r.gpu_tokens += add;
    tokens_left -= add;
  }
  return AllocResult{true, 0};
}

void KvCacheManager::commit_allocations(int64_t id) { kv(id).pending.clear(); }

void KvCacheManager::rollback_allocations(int64_t id) {
  RequestKv& r = kv(id);
  const int64_t bpt = cluster_.kv_bytes_per_token;
  // Undo in reverse so tail pages disappear before earlier fills shrink.
  for (auto it = r.pending.rbegin(); it != r.pending.rend(); ++it) {
    if (it->prev_tokens == 0 && !it->prev_discarded && !it->prev_on_gpu &&
        it->page_index == r.pages.size() - 1) {
      KvPage& page = r.pages.back();
      gpu_used_bytes_ -= page.token_count * bpt;
      r.gpu_tokens -= page.token_count;
      r.pages.pop_back();
      continue;
    }
    KvPage& page = r.pages[it->page_index];
    if (it->prev_discarded) {
      gpu_used_bytes_ -= page.token_count * bpt;
      r.gpu_tokens -= page.token_count;
      page.discarded = true;
      page.on_gpu = false;
      page.host_tokens = 0;
    } else {
      const int64_t delta = page.token_count - it->prev_tokens;
      gpu_used_bytes_ -= delta * bpt;
      r.gpu_tokens -= delta;
      page.token_count = it->prev_tokens;
    }
  }
  r.pending.clear();
}

void KvCacheManager::drop_gpu_page(RequestKv& r, KvPage& page) {
  const int64_t bpt = cluster_.kv_bytes_per_token;
  gpu_used_bytes_ -= page.token_count * bpt;
  r.gpu_tokens -= page.token_count;
  page.on_gpu = false;
}

EvictStats KvCacheManager::evict_request_gpu(int64_t id, UsecT now,
                                             int64_t max_pages) {
  (void)now;
  RequestKv& r = kv(id);
  if (r.online) throw std::logic_error("online pages are not evictable");
  EvictStats stats;
  const bool whole = max_pages < 0;
  int64_t quota = whole ? std::numeric_limits<int64_t>::max() : max_pages;

  // Pass 1: host-resident copies drop at zero cost, newest pages first.
  for (auto it = r.pages.rbegin(); it != r.pages.rend() && quota > 0; ++it) {
    KvPage& page = *it;
    if (!page.on_gpu || page.discarded) continue;
    if (page.location() == PageLocation::kBoth) {
      drop_gpu_page(r, page);
      ++stats.freed_pages;
      --quota;
    }
  }
  if (!whole && quota <= 0) return stats;

  // Pass 2: pages mid-checkpoint free when the D2H lands; pages with no
  // host copy fall back to recomputation.
  for (auto it = r.pages.rbegin(); it != r.pages.rend() && quota > 0; ++it) {
    KvPage& page = *it;
    if (!page.on_gpu || page.discarded ||
        page.location() == PageLocation::kBoth) {
      continue;
    }
    if (page.d2h_inflight_to == page.token_count) {
      if (!page.evict_on_checkpoint) {
        page.evict_on_checkpoint = true;
        ++stats.pending_pages;
      }
      continue;
    }
    // GpuOnly with no (complete) checkpoint under way.
    stats.discarded_tokens += page.token_count;
    if (page.host_tokens > 0) {
      host_used_bytes_ -= page.host_tokens * cluster_.kv_bytes_per_token;
      page.host_tokens = 0;
    }
    drop_gpu_page(r, page);
    page.discarded = true;
    page.recompute_on_evict = false;
    ++stats.freed_pages;
    --quota;
  }
  return stats;
}

EvictStats KvCacheManager::discard_request(int64_t id, UsecT now) {
  (void)now;
  RequestKv& r = kv(id);
  if (r.online) throw std::logic_error("online pages are not evictable");
  EvictStats stats;
  const int64_t bpt = cluster_.kv_bytes_per_token;
  for (KvPage& page : r.pages) {
    if (page.discarded) continue;
    if (page.on_gpu) {
      drop_gpu_page(r, page);
      ++stats.freed_pages;
    }
    if (page.host_tokens > 0) {
      host_used_bytes_ -= page.host_tokens * bpt;
      page.host_tokens = 0;
    }
    page.discarded = true;
    page.recompute_on_evict = false;
    page.evict_on_checkpoint = false;
    stats.discarded_tokens += page.token_count;
  }
  return stats;
}

ReleaseStats KvCacheManager::release_offline_pages_on_demand(
    int64_t needed_pages, UsecT now) {
  if (needed_pages <= 0) throw std::invalid_argument("needed_pages must be > 0");
  std::vector<std::pair<uint64_t, int64_t>> victims;  // (pause_seq, id)
  for (const auto& [id, r] : requests_) {
    if (!r.online && r.paused && !prefetch_inflight(id)) {
      victims.emplace_back(r.pause_seq, id);
    }
  }
  std::sort(victims.begin(), victims.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  ReleaseStats stats;
  for (const auto& [seq, id] : victims) {
    if (stats.freed_pages >= needed_pages) break;
    EvictStats ev =
        evict_request_gpu(id, now, needed_pages - stats.freed_pages);
    stats.freed_pages += ev.freed_pages;
    if (ev.discarded_tokens > 0) {
      stats.discards.emplace_back(id, ev.discarded_tokens);
    }
  }
  if (stats.freed_pages < needed_pages) {
    // Still short: arm pending drops behind in-flight checkpoints so the
    // pages free as soon as the transfers land.
    for (const auto& [seq, id] : victims) {
      evict_request_gpu(id, now, needed_pages - stats.freed_pages);
    }
  }
  return stats;
}

int64_t KvCacheManager::releasable_offline_pages_now() const {
  int64_t pages = 0;
  for (const auto& [id, r] : requests_) {
    if (r.online || !r.paused || prefetch_inflight(id)) continue;
    for (const KvPage& page : r.pages) {
      if (!page.on_gpu || page.discarded) continue;
      if (page.location() == PageLocation::kBoth) {
        ++pages;
      } else if (!incremental_ ||
                 (page.recompute_on_evict &&
                  page.d2h_inflight_to != page.token_count)) {
        // Droppable only via the recompute fallback.
        ++pages;
      }
    }
  }
  return pages;
}

void KvCacheManager::stage_checkpoint(int64_t id, int64_t from_token,
                                      int64_t to_token) {
  if (!incremental_) return;
  if (to_token <= from_token) return;
  RequestKv& r = kv(id);
  const int64_t page_tokens = cluster_.page_tokens;
  for (int64_t page_idx = from_token / page_tokens;
       page_idx <= (to_token - 1) / page_tokens; ++page_idx) {
    KvPage& page = r.pages[static_cast<size_t>(page_idx)];
    if (page.discarded || !page.on_gpu) continue;
    const int64_t target =
        std::min(page.token_count, to_token - page_idx * page_tokens);
    const int64_t from = std::max(page.host_tokens, page.d2h_inflight_to);
    if (target <= from) continue;
    staged_.push_back(StagedDelta{id, static_cast<size_t>(page_idx), from, target});
  }
}

int64_t KvCacheManager::evict_host_bytes(int64_t needed_bytes, UsecT now) {
  (void)now;
  const int64_t bpt = cluster_.kv_bytes_per_token;
  int64_t freed = 0;
  auto it = host_age_.begin();
  while (it != host_age_.end() && freed < needed_bytes) {
    const auto [req_id, page_idx] = it->second;
    auto rit = requests_.find(req_id);
    if (rit == requests_.end() || rit->second.online) {
      it = host_age_.erase(it);
      continue;
    }
    RequestKv& r = rit->second;
    if (page_idx >= r.pages.size()) {
      it = host_age_.erase(it);
      continue;
    }
    KvPage& page = r.pages[page_idx];
    if (page.host_tokens == 0 || page.d2h_inflight_to > page.host_tokens ||
        page.h2d_inflight) {
      it = host_age_.erase(it);
      continue;
    }
    freed += page.host_tokens * bpt;
    host_used_bytes_ -= page.host_tokens * bpt;
    page.host_tokens = 0;
    if (page.on_gpu) {
      page.recompute_on_evict = true;
    } else {
      // Host copy was the only copy; the tokens now need recomputation.
      page.discarded = true;
      recompute_tagged_tokens_ += page.token_count;
    }
    it = host_age_.erase(it);
  }
  return freed;
}

std::optional<TransferJob> KvCacheManager::flush_checkpoints(UsecT now) {
  if (staged_.empty()) return std::nullopt;
  const int64_t bpt = cluster_.kv_bytes_per_token;
  std::vector<StagedDelta> accepted;
  int64_t bytes = 0;
  for (const StagedDelta& delta : staged_) {
    auto rit = requests_.find(delta.request_id);
    if (rit == requests_.end()) continue;
    KvPage& page = rit->second.pages[delta.page_index];
    if (page.discarded || !page.on_gpu) continue;
    const int64_t delta_bytes = (delta.to_tokens - delta.from_tokens) * bpt;
    if (host_used_bytes_ + delta_bytes > cluster_.host_kv_capacity) {
      evict_host_bytes(host_used_bytes_ + delta_bytes - cluster_.host_kv_capacity,
                       now);
    }
    if (host_used_bytes_ + delta_bytes > cluster_.host_kv_capacity) {
      // Host pool exhausted: no transfer, fall back to recompute-on-evict.
      page.recompute_on_evict = true;
      recompute_tagged_tokens_ += delta.to_tokens - delta.from_tokens;
      continue;
    }
    host_used_bytes_ += delta_bytes;
    page.d2h_inflight_to = delta.to_tokens;
    bytes += delta_bytes;
    accepted.push_back(delta);
  }
  staged_.clear();
  if (accepted.empty()) return std::nullopt;

  TransferJob job = d2h_.enqueue(next_job_id_++, bytes, now);
  total_d2h_bytes_ += bytes;
  JobState state;
  state.job = job;
  state.deltas = std::move(accepted);
  jobs_.emplace(job.id, std::move(state));
  return job;
}

ResumeCost KvCacheManager::resume_cost(int64_t id) const {
  const RequestKv& r = kv(id);
  ResumeCost cost;
  for (const KvPage& page : r.pages) {
    if (page.discarded) {
      cost.discarded_tokens += page.token_count;
    } else if (!page.on_gpu) {
      ++cost.host_only_pages;
      cost.host_only_bytes += page.token_count * cluster_.kv_bytes_per_token;
    }
  }
  return cost;
}

bool KvCacheManager::fully_resident(int64_t id) const {
  const RequestKv& r = kv(id);
  return std::all_of(r.pages.begin(), r.pages.end(),
                     [](const KvPage& p) { return p.on_gpu && !p.discarded; });
}

bool KvCacheManager::prefetch_inflight(int64_t id) const {
  const RequestKv& r = kv(id);
  return std::any_of(r.pages.begin(), r.pages.end(),
                     [](const KvPage& p) { return p.h2d_inflight; });
}

std::optional<TransferJob> KvCacheManager::start_prefetch(int64_t id,
                                                          UsecT now) {
  RequestKv& r = kv(id);
  const int64_t bpt = cluster_.kv_bytes_per_token;
  std::vector<size_t> targets;
  int64_t bytes = 0;
  for (size_t i = 0; i < r.pages.size(); ++i) {
    KvPage& page = r.pages[i];
    if (page.discarded || page.on_gpu || page.h2d_inflight) continue;
    targets.push_back(i);
    bytes += page.token_count * bpt;
  }
  if (targets.empty()) return std::nullopt;
  if (bytes > gpu_free_bytes()) return std::nullopt;  // deferred

  // GPU bytes are reserved up front so capacity holds while in flight.
  gpu_used_bytes_ += bytes;
  for (size_t i : targets) {
    r.pages[i].h2d_inflight = true;
  }
  TransferJob job = h2d_.enqueue(next_job_id_++, bytes, now);
  total_h2d_bytes_ += bytes;
  JobState state;
  state.job = job;
  for (size_t i : targets) state.prefetch_pages.emplace_back(id, i);
  jobs_.emplace(job.id, std::move(state));
  return job;
}

int64_t KvCacheManager::recompute_chunk(int64_t id, int64_t desired,
                                        int64_t cap) const {
  if (desired <= 0 || cap <= 0) return 0;
  const RequestKv& r = kv(id);
  int64_t tokens = 0;
  for (const KvPage& page : r.pages) {
    if (!page.discarded) continue;
    if (tokens >= desired) break;
    if (tokens + page.token_count > cap) break;
    tokens += page.token_count;
  }
  return tokens;
}

TransferDoneEffects KvCacheManager::on_transfer_done(int64_t job_id, UsecT now) {
  (void)now;
  TransferDoneEffects effects;
  auto jit = jobs_.find(job_id);
  if (jit == jobs_.end()) throw std::logic_error("unknown transfer job");
  JobState& state = jit->second;
  const int64_t bpt = cluster_.kv_bytes_per_token;

  for (const StagedDelta& delta : state.deltas) {
    auto rit = requests_.find(delta.request_id);
    const int64_t delta_bytes = (delta.to_tokens - delta.from_tokens) * bpt;
    if (rit == requests_.end()) {
      host_used_bytes_ -= delta_bytes;  // owner finished mid-flight
      continue;
    }
    RequestKv& r = rit->second;
    KvPage& page = r.pages[delta.page_index];
    if (page.discarded) {
      host_used_bytes_ -= delta_bytes;
      continue;
    }
    page.host_tokens = delta.to_tokens;
    if (page.d2h_inflight_to == delta.to_tokens) page.d2h_inflight_to = 0;
    host_age_.emplace(++host_stamp_,
                      std::make_pair(delta.request_id, delta.page_index));
    if (page.evict_on_checkpoint && page.location() == PageLocation::kBoth) {
      drop_gpu_page(r, page);
      page.evict_on_checkpoint = false;
      ++effects.freed_pages;
    }
  }

  for (const auto& [req_id, page_idx] : state.prefetch_pages) {
    auto rit = requests_.find(req_id);
    if (rit == requests_.end()) continue;
    RequestKv& r = rit->second;
    KvPage& page = r.pages[page_idx];
    page.h2d_inflight = false;
    page.on_gpu = true;  // bytes were reserved at enqueue
    r.gpu_tokens += page.token_count;
  }
  if (!state.prefetch_pages.empty()) {
    const int64_t req_id = state.prefetch_pages.front().first;
    if (requests_.count(req_id) && fully_resident(req_id)) {
      effects.became_resident.push_back(req_id);
    }
  }
  jobs_.erase(jit);
  return effects;
}

void KvCacheManager::on_request_paused(int64_t id, uint64_t pause_seq) {
  RequestKv& r = kv(id);
  r.paused = true;
  r.pause_seq = pause_seq;
}

void KvCacheManager::on_request_active(int64_t id) { kv(id).paused = false; }

void KvCacheManager::release_request(int64_t id) {
  RequestKv& r = kv(id);
  const int64_t bpt = cluster_.kv_bytes_per_token;
  for (KvPage& page : r.pages) {
    if (page.on_gpu) {
      gpu_used_bytes_ -= page.token_count * bpt;
    }
    host_used_bytes_ -= page.host_tokens * bpt;
  }
  requests_.erase(id);
}

int64_t KvCacheManager::request_gpu_pages(int64_t id) const {
  const RequestKv& r = kv(id);
  return static_cast<int64_t>(
      std::count_if(r.pages.begin(), r.pages.end(),
                    [](const KvPage& p) { return p.on_gpu; }));
}

int64_t KvCacheManager::covered_tokens(int64_t id) const {
  const RequestKv& r = kv(id);
  int64_t tokens = 0;
  for (const KvPage& page : r.pages) tokens += page.token_count;
  return tokens;
}

int64_t KvCacheManager::pending_append_tokens(int64_t id) const {
  const RequestKv& r = kv(id);
  int64_t tokens = 0;
  for (const auto& seg : r.pending) {
    if (seg.prev_discarded) continue;  // recompute does not extend coverage
    tokens += r.pages[seg.page_index].token_count - seg.prev_tokens;
  }
  return tokens;
}

void KvCacheManager::audit() const {
  const int64_t bpt = cluster_.kv_bytes_per_token;
  int64_t gpu_recount = 0;
  int64_t host_recount = 0;
  for (const auto& [id, r] : requests_) {
    int64_t gpu_tokens = 0;
    for (size_t i = 0; i < r.pages.size(); ++i) {
      const KvPage& page = r.pages[i];
      if (page.index != static_cast<int64_t>(i)) {
        throw std::logic_error("page index out of order");
      }
      if (page.token_count < 1 || page.token_count > cluster_.page_tokens) {
        throw std::logic_error("page token count out of range");
      }
      if (i + 1 < r.pages.size() && page.token_count != cluster_.page_tokens) {
        throw std::logic_error("interior page is partial");
      }
      if (page.host_tokens > page.token_count) {
        throw std::logic_error("host copy exceeds page fill");
      }
      if (page.discarded && (page.on_gpu || page.host_tokens > 0)) {
        throw std::logic_error("discarded page still holds data");
      }
      if (page.on_gpu) {
        gpu_recount += page.token_count * bpt;
        gpu_tokens += page.token_count;
      } else if (page.h2d_inflight) {
        gpu_recount += page.token_count * bpt;  // prefetch reservation
      } else if (!page.discarded && page.host_tokens != page.token_count) {
        throw std::logic_error("non-resident page lacks full host copy");
      }
      host_recount += page.host_tokens * bpt;
    }
    if (gpu_tokens != r.gpu_tokens) {
      throw std::logic_error("cached gpu token count drifted");
    }
  }
  for (const auto& [job_id, state] : jobs_) {
    for (const StagedDelta& delta : state.deltas) {
      host_recount += (delta.to_tokens - delta.from_tokens) * bpt;
    }
  }
  if (gpu_recount != gpu_used_bytes_) {
    throw std::logic_error("gpu byte accounting drifted");
  }
  if (host_recount != host_used_bytes_) {
    throw std::logic_error("host byte accounting drifted");
  }
  if (gpu_used_bytes_ > cluster_.gpu_kv_capacity) {
    throw std::logic_error("gpu capacity exceeded");
  }
  if (host_used_bytes_ > cluster_.host_kv_capacity) {
    throw std::logic_error("host capacity exceeded");
  }
}

std::string KvCacheManager::page_table_json(int64_t id) const {
  const RequestKv& r = kv(id);
  nlohmann::json doc;
  doc["request"] = id;
  doc["pages"] = nlohmann::json::array();
  int64_t start = 0;
  for (const KvPage& page : r.pages) {
    doc["pages"].push_back({{"range", {start, start + page.token_count}},
                            {"location", to_string(page.location())}});
    start += page.token_count;
  }
  return doc.dump();
}

}  // namespace coserve
