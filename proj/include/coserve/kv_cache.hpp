#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coserve/config.hpp"
#include "coserve/time.hpp"

namespace coserve {

enum class PageLocation { kGpuOnly, kHostOnly, kBoth, kDiscarded };

const char* to_string(PageLocation loc);

// Sixteen-token unit of KV state. A page can be partially filled while its
// owner decodes; bytes scale with the filled token count.
struct KvPage {
  int64_t index = 0;        // page number within the owner request
  int64_t token_count = 0;  // filled tokens, <= page_tokens
  bool on_gpu = false;
  int64_t host_tokens = 0;  // tokens with a completed host copy
  bool discarded = false;   // data dropped on both sides, needs recompute
  bool recompute_on_evict = false;  // host pool was full when staged
  int64_t d2h_inflight_to = 0;      // target host_tokens of in-flight D2H
  bool h2d_inflight = false;
  bool evict_on_checkpoint = false;  // drop GPU copy once D2H lands

  PageLocation location() const {
    if (discarded) return PageLocation::kDiscarded;
    if (on_gpu) {
      return host_tokens == token_count ? PageLocation::kBoth
                                        : PageLocation::kGpuOnly;
    }
    return PageLocation::kHostOnly;
  }
};

enum class TransferDirection { kD2H, kH2D };

struct TransferJob {
  int64_t id = 0;
  TransferDirection direction = TransferDirection::kD2H;
  int64_t bytes = 0;
  UsecT enqueue_time = 0;
  UsecT start_time = 0;
  UsecT done_time = 0;
  double transfer_us = 0.0;  // bytes / bandwidth component
  double gather_us = 0.0;    // scatter/gather kernel adder
};

// Bandwidth-limited FIFO lane. Transfers never occupy the compute timeline;
// completion of job j is max(enqueue, previous completion) + duration.
struct TransferChannel {
  TransferDirection direction = TransferDirection::kD2H;
  double bandwidth_bytes_per_s = 0.0;
  double gather_cost_us = 0.0;
  UsecT busy_until = 0;

  TransferJob enqueue(int64_t job_id, int64_t bytes, UsecT now);
};

struct AllocResult {
  bool ok = false;
  int64_t shortfall_pages = 0;
};

struct EvictStats {
  int64_t freed_pages = 0;
  int64_t pending_pages = 0;      // freed when the in-flight D2H lands
  int64_t discarded_tokens = 0;   // future recompute cost
};

struct TransferDoneEffects {
  std::vector<int64_t> became_resident;  // requests now fully GPU-resident
  int64_t freed_pages = 0;               // deferred evictions finalized
};

struct ReleaseStats {
  int64_t freed_pages = 0;
  // Tokens whose only copy was dropped (recompute-on-evict fallback),
  // grouped by owner so the scheduler can grow recompute debts.
  std::vector<std::pair<int64_t, int64_t>> discards;
};

struct ResumeCost {
  int64_t host_only_pages = 0;
  int64_t host_only_bytes = 0;
  int64_t discarded_tokens = 0;
};

// Token-granular KV bookkeeping for every request plus the two transfer
// channels. Single-threaded; advanced only between simulation events.
class KvCacheManager {
 public:
  KvCacheManager() = default;
  KvCacheManager(const ClusterConfig& cluster, bool incremental);

  void register_request(int64_t id, bool online);

  // Allocates pages for n new tokens (re-materializing discarded pages
  // head-first when the request is recomputing). No eviction; the scheduler
  // drives eviction explicitly. Allocations stay pending until committed so
  // a preempted entry can be rolled back without trace.
  AllocResult allocate(int64_t id, int64_t n_tokens, UsecT now);
  void commit_allocations(int64_t id);
  void rollback_allocations(int64_t id);

  // Frees GPU copies of a paused offline request's pages, preferring pages
  // whose host copy is complete (zero-cost drop). Never touches online
  // pages. `max_pages` < 0 means the whole request.
  EvictStats evict_request_gpu(int64_t id, UsecT now, int64_t max_pages = -1);

  // Request-granular path: the entire KV is dropped on both sides and the
  // whole context must be re-prefilled later.
  EvictStats discard_request(int64_t id, UsecT now);

  // Walks paused offline requests (newest pause first) dropping
  // instantly-freeable GPU pages until `needed_pages` are freed. May fall
  // short; pages behind an in-flight checkpoint are armed to drop when the
  // transfer lands.
  ReleaseStats release_offline_pages_on_demand(int64_t needed_pages, UsecT now);

  // Paused offline pages that release_offline_pages_on_demand could free
  // right now, for the memory-pressure preemption trigger.
  int64_t releasable_offline_pages_now() const;

  void stage_checkpoint(int64_t id, int64_t from_token, int64_t to_token);
  std::optional<TransferJob> flush_checkpoints(UsecT now);

  ResumeCost resume_cost(int64_t id) const;
  bool fully_resident(int64_t id) const;
  bool prefetch_inflight(int64_t id) const;
  std::optional<TransferJob> start_prefetch(int64_t id, UsecT now);

  // Recompute chunks re-materialize discarded pages whole. Greedy page
  // prefix: grows while below `desired` and within `cap`; admits at least
  // one page when it fits so recompute always makes progress.
  int64_t recompute_chunk(int64_t id, int64_t desired, int64_t cap) const;

  TransferDoneEffects on_transfer_done(int64_t job_id, UsecT now);

  void on_request_paused(int64_t id, uint64_t pause_seq);
  void on_request_active(int64_t id);
  void release_request(int64_t id);

  int64_t gpu_used_bytes() const { return gpu_used_bytes_; }
  int64_t gpu_free_bytes() const {
    return cluster_.gpu_kv_capacity - gpu_used_bytes_;
  }
  int64_t host_used_bytes() const { return host_used_bytes_; }
  int64_t gpu_free_pages() const {
    return gpu_free_bytes() / page_bytes();
  }
  int64_t page_bytes() const {
    return cluster_.page_tokens * cluster_.kv_bytes_per_token;
  }
  bool transfers_inflight() const { return !jobs_.empty(); }
  int64_t request_gpu_pages(int64_t id) const;
  int64_t covered_tokens(int64_t id) const;
  int64_t pending_append_tokens(int64_t id) const;
  int64_t total_d2h_bytes() const { return total_d2h_bytes_; }
  int64_t total_h2d_bytes() const { return total_h2d_bytes_; }
  int64_t recompute_tagged_tokens() const { return recompute_tagged_tokens_; }

  // Deep recount of both pools plus the per-request partition/coverage
  // invariants. Throws std::logic_error with a description on violation.
  void audit() const;

  std::string page_table_json(int64_t id) const;

 private:
  struct RequestKv {
    bool online = false;
    bool paused = false;
    uint64_t pause_seq = 0;
    std::vector<KvPage> pages;
    int64_t gpu_tokens = 0;  // cached sum for byte accounting
    // Pending (uncommitted) allocation segments: page index, previous
    // token_count, previous discarded flag.
    struct PendingSegment {
      size_t page_index;
      int64_t prev_tokens;
      bool prev_discarded;
      bool prev_on_gpu;
    };
    std::vector<PendingSegment> pending;
    std::vector<int64_t> prefetch_jobs;
  };

  struct StagedDelta {
    int64_t request_id;
    size_t page_index;
    int64_t from_tokens;
    int64_t to_tokens;
  };

  struct JobState {
    TransferJob job;
    std::vector<StagedDelta> deltas;  // D2H payload
    std::vector<std::pair<int64_t, size_t>> prefetch_pages;  // H2D payload
  };

  RequestKv& kv(int64_t id);
  const RequestKv& kv(int64_t id) const;
  int64_t evict_host_bytes(int64_t needed_bytes, UsecT now);
  void drop_gpu_page(RequestKv& r, KvPage& page);

  ClusterConfig cluster_;
  bool incremental_ = true;
  std::map<int64_t, RequestKv> requests_;
  TransferChannel d2h_;
  TransferChannel h2d_;
  std::vector<StagedDelta> staged_;
  std::map<int64_t, JobState> jobs_;
  int64_t next_job_id_ = 1;
  int64_t gpu_used_bytes_ = 0;
  int64_t host_used_bytes_ = 0;
  int64_t total_d2h_bytes_ = 0;
  int64_t total_h2d_bytes_ = 0;
  int64_t recompute_tagged_tokens_ = 0;
  uint64_t host_stamp_ = 0;                 // checkpoint age for host LRU
  std::map<uint64_t, std::pair<int64_t, size_t>> host_age_;  // stamp -> page
};

}  // namespace coserve
