#include <doctest.h>

#include "coserve/kv_cache.hpp"

using namespace coserve;

namespace {

ClusterConfig small_cluster() {
  ClusterConfig c;
  c.kv_bytes_per_token = 196608;
  c.gpu_kv_capacity = 196608LL * 16 * 64;   // 64 pages
  c.host_kv_capacity = 196608LL * 16 * 256;  // 256 pages
  c.d2h_bandwidth = 38797312000.0;  // "37 GB/s"
  c.h2d_bandwidth = 38797312000.0;
  c.gather_cost_us = 0.0;
  return c;
}

}  // namespace

TEST_CASE("allocation rounds token counts up to pages") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(1, false);
  CHECK(kv.allocate(1, 17, 0).ok);
  kv.commit_allocations(1);
  CHECK(kv.request_gpu_pages(1) == 2);  // 16 + 1
  CHECK(kv.covered_tokens(1) == 17);
  // A 4096-token prefill holds exactly tokens * bytes-per-token.
  KvCacheManager big(ClusterConfig{}, true);
  big.register_request(2, false);
  CHECK(big.allocate(2, 4096, 0).ok);
  CHECK(big.gpu_used_bytes() == 4096LL * 196608);  // 768 MiB
}

TEST_CASE("allocation reports a shortfall when the pool is exactly full") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(1, false);
  CHECK(kv.allocate(1, 64 * 16, 0).ok);
  kv.commit_allocations(1);
  kv.register_request(2, false);
  const AllocResult r = kv.allocate(2, 16, 0);
  CHECK_FALSE(r.ok);
  CHECK(r.shortfall_pages == 1);
}

TEST_CASE("rollback undoes exactly the pending growth") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 30, 0).ok);
  kv.commit_allocations(1);
  const int64_t used = kv.gpu_used_bytes();
  REQUIRE(kv.allocate(1, 40, 0).ok);  // 2 into partial page + new pages
  kv.rollback_allocations(1);
  CHECK(kv.gpu_used_bytes() == used);
  CHECK(kv.covered_tokens(1) == 30);
  kv.audit();
}

TEST_CASE("incremental checkpoint stages one coalesced job per flush") {
  KvCacheManager kv(small_cluster(), true);
  // Eight decode requests, one new token each: a single 1.5 MiB job.
  for (int64_t id = 0; id < 8; ++id) {
    kv.register_request(id, false);
    REQUIRE(kv.allocate(id, 1, 0).ok);
    kv.commit_allocations(id);
    kv.stage_checkpoint(id, 0, 1);
  }
  auto job = kv.flush_checkpoints(0);
  REQUIRE(job.has_value());
  CHECK(job->bytes == 8 * 196608);
  CHECK(job->transfer_us ==
        doctest::Approx(8.0 * 196608 / 38797312000.0 * 1e6));
  CHECK(job->transfer_us < 45.0);  // about 0.04 ms
  CHECK_FALSE(kv.flush_checkpoints(0).has_value());
  kv.on_transfer_done(job->id, job->done_time);
  kv.audit();
}

TEST_CASE("a 2048-token chunk checkpoints in about 6 ms at 64 GB/s") {
  ClusterConfig cluster = small_cluster();
  cluster.gpu_kv_capacity = 196608LL * 4096;
  cluster.d2h_bandwidth = 67108864000.0;  // "64 GB/s"
  KvCacheManager kv(cluster, true);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 2048, 0).ok);
  kv.commit_allocations(1);
  kv.stage_checkpoint(1, 0, 2048);
  auto job = kv.flush_checkpoints(0);
  REQUIRE(job.has_value());
  CHECK(job->bytes == 2048LL * 196608);
  CHECK(job->transfer_us / 1e3 == doctest::Approx(6.0).epsilon(0.001));
  CHECK(job->transfer_us / 1e3 < 10.0);
}

TEST_CASE("transfer channel preserves FIFO completion order") {
  TransferChannel ch;
  ch.direction = TransferDirection::kD2H;
  ch.bandwidth_bytes_per_s = 1e9;
  ch.gather_cost_us = 100.0;
  const TransferJob a = ch.enqueue(1, 1'000'000, 0);  // 1000 us + gather
  const TransferJob b = ch.enqueue(2, 500'000, 0);    // queues behind a
  CHECK(a.done_time == 1100);
  CHECK(b.start_time == a.done_time);
  CHECK(b.done_time == 1100 + 600);
  const TransferJob c = ch.enqueue(3, 1000, 10'000);  // idle channel by then
  CHECK(c.start_time == 10'000);
}

TEST_CASE("eviction drops checkpointed pages instantly and for free") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 10 * 16, 0).ok);
  kv.commit_allocations(1);
  kv.stage_checkpoint(1, 0, 160);
  auto job = kv.flush_checkpoints(0);
  REQUIRE(job.has_value());
  kv.on_transfer_done(job->id, job->done_time);
  kv.on_request_paused(1, 1);

  const EvictStats stats = kv.evict_request_gpu(1, job->done_time + 1);
  CHECK(stats.freed_pages == 10);
  CHECK(stats.pending_pages == 0);
  CHECK(stats.discarded_tokens == 0);
  CHECK(kv.gpu_used_bytes() == 0);
  CHECK(kv.resume_cost(1).host_only_pages == 10);
  kv.audit();
}

TEST_CASE("eviction of pages mid-checkpoint waits for the transfer") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 32, 0).ok);
  kv.commit_allocations(1);
  kv.stage_checkpoint(1, 0, 32);
  auto job = kv.flush_checkpoints(0);
  REQUIRE(job.has_value());
  kv.on_request_paused(1, 1);

  const EvictStats stats = kv.evict_request_gpu(1, 1);
  CHECK(stats.freed_pages == 0);
  CHECK(stats.pending_pages == 2);
  CHECK(kv.request_gpu_pages(1) == 2);
  const TransferDoneEffects effects =
      kv.on_transfer_done(job->id, job->done_time);
  CHECK(effects.freed_pages == 2);
  CHECK(kv.gpu_used_bytes() == 0);
  kv.audit();
}

TEST_CASE("request-granular discard pays a full re-prefill penalty") {
  KvCacheManager kv(small_cluster(), false);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 256, 0).ok);
  kv.commit_allocations(1);
  kv.on_request_paused(1, 1);
  const EvictStats stats = kv.discard_request(1, 0);
  CHECK(stats.discarded_tokens == 256);
  CHECK(kv.gpu_used_bytes() == 0);
  CHECK(kv.resume_cost(1).discarded_tokens == 256);
  kv.audit();
}

TEST_CASE("online pages are never evictable") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(1, true);
  REQUIRE(kv.allocate(1, 16, 0).ok);
  kv.commit_allocations(1);
  CHECK_THROWS_AS(kv.evict_request_gpu(1, 0), std::logic_error);
  CHECK_THROWS_AS(kv.discard_request(1, 0), std::logic_error);
}

TEST_CASE("release on demand walks newest-paused requests first") {
  KvCacheManager kv(small_cluster(), true);
  for (int64_t id = 1; id <= 2; ++id) {
    kv.register_request(id, false);
    REQUIRE(kv.allocate(id, 64, 0).ok);
    kv.commit_allocations(id);
    kv.stage_checkpoint(id, 0, 64);
  }
  auto job = kv.flush_checkpoints(0);
  REQUIRE(job.has_value());
  kv.on_transfer_done(job->id, job->done_time);
  kv.on_request_paused(1, 1);
  kv.on_request_paused(2, 2);

  const ReleaseStats stats = kv.release_offline_pages_on_demand(3, 100);
  CHECK(stats.freed_pages == 3);
  CHECK(stats.discards.empty());
  CHECK(kv.request_gpu_pages(2) == 1);  // newest lost three of four pages
  CHECK(kv.request_gpu_pages(1) == 4);
}

TEST_CASE("prefetch restores host pages in the background") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 50 * 16, 0).ok);
  kv.commit_allocations(1);
  kv.stage_checkpoint(1, 0, 800);
  auto ck = kv.flush_checkpoints(0);
  REQUIRE(ck.has_value());
  kv.on_transfer_done(ck->id, ck->done_time);
  kv.on_request_paused(1, 1);
  kv.evict_request_gpu(1, ck->done_time);
  REQUIRE(kv.resume_cost(1).host_only_pages == 50);

  auto fetch = kv.start_prefetch(1, ck->done_time);
  REQUIRE(fetch.has_value());
  CHECK(fetch->bytes == 50LL * 16 * 196608);
  // 50 pages at "37 GB/s" is about 4 ms.
  CHECK(fetch->transfer_us / 1e3 == doctest::Approx(4.054).epsilon(0.01));
  CHECK(kv.prefetch_inflight(1));
  CHECK_FALSE(kv.fully_resident(1));
  const auto effects = kv.on_transfer_done(fetch->id, fetch->done_time);
  REQUIRE(effects.became_resident.size() == 1);
  CHECK(effects.became_resident[0] == 1);
  CHECK(kv.fully_resident(1));
  kv.audit();
}

TEST_CASE("already resident requests need no prefetch") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 32, 0).ok);
  kv.commit_allocations(1);
  CHECK(kv.fully_resident(1));
  CHECK_FALSE(kv.start_prefetch(1, 0).has_value());
}

TEST_CASE("discarded pages become page-aligned recompute chunks") {
  KvCacheManager kv(small_cluster(), false);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 160, 0).ok);
  kv.commit_allocations(1);
  kv.on_request_paused(1, 1);
  kv.discard_request(1, 0);
  CHECK(kv.resume_cost(1).discarded_tokens == 160);  // 10 pages
  CHECK(kv.recompute_chunk(1, 160, 4096) == 160);
  CHECK(kv.recompute_chunk(1, 100, 4096) == 112);  // rounded up to 7 pages
  CHECK(kv.recompute_chunk(1, 100, 64) == 64);     // capped at 4 pages
  // Re-materialize and verify coverage is unchanged.
  REQUIRE(kv.allocate(1, 160, 0).ok);
  kv.commit_allocations(1);
  CHECK(kv.fully_resident(1));
  CHECK(kv.covered_tokens(1) == 160);
  kv.audit();
}

TEST_CASE("host pool exhaustion falls back to recompute tagging") {
  ClusterConfig cluster = small_cluster();
  cluster.host_kv_capacity = 196608LL * 16;  // a single page fits
  KvCacheManager kv(cluster, true);
  kv.register_request(1, false);
  REQUIRE(kv.allocate(1, 48, 0).ok);
  kv.commit_allocations(1);
  kv.stage_checkpoint(1, 0, 48);
  auto job = kv.flush_checkpoints(0);
  REQUIRE(job.has_value());
  CHECK(job->bytes == 16LL * 196608);  // only one page fit host memory
  CHECK(kv.recompute_tagged_tokens() == 32);
  kv.audit();
}

TEST_CASE("page table snapshots serialize ranges and locations") {
  KvCacheManager kv(small_cluster(), true);
  kv.register_request(7, false);
  REQUIRE(kv.allocate(7, 20, 0).ok);
  kv.commit_allocations(7);
  const std::string json = kv.page_table_json(7);
  CHECK(json.find("\"request\":7") != std::string::npos);
  CHECK(json.find("\"gpu\"") != std::string::npos);
}
