#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "coserve/time.hpp"

namespace coserve {

enum class RequestClass { kOnline, kOffline };

enum class RequestState { kQueued, kRunning, kPaused, kFinished };

const char* to_string(RequestClass c);
const char* to_string(RequestState s);

// One inference request. KV state is append-only: (prefill_done, decode_done)
// never decreases, even across preemption and eviction. Work lost to a
// request-granular eviction is tracked in recompute_pending instead, so
// useful progress and wasted recompute stay separable.
struct RequestRecord {
  int64_t id = 0;
  RequestClass cls = RequestClass::kOnline;
  UsecT arrival_time = 0;
  int64_t input_tokens = 0;
  int64_t output_tokens = 0;

  int64_t prefill_done = 0;
  int64_t decode_done = 0;
  RequestState state = RequestState::kQueued;
  std::optional<UsecT> first_token_time;
  std::vector<UsecT> token_completion_times;  // one per generated token

  // Tokens whose KV must be re-materialized before progress can resume
  // (request-granular eviction / recompute-on-evict fallback).
  int64_t recompute_pending = 0;
  int64_t recompute_done = 0;

  int64_t context_len() const { return prefill_done + decode_done; }
  int64_t remaining_prefill() const { return input_tokens - prefill_done; }
  int64_t remaining_decode() const { return output_tokens - decode_done; }
  bool prefilling() const { return prefill_done < input_tokens; }
  bool decoding() const {
    return prefill_done == input_tokens && decode_done < output_tokens;
  }
  bool finished() const { return state == RequestState::kFinished; }

  // Compute tokens this request can accept in one iteration: recompute work
  // first, then prefill chunks, then a single decode token.
  int64_t schedulable_tokens() const {
    if (recompute_pending > 0) return recompute_pending;
    if (prefilling()) return remaining_prefill();
    if (decoding()) return 1;
    return 0;
  }
};

}  // namespace coserve
