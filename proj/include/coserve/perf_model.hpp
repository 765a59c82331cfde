#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coserve/config.hpp"
#include "coserve/rng.hpp"

namespace coserve {

enum class EntryKind { kPrefill, kDecode, kRecompute };

// One scheduled slice of work: P compute tokens against C context tokens.
struct BatchEntry {
  int64_t request_id = 0;
  int64_t compute_tokens = 0;  // P
  int64_t context_tokens = 0;  // C
  EntryKind kind = EntryKind::kPrefill;
  bool online = false;
};

// Per-iteration token assignment. Attention and memory terms are evaluated
// per entry and summed; the aggregate form is recovered exactly for
// single-entry plans, which is what the profiler measures.
struct BatchPlan {
  std::vector<BatchEntry> entries;
  double predicted_latency_ms = 0.0;

  bool empty() const { return entries.empty(); }
  int64_t total_compute_tokens() const;            // sum P_i
  int64_t total_context_tokens() const;            // sum (P_i + C_i)
  double weighted_context_term() const;            // sum P_i * (P_i + C_i)
  bool has_offline_entries() const;
  bool has_online_entries() const;
  BatchPlan online_only() const;
};

// Fitted coefficients over the basis {P, P*(P+C), (P+C), 1}. k1 and k3 both
// multiply P, so only their sum is identifiable: a_lin = k1 + k3,
// a_quad = k2, a_mem = k4, a_const = k5.
struct PerfCoefficients {
  double a_lin = 0.0;
  double a_quad = 0.0;
  double a_mem = 0.0;
  double a_const = 0.0;
};

struct ProfileSample {
  int64_t compute_tokens = 0;
  int64_t context_tokens = 0;
  double latency_ms = 0.0;
};

// Ground-truth latency for one iteration. Deterministic for a given rng
// state; noise is multiplicative Gaussian clamped so the result stays
// positive. Throws std::invalid_argument on an empty plan.
double oracle_latency(const OracleParams& params, const BatchPlan& plan,
                      Rng& rng);
double oracle_latency(const OracleParams& params, const BatchPlan& plan,
                      uint64_t rng_seed);
double oracle_latency_noise_free(const OracleParams& params,
                                 const BatchPlan& plan);

// P in {1,16,64,256,512,1024,2048,4096} x C in {0,1K,4K,16K,40K,64K}.
std::vector<std::pair<int64_t, int64_t>> default_profile_grid();

// One synthetic single-entry measurement per grid point.
std::vector<ProfileSample> profile(const OracleParams& params,
                                   const std::vector<std::pair<int64_t, int64_t>>& grid,
                                   uint64_t rng_seed);

// Least squares over the four-term basis, coefficients clamped at >= 0 with
// an active-set refit when the unconstrained solution goes negative.
// Throws std::runtime_error("degenerate profiling grid") when the design
// matrix is rank-deficient.
PerfCoefficients fit(const std::vector<ProfileSample>& samples);

double predict(const PerfCoefficients& coeffs, const BatchPlan& plan);

// Alias of predict; named interface the iteration monitor consults.
inline double estimate_exec_time(const PerfCoefficients& coeffs,
                                 const BatchPlan& plan) {
  return predict(coeffs, plan);
}

// Largest p in [0, remaining_tokens] such that adding an entry
// (p, context_tokens) keeps predict(plan) <= budget_ms, additionally capped
// by token_cap. Closed-form inversion of the quadratic in p, verified by a
// forward predict; 0 means the request cannot be added.
int64_t can_schedule(const PerfCoefficients& coeffs, const BatchPlan& plan,
                     int64_t remaining_tokens, int64_t context_tokens,
                     double budget_ms, int64_t token_cap);

// argmax over P in [1, cap] of P / predict(single entry (P, context)).
// Evaluated at the stationary point of the rational function and at both
// endpoints.
int64_t max_throughput_tokens(const PerfCoefficients& coeffs,
                              int64_t context_tokens, int64_t cap);

// JSON document {"grid": [[P,C,ms],...], "coeffs": {...}, "fit_error_p99": x}.
std::string profile_to_json_text(const std::vector<ProfileSample>& samples);
std::vector<ProfileSample> profile_from_json_text(const std::string& text);
std::string fit_result_to_json_text(const std::vector<ProfileSample>& samples,
                                    const PerfCoefficients& coeffs);
PerfCoefficients coefficients_from_json_text(const std::string& text);

}  // namespace coserve
