#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coserve/config.hpp"
#include "coserve/request.hpp"

namespace coserve {

// Gamma-process arrival times (seconds) over [0, duration). Inter-arrival
// gaps are i.i.d. Gamma with shape 1/cv^2 and scale 1/(rate * shape).
std::vector<double> gen_gamma_arrivals(double rate, double cv, double duration,
                                       uint64_t seed);

struct TraceEntry {
  UsecT arrival = 0;
  RequestClass cls = RequestClass::kOnline;
  int64_t input_tokens = 0;
  int64_t output_tokens = 0;
};

// JSONL lines of the form {"t":0.0,"class":"online","in":4096,"out":256}.
// Load sorts by arrival with a stable tie-break on line order and rejects
// malformed lines with the offending line number.
std::vector<TraceEntry> load_trace(const std::string& path);
std::vector<TraceEntry> parse_trace_text(const std::string& text);
void save_trace(const std::vector<TraceEntry>& entries, const std::string& path);
std::string trace_to_text(const std::vector<TraceEntry>& entries);

// (input, output) pairs, one JSON object {"in":..,"out":..} per line.
// Pairs are resampled jointly to preserve the in/out correlation.
std::vector<std::pair<int64_t, int64_t>> load_lengths_file(const std::string& path);

std::vector<TraceEntry> generate_online_trace(const OnlineWorkload& spec,
                                              uint64_t seed);

// Offline backlog requests all arrive at t = 0.
std::vector<TraceEntry> generate_offline_backlog(const OfflineWorkload& spec,
                                                 uint64_t seed);

}  // namespace coserve
