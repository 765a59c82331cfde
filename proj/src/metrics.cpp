#include "coserve/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace coserve {

double ttft_seconds(const RequestRecord& req) {
  if (!req.first_token_time.has_value()) {
    throw std::invalid_argument("request produced no token");
  }
  return sec_from_usec(*req.first_token_time - req.arrival_time);
}

std::vector<double> tbt_samples_seconds(const RequestRecord& req) {
  std::vector<double> gaps;
  const auto& times = req.token_completion_times;
  if (times.size() < 2) return gaps;
  gaps.reserve(times.size() - 1);
  for (size_t i = 1; i < times.size(); ++i) {
    gaps.push_back(sec_from_usec(times[i] - times[i - 1]));
  }
  return gaps;
}

double offline_throughput_tokens_per_s(
    const std::map<int64_t, RequestRecord>& requests, double horizon_s) {
  if (horizon_s <= 0) throw std::invalid_argument("horizon must be positive");
  int64_t tokens = 0;
  for (const auto& [id, r] : requests) {
    if (r.cls != RequestClass::kOffline) continue;
    tokens += r.prefill_done + r.decode_done;
  }
  return static_cast<double>(tokens) / horizon_s;
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) return 0.0;
  std::sort(samples.begin(), samples.end());
  const size_t n = samples.size();
  size_t rank = static_cast<size_t>(std::ceil(q * static_cast<double>(n)));
  rank = std::min(std::max<size_t>(rank, 1), n);
  return samples[rank - 1];
}

MetricsReport build_report(const std::map<int64_t, RequestRecord>& requests,
                           const SloConfig& slo, double horizon_s,
                           const RunCounters& counters) {
  MetricsReport report;
  report.horizon_s = horizon_s;
  report.forced_admissions = counters.forced_admissions;
  report.preemptions = counters.preemptions;
  report.d2h_bytes = counters.d2h_bytes;
  report.h2d_bytes = counters.h2d_bytes;
  report.compute_stalled_by_transfers = counters.compute_stalled_by_transfers;
  report.deferred_decodes = counters.deferred_decodes;
  report.offline_drained = counters.offline_drained;

  std::vector<double> ttfts;
  std::vector<double> tbts;
  int64_t online_tokens = 0;
  for (const auto& [id, r] : requests) {
    if (r.cls == RequestClass::kOffline) {
      if (r.finished()) ++report.offline_finished;
      report.recomputed_tokens += r.recompute_done;
      continue;
    }
    online_tokens += r.prefill_done + r.decode_done;
    if (r.finished()) ++report.online_finished;
    if (r.first_token_time.has_value()) {
      ttfts.push_back(ttft_seconds(r));
    } else {
      ++report.ttft_unfinished;
    }
    const auto gaps = tbt_samples_seconds(r);
    tbts.insert(tbts.end(), gaps.begin(), gaps.end());
  }

  report.p50_ttft_s = percentile(ttfts, 0.50);
  report.p90_ttft_s = percentile(ttfts, 0.90);
  report.p99_ttft_s = percentile(ttfts, 0.99);
  report.max_ttft_s = ttfts.empty() ? 0.0 : *std::max_element(ttfts.begin(), ttfts.end());
  report.p50_tbt_s = percentile(tbts, 0.50);
  report.p90_tbt_s = percentile(tbts, 0.90);
  report.p99_tbt_s = percentile(tbts, 0.99);
  report.max_tbt_s = tbts.empty() ? 0.0 : *std::max_element(tbts.begin(), tbts.end());

  const double ttft_slo = slo.ttft_slo_s * slo.scale;
  const double tbt_slo = slo.tbt_slo_s * slo.scale;
  if (!ttfts.empty()) {
    const auto ok = std::count_if(ttfts.begin(), ttfts.end(),
                                  [&](double v) { return v <= ttft_slo; });
    report.ttft_attainment =
        static_cast<double>(ok) / static_cast<double>(ttfts.size());
  }
  if (!tbts.empty()) {
    const auto ok = std::count_if(tbts.begin(), tbts.end(),
                                  [&](double v) { return v <= tbt_slo; });
    report.tbt_attainment =
        static_cast<double>(ok) / static_cast<double>(tbts.size());
  }

  report.offline_throughput_tok_s =
      offline_throughput_tokens_per_s(requests, horizon_s);
  report.online_throughput_tok_s =
      static_cast<double>(online_tokens) / horizon_s;
  return report;
}

std::string MetricsReport::to_json_text() const {
  nlohmann::json doc;
  doc["ttft"] = {{"p50", p50_ttft_s}, {"p90", p90_ttft_s},
                 {"p99", p99_ttft_s}, {"max", max_ttft_s}};
  doc["tbt"] = {{"p50", p50_tbt_s}, {"p90", p90_tbt_s},
                {"p99", p99_tbt_s}, {"max", max_tbt_s}};
  doc["ttft_attainment"] = ttft_attainment;
  doc["tbt_attainment"] = tbt_attainment;
  doc["offline_throughput"] = offline_throughput_tok_s;
  doc["online_throughput"] = online_throughput_tok_s;
  doc["forced_admissions"] = forced_admissions;
  doc["preemptions"] = preemptions;
  doc["recomputed_tokens"] = recomputed_tokens;
  doc["transferred_bytes"] = {{"d2h", d2h_bytes}, {"h2d", h2d_bytes}};
  doc["online_finished"] = online_finished;
  doc["offline_finished"] = offline_finished;
  doc["ttft_unfinished"] = ttft_unfinished;
  doc["compute_stalled_by_transfers"] = compute_stalled_by_transfers;
  doc["deferred_decodes"] = deferred_decodes;
  doc["offline_drained"] = offline_drained;
  doc["horizon_s"] = horizon_s;
  return doc.dump(2) + "\n";
}

std::string timeseries_csv(const std::map<int64_t, RequestRecord>& requests,
                           const std::vector<std::pair<UsecT, int64_t>>&
                               offline_commits,
                           double horizon_s) {
  constexpr double kBucketS = 5.0;
  const size_t buckets =
      static_cast<size_t>(std::ceil(horizon_s / kBucketS)) + 1;
  std::vector<std::vector<double>> ttft_by_bucket(buckets);
  std::vector<std::vector<double>> tbt_by_bucket(buckets);
  std::vector<int64_t> offline_by_bucket(buckets, 0);

  auto bucket_of = [&](UsecT t) {
    size_t b = static_cast<size_t>(sec_from_usec(t) / kBucketS);
    return std::min(b, buckets - 1);
  };

  for (const auto& [id, r] : requests) {
    if (r.cls != RequestClass::kOnline) continue;
    if (r.first_token_time.has_value()) {
      ttft_by_bucket[bucket_of(*r.first_token_time)].push_back(ttft_seconds(r));
    }
    const auto& times = r.token_completion_times;
    for (size_t i = 1; i < times.size(); ++i) {
      tbt_by_bucket[bucket_of(times[i])].push_back(
          sec_from_usec(times[i] - times[i - 1]));
    }
  }
  for (const auto& [t, tokens] : offline_commits) {
    offline_by_bucket[bucket_of(t)] += tokens;
  }

  std::ostringstream out;
  out << "t,p99_ttft_5s,p99_tbt_5s,offline_tput_5s\n";
  char buf[96];
  for (size_t b = 0; b < buckets; ++b) {
    const double t = kBucketS * static_cast<double>(b + 1);
    std::snprintf(buf, sizeof(buf), "%.1f", t);
    out << buf << ",";
    if (!ttft_by_bucket[b].empty()) {
      std::snprintf(buf, sizeof(buf), "%.6f", percentile(ttft_by_bucket[b], 0.99));
      out << buf;
    }
    out << ",";
    if (!tbt_by_bucket[b].empty()) {
      std::snprintf(buf, sizeof(buf), "%.6f", percentile(tbt_by_bucket[b], 0.99));
      out << buf;
    }
    out << ",";
    std::snprintf(buf, sizeof(buf), "%.1f",
                  static_cast<double>(offline_by_bucket[b]) / kBucketS);
    out << buf << "\n";
  }
  return out.str();
}

std::string requests_csv(const std::map<int64_t, RequestRecord>& requests,
                         const std::string& tbt_path) {
  std::ostringstream out;
  out << "id,class,arrival,ttft,finish,tbt_path\n";
  for (const auto& [id, r] : requests) {
    out << id << "," << to_string(r.cls) << "," << format_sec(r.arrival_time)
        << ",";
    if (r.first_token_time.has_value()) {
      out << format_sec(*r.first_token_time - r.arrival_time);
    }
    out << ",";
    if (r.finished() && !r.token_completion_times.empty()) {
      out << format_sec(r.token_completion_times.back());
    }
    out << "," << tbt_path << "\n";
  }
  return out.str();
}

std::string tbt_samples_csv(const std::map<int64_t, RequestRecord>& requests) {
  std::ostringstream out;
  out << "request_id,token_index,tbt\n";
  for (const auto& [id, r] : requests) {
    const auto& times = r.token_completion_times;
    for (size_t i = 1; i < times.size(); ++i) {
      out << id << "," << i + 1 << "," << format_sec(times[i] - times[i - 1])
          << "\n";
    }
  }
  return out.str();
}

}  // namespace coserve
