#include "coserve/perf_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace coserve {

using nlohmann::json;

int64_t BatchPlan::total_compute_tokens() const {
  int64_t total = 0;
  for (const auto& e : entries) total += e.compute_tokens;
  return total;
}

int64_t BatchPlan::total_context_tokens() const {
  int64_t total = 0;
  for (const auto& e : entries) total += e.compute_tokens + e.context_tokens;
  return total;
}

double BatchPlan::weighted_context_term() const {
  double total = 0.0;
  for (const auto& e : entries) {
    total += static_cast<double>(e.compute_tokens) *
             static_cast<double>(e.compute_tokens + e.context_tokens);
  }
  return total;
}

bool BatchPlan::has_offline_entries() const {
  return std::any_of(entries.begin(), entries.end(),
                     [](const BatchEntry& e) { return !e.online; });
}

bool BatchPlan::has_online_entries() const {
  return std::any_of(entries.begin(), entries.end(),
                     [](const BatchEntry& e) { return e.online; });
}

BatchPlan BatchPlan::online_only() const {
  BatchPlan out;
  for (const auto& e : entries) {
    if (e.online) out.entries.push_back(e);
  }
  return out;
}

double oracle_latency_noise_free(const OracleParams& params,
                                 const BatchPlan& plan) {
  if (plan.empty()) throw std::invalid_argument("empty batch");
  const double p = static_cast<double>(plan.total_compute_tokens());
  const double latency = (params.k1 + params.k3) * p +
                         params.k2 * plan.weighted_context_term() +
                         params.k4 * static_cast<double>(plan.total_context_tokens()) +
                         params.k5;
  return latency;
}

namespace {

// Box-Muller on explicit 53-bit uniforms; keeps the noise stream independent
// of the standard library's unspecified normal_distribution algorithm.
double standard_normal(Rng& rng) {
  const double u1 =
      (static_cast<double>(rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  const double u2 =
      (static_cast<double>(rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

double oracle_latency(const OracleParams& params, const BatchPlan& plan,
                      Rng& rng) {
  double latency = oracle_latency_noise_free(params, plan);
  if (params.noise_cv > 0.0) {
    const double eps = standard_normal(rng) * params.noise_cv;
    latency *= (1.0 + eps);
  }
  const double floor = 1e-9;
  return std::max(latency, floor);
}

double oracle_latency(const OracleParams& params, const BatchPlan& plan,
                      uint64_t rng_seed) {
  Rng rng(rng_seed);
  return oracle_latency(params, plan, rng);
}

std::vector<std::pair<int64_t, int64_t>> default_profile_grid() {
  const std::array<int64_t, 8> p_values{1, 16, 64, 256, 512, 1024, 2048, 4096};
  const std::array<int64_t, 6> c_values{0, 1024, 4096, 16384, 40960, 65536};
  std::vector<std::pair<int64_t, int64_t>> grid;
  grid.reserve(p_values.size() * c_values.size());
  for (int64_t p : p_values) {
    for (int64_t c : c_values) grid.emplace_back(p, c);
  }
  return grid;
}

std::vector<ProfileSample> profile(
    const OracleParams& params,
    const std::vector<std::pair<int64_t, int64_t>>& grid, uint64_t rng_seed) {
  if (grid.empty()) throw std::invalid_argument("empty profiling grid");
  Rng rng(rng_seed);
  std::vector<ProfileSample> samples;
  samples.reserve(grid.size());
  for (const auto& [p, c] : grid) {
    if (p < 1) throw std::invalid_argument("profiling grid requires P >= 1");
    BatchPlan plan;
    plan.entries.push_back(BatchEntry{0, p, c, EntryKind::kPrefill, false});
    samples.push_back(ProfileSample{p, c, oracle_latency(params, plan, rng)});
  }
  return samples;
}

namespace {

// Column-scaled Householder QR least squares on the (possibly reduced)
// basis. The normal equations are too ill-conditioned for the 1e-9 recovery
// target once P*(P+C) reaches ~1e8.
bool solve_least_squares(const std::vector<std::array<double, 4>>& rows,
                         const std::vector<double>& rhs,
                         const std::vector<int>& active,
                         std::array<double, 4>* solution) {
  const size_t m = rows.size();
  const size_t n = active.size();
  std::vector<double> a(m * n);
  std::array<double, 4> col_scale{1, 1, 1, 1};
  for (size_t j = 0; j < n; ++j) {
    double max_abs = 0.0;
    for (size_t i = 0; i < m; ++i) {
      max_abs = std::max(max_abs, std::fabs(rows[i][active[j]]));
    }
    if (max_abs == 0.0) return false;
    col_scale[j] = max_abs;
    for (size_t i = 0; i < m; ++i) {
      a[i * n + j] = rows[i][active[j]] / max_abs;
    }
  }
  std::vector<double> b = rhs;

  for (size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    for (size_t i = k; i < m; ++i) norm += a[i * n + k] * a[i * n + k];
    norm = std::sqrt(norm);
    if (norm < 1e-12) return false;  // rank deficient
    double alpha = (a[k * n + k] > 0) ? -norm : norm;
    std::vector<double> v(m, 0.0);
    v[k] = a[k * n + k] - alpha;
    for (size_t i = k + 1; i < m; ++i) v[i] = a[i * n + k];
    double vtv = 0.0;
    for (size_t i = k; i < m; ++i) vtv += v[i] * v[i];
    if (vtv < 1e-300) return false;
    for (size_t j = k; j < n; ++j) {
      double dot = 0.0;
      for (size_t i = k; i < m; ++i) dot += v[i] * a[i * n + j];
      const double factor = 2.0 * dot / vtv;
      for (size_t i = k; i < m; ++i) a[i * n + j] -= factor * v[i];
    }
    double dot = 0.0;
    for (size_t i = k; i < m; ++i) dot += v[i] * b[i];
    const double factor = 2.0 * dot / vtv;
    for (size_t i = k; i < m; ++i) b[i] -= factor * v[i];
  }

  std::array<double, 4> x{0, 0, 0, 0};
  for (size_t jj = n; jj-- > 0;) {
    double sum = b[jj];
    for (size_t j = jj + 1; j < n; ++j) sum -= a[jj * n + j] * x[j];
    if (std::fabs(a[jj * n + jj]) < 1e-12) return false;
    x[jj] = sum / a[jj * n + jj];
  }

  solution->fill(0.0);
  for (size_t j = 0; j < n; ++j) {
    (*solution)[active[j]] = x[j] / col_scale[j];
  }
  return true;
}

}  // namespace

PerfCoefficients fit(const std::vector<ProfileSample>& samples) {
  if (samples.size() < 4) {
    throw std::runtime_error("degenerate profiling grid");
  }
  std::vector<std::array<double, 4>> rows;
  std::vector<double> rhs;
  rows.reserve(samples.size());
  rhs.reserve(samples.size());
  for (const auto& s : samples) {
    const double p = static_cast<double>(s.compute_tokens);
    const double pc = static_cast<double>(s.compute_tokens + s.context_tokens);
    rows.push_back({p, p * pc, pc, 1.0});
    rhs.push_back(s.latency_ms);
  }

  std::vector<int> active{0, 1, 2, 3};
  std::array<double, 4> x{};
  while (true) {
    if (!solve_least_squares(rows, rhs, active, &x)) {
      throw std::runtime_error("degenerate profiling grid");
    }
    // Drop the most negative coefficient and refit until all remaining
    // coefficients are non-negative.
    int worst = -1;
    double worst_value = -1e-12;
    for (int idx : active) {
      if (x[idx] < worst_value) {
        worst_value = x[idx];
        worst = idx;
      }
    }
    if (worst < 0) break;
    active.erase(std::remove(active.begin(), active.end(), worst),
                 active.end());
    if (active.empty()) {
      x.fill(0.0);
      break;
    }
  }

  PerfCoefficients coeffs;
  coeffs.a_lin = std::max(0.0, x[0]);
  coeffs.a_quad = std::max(0.0, x[1]);
  coeffs.a_mem = std::max(0.0, x[2]);
  coeffs.a_const = std::max(0.0, x[3]);
  return coeffs;
}

double predict(const PerfCoefficients& coeffs, const BatchPlan& plan) {
  if (plan.empty()) return 0.0;  // no iteration dispatched
  return coeffs.a_lin * static_cast<double>(plan.total_compute_tokens()) +
         coeffs.a_quad * plan.weighted_context_term() +
         coeffs.a_mem * static_cast<double>(plan.total_context_tokens()) +
         coeffs.a_const;
}

namespace {

double predict_with_entry(const PerfCoefficients& coeffs,
                          const BatchPlan& plan, int64_t p, int64_t context) {
  BatchPlan extended = plan;
  extended.entries.push_back(
      BatchEntry{-1, p, context, EntryKind::kPrefill, false});
  return predict(coeffs, extended);
}

}  // namespace

int64_t can_schedule(const PerfCoefficients& coeffs, const BatchPlan& plan,
                     int64_t remaining_tokens, int64_t context_tokens,
                     double budget_ms, int64_t token_cap) {
  const int64_t cap = std::min(remaining_tokens, token_cap);
  if (cap <= 0) return 0;

  // Adding entry (p, C) adds
  //   a_quad * p^2 + (a_lin + a_quad*C + a_mem) * p + a_mem*C
  // so solve a*p^2 + b*p + c0 <= 0 for the largest integer p.
  const double current = predict(coeffs, plan);
  const double ctx = static_cast<double>(context_tokens);
  const double a = coeffs.a_quad;
  const double b = coeffs.a_lin + coeffs.a_quad * ctx + coeffs.a_mem;
  const double base = plan.empty() ? coeffs.a_const : current;
  const double c0 = base + coeffs.a_mem * ctx - budget_ms;

  int64_t candidate;
  if (a > 0.0) {
    const double disc = b * b - 4.0 * a * c0;
    if (disc < 0.0) {
      candidate = 0;
    } else {
      candidate = static_cast<int64_t>(
          std::floor((-b + std::sqrt(disc)) / (2.0 * a)));
    }
  } else if (b > 0.0) {
    const double root = -c0 / b;
    candidate = root <= 0.0 ? 0
                            : static_cast<int64_t>(std::floor(std::min(
                                  root, static_cast<double>(cap))));
  } else {
    // Tokens are free under this model; only the constant term matters.
    candidate = (c0 <= 0.0) ? cap : 0;
  }
  candidate = std::clamp<int64_t>(candidate, 0, cap);

  // One forward verification plus a rounding-error nudge of at most a few
  // steps in either direction; the root is accurate to ~1 ulp.
  while (candidate > 0 &&
         predict_with_entry(coeffs, plan, candidate, context_tokens) >
             budget_ms) {
    --candidate;
  }
  while (candidate < cap &&
         predict_with_entry(coeffs, plan, candidate + 1, context_tokens) <=
             budget_ms) {
    ++candidate;
  }
  return candidate;
}

int64_t max_throughput_tokens(const PerfCoefficients& coeffs,
                              int64_t context_tokens, int64_t cap) {
  if (cap < 1) throw std::invalid_argument("cap must be >= 1");
  const double ctx = static_cast<double>(context_tokens);
  const double alpha = coeffs.a_quad;
  const double gamma = coeffs.a_mem * ctx + coeffs.a_const;

  auto throughput = [&](int64_t p) {
    BatchPlan plan;
    plan.entries.push_back(
        BatchEntry{0, p, context_tokens, EntryKind::kPrefill, false});
    const double latency = predict(coeffs, plan);
    if (latency <= 0.0) return std::numeric_limits<double>::infinity();
    return static_cast<double>(p) / latency;
  };

  if (alpha <= 0.0) {
    // Throughput is monotone non-decreasing in P.
    return cap;
  }
  // d/dP [P / (alpha P^2 + beta P + gamma)] = 0 at P* = sqrt(gamma/alpha).
  std::vector<int64_t> candidates{1, cap};
  if (gamma > 0.0) {
    const double stationary = std::sqrt(gamma / alpha);
    const int64_t lo = static_cast<int64_t>(std::floor(stationary));
    candidates.push_back(std::clamp<int64_t>(lo, 1, cap));
    candidates.push_back(std::clamp<int64_t>(lo + 1, 1, cap));
  }
  int64_t best = 1;
  double best_rate = -1.0;
  for (int64_t p : candidates) {
    const double rate = throughput(p);
    if (rate > best_rate || (rate == best_rate && p > best)) {
      best_rate = rate;
      best = p;
    }
  }
  return best;
}

std::string profile_to_json_text(const std::vector<ProfileSample>& samples) {
  json doc;
  doc["grid"] = json::array();
  for (const auto& s : samples) {
    doc["grid"].push_back({s.compute_tokens, s.context_tokens, s.latency_ms});
  }
  return doc.dump(2) + "\n";
}

std::vector<ProfileSample> profile_from_json_text(const std::string& text) {
  json doc = json::parse(text);
  if (!doc.contains("grid") || !doc["grid"].is_array()) {
    throw std::runtime_error("profile document missing \"grid\" array");
  }
  std::vector<ProfileSample> samples;
  for (const auto& row : doc["grid"]) {
    if (!row.is_array() || row.size() != 3) {
      throw std::runtime_error("profile grid rows must be [P, C, ms]");
    }
    samples.push_back(ProfileSample{row[0].get<int64_t>(),
                                    row[1].get<int64_t>(),
                                    row[2].get<double>()});
  }
  return samples;
}

std::string fit_result_to_json_text(const std::vector<ProfileSample>& samples,
                                    const PerfCoefficients& coeffs) {
  json doc;
  doc["grid"] = json::array();
  double worst = 0.0;
  std::vector<double> rel_errors;
  for (const auto& s : samples) {
    doc["grid"].push_back({s.compute_tokens, s.context_tokens, s.latency_ms});
    BatchPlan plan;
    plan.entries.push_back(BatchEntry{0, s.compute_tokens, s.context_tokens,
                                      EntryKind::kPrefill, false});
    const double predicted = predict(coeffs, plan);
    if (s.latency_ms > 0.0) {
      rel_errors.push_back(std::fabs(predicted - s.latency_ms) / s.latency_ms);
    }
  }
  std::sort(rel_errors.begin(), rel_errors.end());
  if (!rel_errors.empty()) {
    const size_t rank = static_cast<size_t>(
        std::ceil(0.99 * static_cast<double>(rel_errors.size())));
    worst = rel_errors[std::min(rel_errors.size(), std::max<size_t>(rank, 1)) - 1];
  }
  doc["coeffs"] = {{"a_lin", coeffs.a_lin},
                   {"a_quad", coeffs.a_quad},
                   {"a_mem", coeffs.a_mem},
                   {"a_const", coeffs.a_const}};
  doc["fit_error_p99"] = worst;
  return doc.dump(2) + "\n";
}

PerfCoefficients coefficients_from_json_text(const std::string& text) {
  json doc = json::parse(text);
  const json& c = doc.contains("coeffs") ? doc["coeffs"] : doc;
  PerfCoefficients coeffs;
  coeffs.a_lin = c.at("a_lin").get<double>();
  coeffs.a_quad = c.at("a_quad").get<double>();
  coeffs.a_mem = c.at("a_mem").get<double>();
  coeffs.a_const = c.at("a_const").get<double>();
  return coeffs;
}

}  // namespace coserve
