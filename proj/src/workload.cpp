#include "coserve/workload.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "coserve/rng.hpp"

namespace coserve {

using nlohmann::json;

std::vector<double> gen_gamma_arrivals(double rate, double cv, double duration,
                                       uint64_t seed) {
  if (rate <= 0 || cv <= 0 || duration <= 0) {
    throw std::invalid_argument("rate, cv and duration must be positive");
  }
  const double shape = 1.0 / (cv * cv);
  const double scale = 1.0 / (rate * shape);
  Rng rng(seed);
  std::gamma_distribution<double> gap(shape, scale);
  std::vector<double> arrivals;
  double t = 0.0;
  while (true) {
    t += gap(rng);
    if (t >= duration) break;
    arrivals.push_back(t);
  }
  return arrivals;
}

namespace {

RequestClass class_from_string(const std::string& s, size_t line_no) {
  if (s == "online") return RequestClass::kOnline;
  if (s == "offline") return RequestClass::kOffline;
  throw std::runtime_error("trace line " + std::to_string(line_no) +
                           ": unknown class \"" + s + "\"");
}

}  // namespace

std::vector<TraceEntry> parse_trace_text(const std::string& text) {
  std::vector<TraceEntry> entries;
  std::istringstream stream(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("trace line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    if (!obj.contains("t") || !obj.contains("class") || !obj.contains("in") ||
        !obj.contains("out")) {
      throw std::runtime_error("trace line " + std::to_string(line_no) +
                               ": missing field (need t, class, in, out)");
    }
    TraceEntry entry;
    entry.arrival = usec_from_sec(obj["t"].get<double>());
    entry.cls = class_from_string(obj["class"].get<std::string>(), line_no);
    entry.input_tokens = obj["in"].get<int64_t>();
    entry.output_tokens = obj["out"].get<int64_t>();
    if (entry.arrival < 0) {
      throw std::runtime_error("trace line " + std::to_string(line_no) +
                               ": negative arrival time");
    }
    if (entry.input_tokens < 1 || entry.output_tokens < 1) {
      throw std::runtime_error("trace line " + std::to_string(line_no) +
                               ": token counts must be >= 1");
    }
    entries.push_back(entry);
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const TraceEntry& a, const TraceEntry& b) {
                     return a.arrival < b.arrival;
                   });
  return entries;
}

std::vector<TraceEntry> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_trace_text(buf.str());
}

std::string trace_to_text(const std::vector<TraceEntry>& entries) {
  std::ostringstream out;
  for (const TraceEntry& e : entries) {
    out << "{\"t\":" << format_sec(e.arrival) << ",\"class\":\""
        << to_string(e.cls) << "\",\"in\":" << e.input_tokens
        << ",\"out\":" << e.output_tokens << "}\n";
  }
  return out.str();
}

void save_trace(const std::vector<TraceEntry>& entries,
                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trace file: " + path);
  out << trace_to_text(entries);
}

std::vector<std::pair<int64_t, int64_t>> load_lengths_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open lengths file: " + path);
  std::vector<std::pair<int64_t, int64_t>> pairs;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("lengths line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    const int64_t in_tokens = obj.at("in").get<int64_t>();
    const int64_t out_tokens = obj.at("out").get<int64_t>();
    if (in_tokens < 1 || out_tokens < 1) {
      throw std::runtime_error("lengths line " + std::to_string(line_no) +
                               ": token counts must be >= 1");
    }
    pairs.emplace_back(in_tokens, out_tokens);
  }
  if (pairs.empty()) throw std::runtime_error("lengths file is empty: " + path);
  return pairs;
}

namespace {

struct LengthSampler {
  std::vector<std::pair<int64_t, int64_t>> pairs;
  int64_t fixed_in = 0;
  int64_t fixed_out = 0;

  std::pair<int64_t, int64_t> sample(Rng& rng) const {
    if (pairs.empty()) return {fixed_in, fixed_out};
    std::uniform_int_distribution<size_t> pick(0, pairs.size() - 1);
    return pairs[pick(rng)];
  }
};

}  // namespace

std::vector<TraceEntry> generate_online_trace(const OnlineWorkload& spec,
                                              uint64_t seed) {
  const auto arrivals =
      gen_gamma_arrivals(spec.rate, spec.cv, spec.duration_s,
                         seed_combine(seed, "online-arrivals"));
  LengthSampler sampler;
  sampler.fixed_in = spec.input_tokens;
  sampler.fixed_out = spec.output_tokens;
  if (!spec.lengths_file.empty()) {
    sampler.pairs = load_lengths_file(spec.lengths_file);
  }
  Rng rng(seed_combine(seed, "online-lengths"));
  std::vector<TraceEntry> entries;
  entries.reserve(arrivals.size());
  for (double t : arrivals) {
    const auto [in_tokens, out_tokens] = sampler.sample(rng);
    entries.push_back(TraceEntry{usec_from_sec(t), RequestClass::kOnline,
                                 in_tokens, out_tokens});
  }
  return entries;
}

std::vector<TraceEntry> generate_offline_backlog(const OfflineWorkload& spec,
                                                 uint64_t seed) {
  LengthSampler sampler;
  sampler.fixed_in = spec.input_tokens;
  sampler.fixed_out = spec.output_tokens;
  if (!spec.lengths_file.empty()) {
    sampler.pairs = load_lengths_file(spec.lengths_file);
  }
  Rng rng(seed_combine(seed, "offline-lengths"));
  std::vector<TraceEntry> entries;
  entries.reserve(static_cast<size_t>(spec.backlog));
  for (int64_t i = 0; i < spec.backlog; ++i) {
    const auto [in_tokens, out_tokens] = sampler.sample(rng);
    entries.push_back(
        TraceEntry{0, RequestClass::kOffline, in_tokens, out_tokens});
  }
  return entries;
}

}  // namespace coserve
