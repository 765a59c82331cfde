#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "coserve/rng.hpp"
#include "coserve/workload.hpp"

using namespace coserve;

TEST_CASE("gamma arrivals reproduce the configured rate and burstiness") {
  // Pooled over 20 seeds: mean rate within 5%, inter-arrival CV within 10%.
  std::vector<double> gaps;
  size_t total_arrivals = 0;
  const double duration = 600.0;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    const auto arrivals = gen_gamma_arrivals(2.0, 0.5, duration, seed);
    total_arrivals += arrivals.size();
    for (size_t i = 1; i < arrivals.size(); ++i) {
      gaps.push_back(arrivals[i] - arrivals[i - 1]);
    }
    for (double t : arrivals) {
      CHECK(t >= 0.0);
      CHECK(t < duration);
    }
  }
  const double rate =
      static_cast<double>(total_arrivals) / (20.0 * duration);
  CHECK(std::fabs(rate - 2.0) / 2.0 < 0.05);

  const double mean =
      std::accumulate(gaps.begin(), gaps.end(), 0.0) / gaps.size();
  double var = 0.0;
  for (double g : gaps) var += (g - mean) * (g - mean);
  var /= static_cast<double>(gaps.size() - 1);
  const double cv = std::sqrt(var) / mean;
  CHECK(std::fabs(cv - 0.5) / 0.5 < 0.10);
}

TEST_CASE("gamma arrivals are deterministic per seed") {
  const auto a = gen_gamma_arrivals(4.0, 1.0, 100.0, 9);
  const auto b = gen_gamma_arrivals(4.0, 1.0, 100.0, 9);
  CHECK(a == b);
}

TEST_CASE("gamma arrivals reject non-positive parameters") {
  CHECK_THROWS_AS(gen_gamma_arrivals(0.0, 0.5, 10.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_gamma_arrivals(1.0, -1.0, 10.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_gamma_arrivals(1.0, 0.5, 0.0, 1), std::invalid_argument);
}

TEST_CASE("trace lines parse into requests") {
  const auto entries = parse_trace_text(
      "{\"t\":0.0,\"class\":\"online\",\"in\":4096,\"out\":256}\n"
      "{\"t\":1.5,\"class\":\"offline\",\"in\":128,\"out\":16}\n");
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].arrival == 0);
  CHECK(entries[0].cls == RequestClass::kOnline);
  CHECK(entries[0].input_tokens == 4096);
  CHECK(entries[0].output_tokens == 256);
  CHECK(entries[1].arrival == 1'500'000);
}

TEST_CASE("trace load sorts by arrival with stable line-order ties") {
  const auto entries = parse_trace_text(
      "{\"t\":2.0,\"class\":\"online\",\"in\":10,\"out\":1}\n"
      "{\"t\":1.0,\"class\":\"online\",\"in\":20,\"out\":1}\n"
      "{\"t\":1.0,\"class\":\"online\",\"in\":30,\"out\":1}\n");
  REQUIRE(entries.size() == 3);
  CHECK(entries[0].input_tokens == 20);
  CHECK(entries[1].input_tokens == 30);
  CHECK(entries[2].input_tokens == 10);
}

TEST_CASE("malformed trace lines report the line number") {
  CHECK_THROWS_WITH_AS(
      parse_trace_text("{\"t\":0.0,\"class\":\"online\",\"in\":1,\"out\":1}\n"
                       "not json\n"),
      doctest::Contains("line 2"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      parse_trace_text("{\"t\":0.0,\"class\":\"online\",\"in\":-5,\"out\":1}\n"),
      doctest::Contains("line 1"), std::runtime_error);
}

TEST_CASE("save then load is the identity on a generated trace") {
  OnlineWorkload spec;
  spec.rate = 10.0;
  spec.cv = 1.0;
  spec.duration_s = 100.0;
  spec.input_tokens = 777;
  spec.output_tokens = 33;
  const auto entries = generate_online_trace(spec, 5);
  REQUIRE(entries.size() > 500);
  const std::string path = "trace_roundtrip_test.jsonl";
  save_trace(entries, path);
  const auto loaded = load_trace(path);
  std::remove(path.c_str());
  REQUIRE(loaded.size() == entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    CHECK(loaded[i].arrival == entries[i].arrival);
    CHECK(loaded[i].input_tokens == entries[i].input_tokens);
    CHECK(loaded[i].output_tokens == entries[i].output_tokens);
    CHECK(loaded[i].cls == entries[i].cls);
  }
  // Same spec and seed produce a byte-identical file.
  CHECK(trace_to_text(generate_online_trace(spec, 5)) ==
        trace_to_text(entries));
}

TEST_CASE("offline backlog arrives at time zero") {
  OfflineWorkload spec;
  spec.backlog = 12;
  spec.input_tokens = 64;
  spec.output_tokens = 8;
  const auto entries = generate_offline_backlog(spec, 3);
  REQUIRE(entries.size() == 12);
  for (const auto& e : entries) {
    CHECK(e.arrival == 0);
    CHECK(e.cls == RequestClass::kOffline);
  }
}

TEST_CASE("empirical sampling reproduces the length file's joint means") {
  // Build a lengths file shaped like a chat workload: means near 2747 input
  // and 267 output tokens.
  const std::string path = "lengths_test.jsonl";
  {
    std::ofstream out(path);
    Rng rng(17);
    std::gamma_distribution<double> in_dist(8.0, 2747.0 / 8.0);
    std::gamma_distribution<double> out_dist(3.0, 267.0 / 3.0);
    for (int i = 0; i < 1000; ++i) {
      const int64_t in_tokens =
          std::max<int64_t>(1, static_cast<int64_t>(in_dist(rng)));
      const int64_t out_tokens =
          std::max<int64_t>(1, static_cast<int64_t>(out_dist(rng)));
      out << "{\"in\":" << in_tokens << ",\"out\":" << out_tokens << "}\n";
    }
  }
  const auto pairs = load_lengths_file(path);
  double file_in = 0, file_out = 0;
  for (const auto& [i, o] : pairs) {
    file_in += static_cast<double>(i);
    file_out += static_cast<double>(o);
  }
  file_in /= static_cast<double>(pairs.size());
  file_out /= static_cast<double>(pairs.size());

  OnlineWorkload spec;
  spec.rate = 20.0;
  spec.cv = 1.0;
  spec.duration_s = 400.0;
  spec.lengths_file = path;
  const auto entries = generate_online_trace(spec, 11);
  std::remove(path.c_str());
  REQUIRE(entries.size() > 2000);
  double mean_in = 0, mean_out = 0;
  for (const auto& e : entries) {
    mean_in += static_cast<double>(e.input_tokens);
    mean_out += static_cast<double>(e.output_tokens);
  }
  mean_in /= static_cast<double>(entries.size());
  mean_out /= static_cast<double>(entries.size());
  CHECK(std::fabs(mean_in - file_in) / file_in < 0.05);
  CHECK(std::fabs(mean_out - file_out) / file_out < 0.05);
}
