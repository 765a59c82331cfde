#include <doctest.h>

#include <cmath>
#include <random>

#include "coserve/perf_model.hpp"
#include "coserve/rng.hpp"

using namespace coserve;

namespace {

BatchPlan single(int64_t p, int64_t c) {
  BatchPlan plan;
  plan.entries.push_back(BatchEntry{0, p, c, EntryKind::kPrefill, false});
  return plan;
}

// 8B-style params solved from the two anchor measurements: a 2048-token
// chunk at 51 ms fresh and 124 ms against a 40960-token context.
OracleParams calibrated_8b() {
  OracleParams p;
  p.k4 = 7e-5;
  p.k5 = 3.5;
  p.k3 = 0.0;
  p.k2 = (124.0 - 51.0 - p.k4 * 40960.0) / (2048.0 * 40960.0);
  p.k1 = (51.0 - p.k2 * 2048.0 * 2048.0 - p.k4 * 2048.0 - p.k5) / 2048.0;
  return p;
}

OracleParams fit_example_params() {
  OracleParams p;
  p.k1 = 0.01;
  p.k2 = 1e-6;
  p.k3 = 0.005;
  p.k4 = 0.0005;
  p.k5 = 5.0;
  return p;
}

// Independent route for can_schedule: scan p upward with the forward model.
int64_t brute_force_can_schedule(const PerfCoefficients& coeffs,
                                 const BatchPlan& plan, int64_t remaining,
                                 int64_t context, double budget,
                                 int64_t token_cap) {
  const int64_t cap = std::min(remaining, token_cap);
  int64_t best = 0;
  for (int64_t p = 1; p <= cap; ++p) {
    BatchPlan extended = plan;
    extended.entries.push_back(
        BatchEntry{-1, p, context, EntryKind::kPrefill, false});
    if (predict(coeffs, extended) <= budget) {
      best = p;
    } else {
      break;  // predict is monotone in p
    }
  }
  return best;
}

}  // namespace

TEST_CASE("oracle latency hits both published anchor points") {
  const OracleParams params = calibrated_8b();
  CHECK(oracle_latency_noise_free(params, single(2048, 0)) ==
        doctest::Approx(51.0).epsilon(1e-12));
  CHECK(oracle_latency_noise_free(params, single(2048, 40960)) ==
        doctest::Approx(124.0).epsilon(1e-12));
}

TEST_CASE("oracle latency constant-only plan") {
  OracleParams params;
  params.k5 = 5.0;
  CHECK(oracle_latency_noise_free(params, single(1, 0)) == doctest::Approx(5.0));
}

TEST_CASE("oracle latency rejects an empty batch") {
  OracleParams params;
  params.k5 = 1.0;
  BatchPlan empty;
  CHECK_THROWS_AS(oracle_latency_noise_free(params, empty),
                  std::invalid_argument);
}

TEST_CASE("oracle noise is deterministic per seed and multiplicative") {
  OracleParams params = calibrated_8b();
  params.noise_cv = 0.05;
  const double a = oracle_latency(params, single(512, 1024), uint64_t{42});
  const double b = oracle_latency(params, single(512, 1024), uint64_t{42});
  const double c = oracle_latency(params, single(512, 1024), uint64_t{43});
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a > 0.0);
}

TEST_CASE("profile passes grid points through the oracle") {
  const OracleParams params = calibrated_8b();
  const std::vector<std::pair<int64_t, int64_t>> grid{
      {1, 0}, {2048, 0}, {2048, 40960}};
  const auto samples = profile(params, grid, 7);
  REQUIRE(samples.size() == 3);
  CHECK(samples[1].latency_ms == doctest::Approx(51.0));
  CHECK(samples[2].latency_ms == doctest::Approx(124.0));
}

TEST_CASE("default grid is 8 x 6 = 48 points") {
  CHECK(default_profile_grid().size() == 48);
  const auto samples = profile(calibrated_8b(), default_profile_grid(), 1);
  CHECK(samples.size() == 48);
}

TEST_CASE("profile rejects an empty grid") {
  CHECK_THROWS(profile(calibrated_8b(), {}, 1));
}

TEST_CASE("noise-free fit recovers the identifiable parameters exactly") {
  const OracleParams params = fit_example_params();
  const auto samples = profile(params, default_profile_grid(), 1);
  const PerfCoefficients coeffs = fit(samples);
  CHECK(coeffs.a_lin == doctest::Approx(0.015).epsilon(1e-9));
  CHECK(coeffs.a_quad == doctest::Approx(1e-6).epsilon(1e-9));
  CHECK(coeffs.a_mem == doctest::Approx(0.0005).epsilon(1e-9));
  CHECK(coeffs.a_const == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("fit requires at least four samples") {
  const auto samples =
      profile(fit_example_params(), {{1, 0}, {16, 0}, {64, 0}}, 1);
  CHECK_THROWS_WITH_AS(fit(samples), "degenerate profiling grid",
                       std::runtime_error);
}

TEST_CASE("fit rejects a rank-deficient grid") {
  std::vector<ProfileSample> samples(6, ProfileSample{32, 0, 7.0});
  CHECK_THROWS_WITH_AS(fit(samples), "degenerate profiling grid",
                       std::runtime_error);
}

TEST_CASE("fit under 1% noise predicts held-out points within 4%") {
  OracleParams params = fit_example_params();
  params.noise_cv = 0.01;
  const auto samples = profile(params, default_profile_grid(), 99);
  const PerfCoefficients coeffs = fit(samples);
  OracleParams clean = params;
  clean.noise_cv = 0.0;
  Rng rng(123);
  std::uniform_int_distribution<int64_t> pick_p(1, 4096);
  std::uniform_int_distribution<int64_t> pick_c(0, 65536);
  for (int i = 0; i < 20; ++i) {
    const auto plan = single(pick_p(rng), pick_c(rng));
    const double truth = oracle_latency_noise_free(clean, plan);
    const double predicted = predict(coeffs, plan);
    CHECK(std::fabs(predicted - truth) / truth < 0.04);
  }
}

TEST_CASE("predict evaluates the four-term basis") {
  const auto samples = profile(fit_example_params(), default_profile_grid(), 1);
  const PerfCoefficients coeffs = fit(samples);
  // 0.015*2048 + 1e-6*2048^2 + 0.0005*2048 + 5
  CHECK(predict(coeffs, single(2048, 0)) ==
        doctest::Approx(40.938304).epsilon(1e-9));
  CHECK(predict(coeffs, BatchPlan{}) == 0.0);
  CHECK(estimate_exec_time(coeffs, single(2048, 0)) ==
        predict(coeffs, single(2048, 0)));
}

TEST_CASE("predict sums attention and memory terms per entry") {
  PerfCoefficients coeffs{0.01, 2e-6, 3e-4, 4.0};
  BatchPlan plan;
  plan.entries.push_back(BatchEntry{0, 1, 100, EntryKind::kDecode, false});
  plan.entries.push_back(BatchEntry{1, 1, 200, EntryKind::kDecode, false});
  const double combined = predict(coeffs, plan);
  const double separate = predict(coeffs, single(1, 100)) +
                          predict(coeffs, single(1, 200)) - coeffs.a_const;
  CHECK(combined == doctest::Approx(separate).epsilon(1e-12));
}

TEST_CASE("predict is monotone in every P and C when coefficients are >= 0") {
  Rng rng(5);
  std::uniform_real_distribution<double> coef(0.0, 1e-3);
  std::uniform_int_distribution<int64_t> tok(1, 4096);
  for (int trial = 0; trial < 200; ++trial) {
    PerfCoefficients coeffs{coef(rng), coef(rng) * 1e-3, coef(rng), coef(rng)};
    BatchPlan plan;
    const int entries = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < entries; ++i) {
      plan.entries.push_back(
          BatchEntry{i, tok(rng), tok(rng), EntryKind::kPrefill, false});
    }
    const double base = predict(coeffs, plan);
    BatchPlan more_p = plan;
    more_p.entries[rng() % entries].compute_tokens += 1;
    BatchPlan more_c = plan;
    more_c.entries[rng() % entries].context_tokens += 1;
    CHECK(predict(coeffs, more_p) >= base);
    CHECK(predict(coeffs, more_c) >= base);
  }
}

TEST_CASE("can_schedule returns zero with no slack") {
  PerfCoefficients coeffs{0.01, 1e-6, 1e-4, 5.0};
  const BatchPlan plan = single(256, 512);
  const double budget = predict(coeffs, plan);
  CHECK(can_schedule(coeffs, plan, 4096, 1024, budget, 8192) == 0);
}

TEST_CASE("can_schedule grants everything when tokens are free") {
  PerfCoefficients coeffs{0.0, 0.0, 0.0, 5.0};
  const BatchPlan plan = single(64, 0);
  CHECK(can_schedule(coeffs, plan, 1000, 0, 6.0, 700) == 700);
  CHECK(can_schedule(coeffs, plan, 500, 0, 6.0, 700) == 500);
}

TEST_CASE("can_schedule inverts the worked predict example") {
  const auto samples = profile(fit_example_params(), default_profile_grid(), 1);
  const PerfCoefficients coeffs = fit(samples);
  BatchPlan empty;
  const double budget = predict(coeffs, single(2048, 0));
  const int64_t granted = can_schedule(coeffs, empty, 4096, 0, budget, 8192);
  CHECK(granted == 2048);
  CHECK(granted ==
        brute_force_can_schedule(coeffs, empty, 4096, 0, budget, 8192));
}

TEST_CASE("can_schedule matches brute force on random instances") {
  Rng rng(2024);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int64_t> tok(0, 4096);
  for (int trial = 0; trial < 150; ++trial) {
    PerfCoefficients coeffs{unit(rng) * 0.05, unit(rng) * 2e-6,
                            unit(rng) * 1e-3, unit(rng) * 10.0};
    BatchPlan plan;
    const int entries = static_cast<int>(rng() % 3);
    for (int i = 0; i < entries; ++i) {
      plan.entries.push_back(BatchEntry{i, 1 + tok(rng) / 8, tok(rng),
                                        EntryKind::kPrefill, false});
    }
    const double current = predict(coeffs, plan);
    const double budget = current + unit(rng) * 30.0;
    const int64_t remaining = 1 + tok(rng);
    const int64_t context = tok(rng);
    const int64_t cap = 1 + tok(rng);
    const int64_t fast =
        can_schedule(coeffs, plan, remaining, context, budget, cap);
    const int64_t slow =
        brute_force_can_schedule(coeffs, plan, remaining, context, budget, cap);
    CHECK(fast == slow);
  }
}

TEST_CASE("max throughput is the cap when the quadratic term vanishes") {
  PerfCoefficients coeffs{0.02, 0.0, 1e-4, 3.0};
  CHECK(max_throughput_tokens(coeffs, 0, 4096) == 4096);
}

TEST_CASE("max throughput degenerates to one token without fixed costs") {
  PerfCoefficients coeffs{0.02, 1e-6, 0.0, 0.0};
  CHECK(max_throughput_tokens(coeffs, 0, 4096) == 1);
}

TEST_CASE("max throughput sits at the stationary point of the rate function") {
  const auto samples = profile(fit_example_params(), default_profile_grid(), 1);
  const PerfCoefficients coeffs = fit(samples);
  const int64_t cap = 8192;
  const int64_t fast = max_throughput_tokens(coeffs, 0, cap);
  int64_t best = 1;
  double best_rate = 0.0;
  for (int64_t p = 1; p <= cap; ++p) {
    const double rate = static_cast<double>(p) / predict(coeffs, single(p, 0));
    if (rate > best_rate) {
      best_rate = rate;
      best = p;
    }
  }
  CHECK(fast == best);
  CHECK(fast == doctest::Approx(2236).epsilon(0.001));
}

TEST_CASE("profile and coefficient documents round-trip through JSON") {
  const auto samples = profile(calibrated_8b(), default_profile_grid(), 3);
  const auto parsed = profile_from_json_text(profile_to_json_text(samples));
  REQUIRE(parsed.size() == samples.size());
  CHECK(parsed[7].latency_ms == doctest::Approx(samples[7].latency_ms));
  const PerfCoefficients coeffs = fit(samples);
  const auto text = fit_result_to_json_text(samples, coeffs);
  const PerfCoefficients back = coefficients_from_json_text(text);
  CHECK(back.a_quad == doctest::Approx(coeffs.a_quad).epsilon(1e-12));
}
