#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>

namespace coserve {

// Simulated time is integer microseconds end to end; doubles appear only at
// the API boundary (config files, reports) where values are expressed in
// seconds or milliseconds.
using UsecT = int64_t;

constexpr UsecT kUsecPerSec = 1'000'000;

inline UsecT usec_from_sec(double sec) {
  return static_cast<UsecT>(std::llround(sec * 1e6));
}

inline UsecT usec_from_ms(double ms) {
  return static_cast<UsecT>(std::llround(ms * 1e3));
}

inline double sec_from_usec(UsecT us) { return static_cast<double>(us) / 1e6; }

inline double ms_from_usec(UsecT us) { return static_cast<double>(us) / 1e3; }

// Fixed six fractional digits so trace files round-trip bit-exactly.
inline std::string format_sec(UsecT us) {
  char buf[32];
  UsecT whole = us / kUsecPerSec;
  UsecT frac = us % kUsecPerSec;
  if (us < 0 && frac != 0) {
    whole -= 1;
    frac += kUsecPerSec;
  }
  std::snprintf(buf, sizeof(buf), "%lld.%06lld", static_cast<long long>(whole),
                static_cast<long long>(frac));
  return buf;
}

}  // namespace coserve
