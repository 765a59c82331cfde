#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace coserve {

// splitmix64; used to derive independent per-run seeds so sweep results do
// not depend on library hash implementations.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t seed_combine(uint64_t seed, uint64_t salt) {
  return mix64(seed ^ mix64(salt));
}

inline uint64_t seed_combine(uint64_t seed, const std::string& tag) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return seed_combine(seed, h);
}

using Rng = std::mt19937_64;

}  // namespace coserve
