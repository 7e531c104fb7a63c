#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mapmatch {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for item `index` of a seeded stream (seed xor index, then mixed).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed ^ index);
}

/// Seed for a named pipeline stage: FNV-1a of the name mixed into the seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ h);
}

}  // namespace mapmatch
