#pragma once

#include <cstdint>
#include <random>

namespace lvm {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent RNG stream derived from a master seed and a stream index.
/// Streams with distinct (seed, index) pairs are decorrelated, so parallel
/// workers can each own one without coordination.
inline std::mt19937_64 derive_stream(std::uint64_t master_seed, std::uint64_t index) {
  std::uint64_t s = splitmix64(master_seed ^ splitmix64(index + 1));
  return std::mt19937_64(s);
}

}  // namespace lvm
