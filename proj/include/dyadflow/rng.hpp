#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dyadflow {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Seed for an independent named stream. Adding a new stream name never
// changes the draws of existing streams.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::string_view name) {
  return splitmix64(splitmix64(seed ^ splitmix64(index)) ^ fnv1a(name));
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t index, std::string_view name) {
  return std::mt19937_64(stream_seed(seed, index, name));
}

}  // namespace dyadflow
