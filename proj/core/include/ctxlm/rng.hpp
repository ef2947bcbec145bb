#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace ctxlm {

// splitmix64: tiny, well-mixed counter-based generator. Every random draw in
// the project bottoms out here so results are identical across platforms and
// standard-library versions (std::mt19937 + std::normal_distribution would
// not be: the distribution's algorithm is implementation-defined).
struct SplitMix64 {
  uint64_t state = 0;

  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double next_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n) by scaling; bias is < 2^-53 for the n used
  // here (window starts, vocab draws), far below any tolerance we care
  // about, and the scaled form is branch-free and deterministic.
  uint64_t next_below(uint64_t n) {
    return static_cast<uint64_t>(next_double() * static_cast<double>(n));
  }
};

// FNV-1a over bytes; used both to derive per-tensor seeds from names and as
// the checkpoint payload checksum.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull);

// Combines a run seed with a stream label ("token_embedding.weight",
// "sample.step12.b3", ...) into an independent splitmix64 stream.
SplitMix64 named_stream(uint64_t seed, std::string_view name);

// Fills dst with N(mean, std) draws via Box-Muller on splitmix64 doubles.
// Self-contained so float and double builds agree to rounding.
template <typename T>
void fill_normal(SplitMix64& g, T* dst, int64_t n, double mean, double stddev);

}  // namespace ctxlm
