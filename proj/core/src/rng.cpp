#include "ctxlm/rng.hpp"

#include <cmath>

namespace ctxlm {

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t fnv1a64(std::string_view s, uint64_t seed) {
  return fnv1a64(s.data(), s.size(), seed);
}

SplitMix64 named_stream(uint64_t seed, std::string_view name) {
  uint64_t h = fnv1a64(name);
  // Mix the seed in through one extra splitmix step so adjacent seeds do not
  // produce correlated streams for the same name.
  SplitMix64 mixer(seed ^ h);
  return SplitMix64(mixer.next());
}

template <typename T>
void fill_normal(SplitMix64& g, T* dst, int64_t n, double mean, double stddev) {
  // Box-Muller, pair at a time. Draw order is fixed, so a given stream
  // yields the same sequence regardless of T.
  for (int64_t i = 0; i < n; i += 2) {
    double u1 = g.next_double();
    double u2 = g.next_double();
    // Guard log(0); the shift keeps u1 in (0, 1].
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    dst[i] = static_cast<T>(mean + stddev * (r * std::cos(a)));
    if (i + 1 < n) dst[i + 1] = static_cast<T>(mean + stddev * (r * std::sin(a)));
  }
}

template void fill_normal<float>(SplitMix64&, float*, int64_t, double, double);
template void fill_normal<double>(SplitMix64&, double*, int64_t, double, double);

}  // namespace ctxlm
