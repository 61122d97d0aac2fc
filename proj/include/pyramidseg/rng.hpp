#pragma once

#include <cmath>
#include <cstdint>

namespace pyseg {

// Counter-based generator: every draw is a pure function of (key, counter),
// and split() derives an independent stream from a key and a stream id. The
// same seed therefore yields the same numbers regardless of platform or of
// how many other streams were consumed.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : key_(mix(seed ^ 0x9E3779B97F4A7C15ULL)) {}

  static uint64_t mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  Rng split(uint64_t stream) const {
    Rng child;
    child.key_ = mix(key_ ^ mix(stream + 0xD1B54A32D192ED03ULL));
    return child;
  }

  uint64_t next_u64() { return mix(key_ + mix(counter_++)); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace pyseg
