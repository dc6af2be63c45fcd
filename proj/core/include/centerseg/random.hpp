#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace centerseg {

// Seeded generator with platform-independent sampling. The standard
// distributions are implementation-defined, so uniform and normal draws are
// derived from the raw mt19937_64 stream here instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();

  // Mixes a base seed with stream identifiers (epoch, step, sample index, ...)
  // so independent parts of a run get decorrelated, reproducible streams.
  static std::uint64_t derive(std::uint64_t seed,
                              std::initializer_list<std::uint64_t> stream);

 private:
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

}  // namespace centerseg
