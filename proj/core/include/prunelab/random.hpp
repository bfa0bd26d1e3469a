#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace prunelab {

// std::mt19937_64 has a fully specified output sequence; the standard
// distributions do not, so draws are derived from raw engine bits here to
// keep every seeded result identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform float in [lo, hi).
  float uniform(float lo, float hi) {
    const float u = static_cast<float>(engine_() >> 40) * 0x1.0p-24f;
    return lo + (hi - lo) * u;
  }

  /// Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace prunelab
