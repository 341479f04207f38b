#pragma once

#include <cmath>
#include <cstdint>

namespace glyphgen {

// Counter-based PRNG: a 64-bit counter pushed through the splitmix64
// finalizer. Same seed + same call sequence gives the same bits on every
// platform, and independent streams can be derived from (seed, stream,
// counter) without sharing state. That makes training resumable: the draws
// for step t depend only on the seed and t, never on how we got there.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Derive an independent generator for (seed, stream_id, counter).
  static Rng stream(std::uint64_t seed, std::uint64_t stream_id,
                    std::uint64_t counter = 0) {
    std::uint64_t h = mix(seed + kGamma);
    h = mix(h ^ (stream_id + kGamma));
    h = mix(h ^ (counter + kGamma));
    return Rng(h);
  }

  std::uint64_t next_u64() {
    state_ += kGamma;
    return mix(state_);
  }

  std::uint32_t next_u32() { return static_cast<std::uint32_t>(next_u64() >> 32); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  // Standard normal via Box-Muller; one spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * kPi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stream ids used across the project so draws never collide.
namespace rng_stream {
inline constexpr std::uint64_t kParamInit = 1;
inline constexpr std::uint64_t kSkeleton = 2;
inline constexpr std::uint64_t kStyleSpec = 3;
inline constexpr std::uint64_t kRenderNoise = 4;
inline constexpr std::uint64_t kBatchX = 5;
inline constexpr std::uint64_t kBatchY = 6;
inline constexpr std::uint64_t kStyleEps = 7;
inline constexpr std::uint64_t kPrior = 8;
}  // namespace rng_stream

}  // namespace glyphgen
