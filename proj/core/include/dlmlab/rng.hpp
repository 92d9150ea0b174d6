#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dlmlab {

// Counter-based pseudo-random generator. A generator is a (key, counter)
// pair and every draw hashes the pair, so streams can be forked to any depth
// and replayed without shared state. Copies replay the same sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(mix(seed, 0x2545F4914F6CDD1Dull), stream)) {}

  std::uint64_t next_u64() { return mix(key_, ++counter_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; two draws per call, no cached state.
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Independent child stream, deterministic in (parent key, salt).
  // Does not advance this generator.
  Rng fork(std::uint64_t salt) const {
    return Rng(FromKey{}, mix(key_, salt ^ 0x9E3779B97F4A7C15ull));
  }

 private:
  struct FromKey {};
  Rng(FromKey, std::uint64_t key) : key_(key) {}

  static std::uint64_t avalanche(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    return avalanche(a + 0x9E3779B97F4A7C15ull +
                     avalanche(b + 0x632BE59BD9B4E019ull));
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace dlmlab
