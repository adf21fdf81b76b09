#pragma once
#include <cmath>
#include <cstdint>
#include <numbers>

#include "cromac/errors.hpp"

namespace cromac {

// Deterministic counter-free PRNG (xoshiro256** seeded via splitmix64).
// We avoid std::*_distribution on purpose: their draw sequences are
// implementation defined, and run reproducibility is a hard contract here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : state_) w = splitmix64(x);
  }

  // Independent stream derived from (seed, stream tag(s)). Used to give the
  // env, exploration, replay sampling, init, ... their own sequences.
  static Rng stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t sub = 0) {
    std::uint64_t x = seed;
    std::uint64_t a = splitmix64(x);
    x ^= 0x9e3779b97f4a7c15ULL * (tag + 1);
    std::uint64_t b = splitmix64(x);
    x ^= 0xbf58476d1ce4e5b9ULL * (sub + 1);
    return Rng(a ^ (b + splitmix64(x)));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ContractError("uniform_int: n must be positive");
    // rejection sampling to kill modulo bias
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Standard normal via Box-Muller (deterministic, no cached spare).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::uint64_t state_[4]{};
};

}  // namespace cromac
