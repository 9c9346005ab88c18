#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "st3d/common.hpp"

namespace st3d {

// Deterministic 64-bit generator (splitmix64). Same seed, same sequence, on
// every platform. fork() derives an independent child stream from (state,
// key), which keeps per-record sampling independent of worker scheduling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // uniform integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float uniform(float lo, float hi) {
    return lo + static_cast<float>(next_double()) * (hi - lo);
  }

  bool bernoulli(double p) { return next_double() < p; }

  // standard normal via Box-Muller; one value per draw so the sequence is
  // fully pinned by the seed
  float normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                              std::cos(6.283185307179586 * u2));
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

  Rng fork(std::uint64_t key) const {
    Rng r(state_ ^ (0xD1B54A32D192ED03ull * (key + 1)));
    r.next_u64();
    return r;
  }
  Rng fork(std::string_view key) const { return fork(fnv1a(key)); }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    return h;
  }

 private:
  std::uint64_t state_;
};

}  // namespace st3d
