#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rangefuse {

// Seeded RNG with hand-written output transforms so draws depend only on the
// standardized mt19937_64 bit stream, never on library distribution details.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(eng_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  // Box-Muller; one draw consumed per call pair, cached half discarded for
  // simplicity so the stream stays position-independent.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // Derive an independent stream (scene i, parameter j, ...).
  Rng fork(std::uint64_t salt) {
    std::uint64_t s = eng_() ^ (salt * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
    return Rng(s);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace rangefuse
