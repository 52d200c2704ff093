#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace gad {

// Deterministic random source. The mt19937_64 engine is specified bit-exactly
// by the standard; the distributions are hand-rolled here because the standard
// library ones are implementation-defined and would break run-to-run
// reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; caches the second variate.
  double normal(double mean = 0.0, double sd = 1.0) {
    if (has_cached_) {
      has_cached_ = false;
      return mean + sd * cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return mean + sd * r * std::cos(a);
  }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  uint64_t uniform_index(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent child stream; used to give each epoch/batch its
  // own reproducible sequence.
  Rng fork(uint64_t stream) {
    uint64_t s = next_u64();
    s ^= stream + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
    return Rng(s);
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace gad
