#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace bparse {

// splitmix64; used to derive per-case / per-step seeds from one root seed.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic RNG. The mt19937_64 engine is fully specified by the
// standard; the distributions are hand-rolled here because the std::
// distribution objects are implementation-defined and would break
// bit-reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one value per call, cached pair discarded for simplicity.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    // Rejection sampling keeps this exactly uniform and deterministic.
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = eng_();
    while (x >= limit) x = eng_();
    return x % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    shuffle(p);
    return p;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace bparse
