#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace dcctl {

/// Counter-based generator: draw i is a pure function of (seed, stream, i), so
/// streams are reproducible bit-for-bit across platforms and compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  /// Independent generator for a sub-task (derived key, fresh counter).
  Rng fork(std::uint64_t stream) const { return Rng(mix(seed_ ^ 0x9e3779b97f4a7c15ULL, stream_ * 0x100000001b3ULL + stream), 0); }

  std::uint64_t next_u64() {
    const std::uint64_t key = mix(seed_, stream_);
    return mix(key ^ (counter_++ * 0xd1b54a32d192ed03ULL), 0x8cb92ba72f3d8dd7ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do v = next_u64();
    while (v >= limit);
    return v % n;
  }
  int range(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }
  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  std::vector<T> normal_vector(std::size_t n, double stddev = 1.0) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(normal() * stddev);
    return v;
  }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace dcctl
