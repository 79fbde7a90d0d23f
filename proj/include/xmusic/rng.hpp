#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace xmusic {

// Seeded random source. All derived draws (bounded ints, reals, gaussians,
// shuffles) are implemented here rather than via std distributions, so a
// given seed produces the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, bound). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_u64(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("Rng::uniform_u64: zero bound");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t draw;
    do {
      draw = next_u64();
    } while (draw >= limit);
    return draw % bound;
  }

  int uniform_int(int lo, int hi_inclusive) {
    if (hi_inclusive < lo) throw std::invalid_argument("Rng::uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi_inclusive) - lo + 1;
    return lo + static_cast<int>(uniform_u64(span));
  }

  // Uniform real in [0, 1) with 53-bit resolution.
  double uniform_real() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform_real(double lo, double hi) { return lo + (hi - lo) * uniform_real(); }

  // Box-Muller with a cached spare.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 1.0 - uniform_real();  // (0, 1]
    double u2 = uniform_real();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return mean + stddev * radius * std::cos(angle);
  }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_u64(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // k distinct values from {0, .., n-1}, returned sorted ascending.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) {
      throw std::invalid_argument("Rng::sample_without_replacement: bad k");
    }
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(uniform_u64(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[i], pool[j]);
    }
    std::vector<int> out(pool.begin(), pool.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace xmusic
