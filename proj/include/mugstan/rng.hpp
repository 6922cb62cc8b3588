#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "mugstan/tensor.hpp"

namespace mugstan {

/// Seeded generator whose derived draws are bit-identical across standard
/// libraries. std::mt19937_64 is fully specified; the <random> distributions
/// are not, so the conversions below are done by hand.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer on [0, n), rejection sampled.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ContractError("uniform_int(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Deterministic child stream, used to decorrelate components sharing one seed.
  Rng fork() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

  template <class It>
  void shuffle(It first, It last) {
    for (auto n = static_cast<std::uint64_t>(last - first); n > 1; --n) {
      std::swap(first[n - 1], first[uniform_int(n)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

template <class T>
Tensor<T> randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <class T>
Tensor<T> rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace mugstan
