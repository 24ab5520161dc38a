#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "tokenrank/nn/tensor.hpp"

namespace tokenrank::nn {

/// Seeded generator with platform-independent draws.
///
/// Bits come from std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Floating-point draws are derived here rather than through
/// <random> distributions, whose algorithms are implementation-defined:
///   uniform()  = (next() >> 11) * 2^-53
///   normal()   = Box-Muller on two uniforms (cached second value discarded)
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n);
  double normal(double mean = 0.0, double stddev = 1.0);

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

  Tensor normal_tensor(Shape shape, float stddev);

  /// Independent child stream; the same (parent seed, tag) always yields the
  /// same child regardless of how many draws the parent has made.
  SeededRng fork(std::uint64_t tag) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer, used to derive child seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

}  // namespace tokenrank::nn
