#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string_view>

#include "quantlens/tensor.hpp"

namespace quantlens {

// mt19937_64 behind a seed-derivation scheme: every substream is keyed only by
// (parent seed, label), so the order in which experiments draw never matters.
//
// Variates are produced without std::*_distribution (whose algorithms are
// implementation-defined) so sequences are portable:
//   uniform01: top 53 bits of one engine word, scaled by 2^-53, in [0, 1)
//   normal:    basic Box-Muller on (1 - u1, u2); the cosine branch is returned
//              first and the sine branch is cached for the next call
//   index(n):  high 64 bits of the 128-bit product word * n
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  SeededRng substream(std::string_view label) const;

  std::uint64_t next_u64() { return engine_(); }
  double uniform01();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  double normal();
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform01() < p; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::optional<double> cached_normal_;
};

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) noexcept;

template <typename T = float>
Tensor<T> sample_uniform(SeededRng& rng, const Shape& shape, double lo, double hi);

template <typename T = float>
Tensor<T> sample_normal(SeededRng& rng, const Shape& shape, double mean, double stddev);

// Fisher-Yates permutation of [0, n).
std::vector<std::size_t> permutation(SeededRng& rng, std::size_t n);

}  // namespace quantlens
