#include "quantlens/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace quantlens {

namespace {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) noexcept {
  return splitmix64(splitmix64(seed) ^ fnv1a(label));
}

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

SeededRng SeededRng::substream(std::string_view label) const {
  return SeededRng(derive_seed(seed_, label));
}

double SeededRng::uniform01() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double SeededRng::normal() {
  if (cached_normal_) {
    double z = *cached_normal_;
    cached_normal_.reset();
    return z;
  }
  const double u1 = 1.0 - uniform01();
  const double u2 = uniform01();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  cached_normal_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

std::size_t SeededRng::index(std::size_t n) {
  const unsigned __int128 product =
      static_cast<unsigned __int128>(engine_()) * static_cast<unsigned __int128>(n);
  return static_cast<std::size_t>(product >> 64);
}

template <typename T>
Tensor<T> sample_uniform(SeededRng& rng, const Shape& shape, double lo, double hi) {
  if (!(lo < hi)) {
    fail(ErrorCode::InvalidRange, "sample_uniform requires lo < hi (got lo=" +
                                      std::to_string(lo) + ", hi=" + std::to_string(hi) + ")");
  }
  Tensor<T> out(shape);
  const T upper = static_cast<T>(hi);
  const T below_upper = std::nextafter(upper, static_cast<T>(lo));
  for (T& v : out.values()) {
    v = static_cast<T>(rng.uniform(lo, hi));
    // rounding to T can land on hi; the interval is half-open
    if (v >= upper) v = below_upper;
  }
  return out;
}

template <typename T>
Tensor<T> sample_normal(SeededRng& rng, const Shape& shape, double mean, double stddev) {
  if (!(stddev > 0.0)) {
    fail(ErrorCode::InvalidRange, "sample_normal requires std > 0 (got " +
                                      std::to_string(stddev) + ")");
  }
  Tensor<T> out(shape);
  for (T& v : out.values()) v = static_cast<T>(mean + stddev * rng.normal());
  return out;
}

std::vector<std::size_t> permutation(SeededRng& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.index(i)]);
  }
  return idx;
}

template Tensor<float> sample_uniform(SeededRng&, const Shape&, double, double);
template Tensor<double> sample_uniform(SeededRng&, const Shape&, double, double);
template Tensor<float> sample_normal(SeededRng&, const Shape&, double, double);
template Tensor<double> sample_normal(SeededRng&, const Shape&, double, double);

}  // namespace quantlens
