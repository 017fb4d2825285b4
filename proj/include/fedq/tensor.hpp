#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "fedq/errors.hpp"

namespace fedq {

/// Dense row-major tensor of doubles. All numeric work in this project is
/// done in 64-bit floating point; narrowing to 32-bit happens only at the
/// wire/checkpoint boundary.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length does not match shape");
  }

  static std::size_t numel(std::span<const std::size_t> s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<std::size_t> s, double v) {
    std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  std::size_t size() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<const double> view() const { return data; }
  std::span<double> view() { return data; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool operator==(const Tensor& o) const = default;
};

// splitmix64; used to derive independent rng streams from a master seed.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Stream seed for (master, a, b); distinct tuples give independent streams.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                    std::uint64_t b) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return h;
}

/// Uniform double in [0, 1) from one 64-bit draw (top 53 bits).
template <class Rng>
double uniform_unit(Rng& rng) {
  return static_cast<double>(static_cast<std::uint64_t>(rng()) >> 11) *
         0x1.0p-53;
}

/// Fisher-Yates shuffle with a pinned draw sequence. std::shuffle's use of
/// the generator is implementation-defined, which would break the
/// same-seed-same-bytes reproducibility contract across toolchains.
template <class T, class Rng>
void shuffle_span(std::span<T> values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(values[i - 1], values[j]);
  }
}

}  // namespace fedq
