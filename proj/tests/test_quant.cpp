#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "fedq/errors.hpp"
#include "fedq/quant.hpp"
#include "fedq/tensor.hpp"

using namespace fedq;

namespace {

std::vector<double> gaussian_tensor(std::size_t n, std::uint64_t seed,
                                    double sigma = 1.0) {
  std::mt19937_64 rng(seed);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; i += 2) {
    double u1 = std::max(uniform_unit(rng), 1e-12);
    double u2 = uniform_unit(rng);
    double r = std::sqrt(-2.0 * std::log(u1));
    v[i] = sigma * r * std::cos(2.0 * std::numbers::pi * u2);
    if (i + 1 < n) v[i + 1] = sigma * r * std::sin(2.0 * std::numbers::pi * u2);
  }
  return v;
}

std::vector<double> laplacian_tensor(std::size_t n, std::uint64_t seed,
                                     double b = 1.0) {
  std::mt19937_64 rng(seed);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    double u = uniform_unit(rng) - 0.5;
    double sgn = u < 0.0 ? -1.0 : 1.0;
    v[i] = -b * sgn * std::log(std::max(1.0 - 2.0 * std::abs(u), 1e-300));
  }
  return v;
}

// Independent oracle. The optimal threshold for the modeled quantization
// error -- in-range elements cost the uniform-noise variance (4^-b / 3) s^2
// each, clipped ones (|x| - s)^2 -- satisfies the stationarity condition
//   s * ((4^-b / 3) * n_in(s) + n_above(s)) = sum of |x| above s.
// The left-minus-right residual is strictly increasing in s, so scanning
// `npts` candidates in (0, max|x|] for its sign change brackets the optimum
// within one candidate step. No recursion involved: sorted prefix sums.
double grid_scan_threshold(std::span<const double> values, int bits,
                           int npts) {
  std::vector<double> mags(values.size());
  std::transform(values.begin(), values.end(), mags.begin(),
                 [](double x) { return std::abs(x); });
  std::sort(mags.begin(), mags.end());
  const std::size_t n = mags.size();
  std::vector<double> sum1(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) sum1[i + 1] = sum1[i] + mags[i];
  const auto nzero = static_cast<std::size_t>(
      std::upper_bound(mags.begin(), mags.end(), 0.0) - mags.begin());
  const double c = std::ldexp(1.0, -2 * bits) / 3.0;
  const double m = mags.back();
  for (int k = 1; k <= npts; ++k) {
    double s = m * static_cast<double>(k) / static_cast<double>(npts);
    auto cut = static_cast<std::size_t>(
        std::upper_bound(mags.begin(), mags.end(), s) - mags.begin());
    double residual = s * (c * static_cast<double>(cut - nzero) +
                           static_cast<double>(n - cut)) -
                      (sum1[n] - sum1[cut]);
    if (residual >= 0.0) return s;
  }
  return m;
}

// Generator whose uniform_unit() is exactly 0.5, i.e. zero dither.
struct MidpointRng {
  std::uint64_t operator()() { return std::uint64_t{1} << 63; }
};

}  // namespace

TEST_CASE("deterministic worked example on the 2-bit grid") {
  // x = 0.8 with s = 1, b = 2: grid {-1, -1/3, 1/3, 1}; nearest level is +1.
  std::array<double, 1> x{0.8};
  auto qt = quant::quantize_deterministic(x, 2, 1.0);
  REQUIRE(qt.levels.size() == 1);
  CHECK(qt.levels[0] == 3);
  auto deq = quant::dequantize(qt);
  CHECK(deq[0] == 1.0);
  CHECK(std::abs((x[0] - deq[0]) - (-0.2)) < 1e-15);
}

TEST_CASE("stochastic bracket probabilities for x=0.8") {
  auto p = quant::stochastic_level_probabilities(0.8, 2, 1.0);
  CHECK(p.lower_index == 2);  // 1/3 below, 1 above
  CHECK(std::abs(p.p_lower - 0.3) < 1e-12);
  CHECK(std::abs(p.p_upper - 0.7) < 1e-12);
}

TEST_CASE("monte carlo mean of stochastic draws at x=0.8") {
  constexpr std::size_t kDraws = 100000;
  std::vector<double> x(kDraws, 0.8);
  quant::QuantSpec spec;
  spec.bits = 2;
  spec.mode = quant::QuantMode::Stochastic;
  std::mt19937_64 rng(7);
  auto qt = quant::quantize(x, spec, 1.0, rng);
  std::size_t upper = 0;
  for (auto lv : qt.levels) {
    REQUIRE((lv == 2 || lv == 3));
    if (lv == 3) ++upper;
  }
  auto deq = quant::dequantize(qt);
  double mean = 0.0;
  for (double d : deq) mean += d;
  mean /= static_cast<double>(kDraws);
  CHECK(std::abs(mean - 0.8) < 0.005);
  CHECK(std::abs(static_cast<double>(upper) / kDraws - 0.7) < 0.01);
}

TEST_CASE("octav lands within one grid step of the scanned optimum") {
  constexpr std::size_t kN = 10000;
  constexpr int kGrid = 1000;
  std::vector<std::vector<double>> tensors;
  tensors.push_back(gaussian_tensor(kN, 11));
  tensors.push_back(gaussian_tensor(kN, 12, 0.3));
  tensors.push_back(laplacian_tensor(kN, 13));
  tensors.push_back(laplacian_tensor(kN, 14, 2.0));
  for (const auto& v : tensors) {
    for (int bits : {2, 4, 8}) {
      auto res = quant::octav_threshold_full(v, bits);
      CHECK(res.iterations <= 10);
      CHECK(res.converged);
      double oracle = grid_scan_threshold(v, bits, kGrid);
      double step = quant::max_scalar_threshold(v) / kGrid;
      CHECK(std::abs(res.threshold - oracle) <= step + 1e-6 * oracle);
    }
  }
}

TEST_CASE("octav saturates to max|x| when nothing exceeds the iterate") {
  std::vector<double> flat(100, 0.5);
  auto res = quant::octav_threshold_full(flat, 8);
  CHECK(res.threshold == 0.5);
  CHECK(res.converged);

  std::array<double, 1> lone{-2.5};
  CHECK(quant::octav_threshold(lone, 4) == 2.5);
}

TEST_CASE("octav convergence metadata and custom start") {
  auto v = gaussian_tensor(10000, 21);
  auto res = quant::octav_threshold_full(v, 4);
  CHECK(res.converged);
  CHECK(res.iterations <= 10);
  // Restarting at the fixed point should stay there almost immediately.
  auto again = quant::octav_threshold_full(v, 4, 10, 1e-6, res.threshold);
  CHECK(again.converged);
  CHECK(again.iterations <= 2);
  CHECK(std::abs(again.threshold - res.threshold) <
        1e-4 * std::abs(res.threshold));
}

TEST_CASE("all-zero tensors are degenerate") {
  std::vector<double> z(64, 0.0);
  CHECK_THROWS_AS(quant::octav_threshold(z, 4), DegenerateTensor);
  CHECK(quant::max_scalar_threshold(z) == 0.0);
}

TEST_CASE("non-finite and invalid arguments are rejected") {
  std::vector<double> bad{1.0, std::numeric_limits<double>::quiet_NaN()};
  std::vector<double> inf{1.0, std::numeric_limits<double>::infinity()};
  quant::QuantSpec spec;
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(quant::quantize(bad, spec, 1.0, rng), NonFiniteInput);
  CHECK_THROWS_AS(quant::quantize(inf, spec, 1.0, rng), NonFiniteInput);
  CHECK_THROWS_AS(quant::octav_threshold(bad, 4), NonFiniteInput);
  CHECK_THROWS_AS(quant::max_scalar_threshold(bad), NonFiniteInput);

  std::vector<double> ok{0.5};
  quant::QuantSpec zero_bits;
  zero_bits.bits = 0;
  CHECK_THROWS_AS(quant::quantize(ok, zero_bits, 1.0, rng), Error);
  quant::QuantSpec wide;
  wide.bits = 33;
  CHECK_THROWS_AS(quant::quantize(ok, wide, 1.0, rng), Error);
  CHECK_THROWS_AS(quant::quantize(ok, spec, 0.0, rng), Error);
  CHECK_THROWS_AS(quant::quantize(ok, spec, -1.0, rng), Error);
  CHECK_THROWS_AS(quant::octav_threshold(ok, 0), Error);
  CHECK_THROWS_AS(quant::octav_threshold(std::span<const double>{}, 4), Error);
  CHECK_THROWS_AS(quant::empirical_mse(ok, spec, 1.0, 0, rng), Error);

  quant::QuantizedTensor qt;
  qt.bits = 2;
  qt.scale = 1.0;
  qt.levels = {4};  // only 0..3 are valid at 2 bits
  CHECK_THROWS_AS(quant::dequantize(qt), CorruptPayload);
  qt.levels = {0};
  qt.scale = 0.0;
  CHECK_THROWS_AS(quant::dequantize(qt), CorruptPayload);
  qt.scale = 1.0;
  qt.bits = 0;
  CHECK_THROWS_AS(quant::dequantize(qt), CorruptPayload);
}

TEST_CASE("deterministic rounding error is bounded by half a step") {
  std::mt19937_64 rng(31);
  const double s = 0.8;
  for (int bits : {1, 2, 3, 8}) {
    double step = quant::level_step(s, bits);
    std::vector<double> x(512);
    for (auto& v : x) v = (uniform_unit(rng) * 4.0 - 2.0) * s;
    auto [deq, stats] = quant::fake_quantize_deterministic(x, bits, s);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double c = quant::clip(x[i], s);
      CHECK(std::abs(deq[i] - c) <= step / 2.0 + 1e-12);
    }
    (void)stats;
  }
}

TEST_CASE("grid is symmetric and endpoint inclusive") {
  const double s = 1.7;
  for (int bits : {1, 2, 3, 4, 8}) {
    auto L = quant::level_count(bits);
    CHECK(quant::level_value(0, s, bits) == -s);
    CHECK(quant::level_value(static_cast<std::uint32_t>(L - 1), s, bits) == s);
    for (std::uint64_t k = 0; k < L; ++k) {
      double a = quant::level_value(static_cast<std::uint32_t>(k), s, bits);
      double b =
          quant::level_value(static_cast<std::uint32_t>(L - 1 - k), s, bits);
      CHECK(std::abs(a + b) <= 4e-15 * s);
    }
  }
  CHECK(quant::level_count(32) == std::uint64_t{4294967296});
}

TEST_CASE("exact midpoints round to the larger index") {
  // b = 2, s = 1: zero sits exactly between -1/3 and 1/3.
  std::array<double, 1> zero{0.0};
  CHECK(quant::quantize_deterministic(zero, 2, 1.0).levels[0] == 2);
  // b = 1, s = 1: zero sits exactly between -1 and +1.
  CHECK(quant::quantize_deterministic(zero, 1, 1.0).levels[0] == 1);
  // Just below the midpoint goes down.
  std::array<double, 1> low{-1e-9};
  CHECK(quant::quantize_deterministic(low, 2, 1.0).levels[0] == 1);
}

TEST_CASE("zero dither reduces stochastic to deterministic") {
  std::mt19937_64 rng(41);
  std::vector<double> x(1000);
  for (auto& v : x) v = uniform_unit(rng) * 3.0 - 1.5;
  for (int bits : {1, 2, 4, 8}) {
    quant::QuantSpec spec;
    spec.bits = bits;
    spec.mode = quant::QuantMode::Stochastic;
    MidpointRng mid;
    auto stoch = quant::quantize(x, spec, 1.0, mid);
    auto det = quant::quantize_deterministic(x, bits, 1.0);
    CHECK(stoch.levels == det.levels);
  }
}

TEST_CASE("stochastic draws stay on the bracketing levels") {
  std::mt19937_64 rng(43);
  for (int bits : {1, 2, 4}) {
    for (int rep = 0; rep < 50; ++rep) {
      double x = uniform_unit(rng) * 2.4 - 1.2;
      auto p = quant::stochastic_level_probabilities(x, bits, 1.0);
      std::vector<double> copies(64, x);
      quant::QuantSpec spec;
      spec.bits = bits;
      spec.mode = quant::QuantMode::Stochastic;
      auto qt = quant::quantize(copies, spec, 1.0, rng);
      for (auto lv : qt.levels) {
        bool bracket = lv == p.lower_index || lv == p.lower_index + 1;
        CHECK(bracket);
      }
    }
  }
}

TEST_CASE("stochastic quantization is unbiased inside the clipping range") {
  constexpr std::size_t kDraws = 20000;
  std::mt19937_64 point_rng(47);
  std::mt19937_64 draw_rng(53);
  for (int bits : {1, 2, 4, 8}) {
    double step = quant::level_step(1.0, bits);
    double bound = 4.0 * step / std::sqrt(12.0 * static_cast<double>(kDraws));
    for (int rep = 0; rep < 10; ++rep) {
      double x = uniform_unit(point_rng) * 2.0 - 1.0;
      std::vector<double> copies(kDraws, x);
      quant::QuantSpec spec;
      spec.bits = bits;
      spec.mode = quant::QuantMode::Stochastic;
      auto deq = quant::fake_quantize(copies, spec, 1.0, draw_rng).first;
      double mean = 0.0;
      for (double d : deq) mean += d;
      mean /= static_cast<double>(kDraws);
      CHECK(std::abs(mean - x) < bound);
    }
  }
}

TEST_CASE("error stats measure against the unclipped input") {
  std::vector<double> x{0.5, 2.0, -3.0};
  auto [deq, stats] = quant::fake_quantize_deterministic(x, 2, 1.0);
  CHECK(deq[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(deq[1] == 1.0);
  CHECK(deq[2] == -1.0);
  double expect = (1.0 / 36.0 + 1.0 + 4.0) / 3.0;
  CHECK(stats.msqe == doctest::Approx(expect).epsilon(1e-12));
  CHECK(stats.clipped_fraction == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(quant::empirical_mse_deterministic(x, 2, 1.0) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("32-bit indices dequantize without overflow") {
  std::vector<double> x{-1.0, 0.123, 1.0};
  auto qt = quant::quantize_deterministic(x, 32, 1.0);
  auto deq = quant::dequantize(qt);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(std::abs(deq[i] - x[i]) < 1e-9);
}

TEST_CASE("bracket probabilities clip out-of-range inputs") {
  auto hi = quant::stochastic_level_probabilities(5.0, 2, 1.0);
  CHECK(hi.lower_index == 2);
  CHECK(hi.p_upper == doctest::Approx(1.0).epsilon(1e-15));
  auto lo = quant::stochastic_level_probabilities(-5.0, 2, 1.0);
  CHECK(lo.lower_index == 0);
  CHECK(lo.p_lower == doctest::Approx(1.0).epsilon(1e-15));
  // A value already on a level keeps all mass at that level.
  double q1 = quant::level_value(1, 1.0, 2);
  auto on = quant::stochastic_level_probabilities(q1, 2, 1.0);
  CHECK(on.lower_index == 1);
  CHECK(on.p_lower == 1.0);
}
