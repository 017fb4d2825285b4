#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedq/errors.hpp"
#include "fedq/tensor.hpp"

namespace fedq::quant {

enum class QuantMode : std::uint8_t { Deterministic, Stochastic };
enum class ThresholdMode : std::uint8_t { Octav, MaxScalar };

/// Per-tensor quantization settings. A b-bit quantizer has L = 2^b levels
/// spread endpoint-inclusively over [-s, s]: q_k = -s + k * 2s/(L-1), so
/// q_0 = -s and q_{L-1} = +s (for b = 1 the grid is {-s, +s}).
struct QuantSpec {
  int bits = 8;
  QuantMode mode = QuantMode::Deterministic;
  ThresholdMode threshold_mode = ThresholdMode::Octav;
};

inline void validate(const QuantSpec& spec) {
  if (spec.bits < 1 || spec.bits > 32)
    throw Error("quant bits must be in [1, 32]");
}

/// Level indices plus the clipping threshold needed to dequantize them.
/// The threshold (scale) is kept in double here; the wire format narrows
/// it to a 32-bit float.
struct QuantizedTensor {
  std::vector<std::uint32_t> levels;
  double scale = 1.0;
  int bits = 8;

  std::size_t count() const { return levels.size(); }
  bool operator==(const QuantizedTensor&) const = default;
};

struct QuantStats {
  double msqe = 0.0;              // mean squared error vs the unclipped input
  double clipped_fraction = 0.0;  // fraction of elements with |x| > s
};

struct OctavResult {
  double threshold = 0.0;
  int iterations = 0;     // recursion applications performed
  bool converged = false; // relative change dropped below tol
};

/// Fixed-point recursion for the MSE-optimal clipping threshold:
///   s_{n+1} = sum(|x| ; |x|>s_n) /
///             ( (4^-b / 3) * #{0 < |x| <= s_n} + #{|x| > s_n} )
/// starting from s_1 = mean(|x|) unless an initial guess is given.
/// All-zero input throws DegenerateTensor. If the numerator or denominator
/// of an iterate vanishes (everything inside the threshold), returns
/// max|x| instead.
OctavResult octav_threshold_full(std::span<const double> values, int bits,
                                 int max_iters = 10, double tol = 1e-6,
                                 std::optional<double> initial = std::nullopt);

double octav_threshold(std::span<const double> values, int bits,
                       int max_iters = 10, double tol = 1e-6);

/// Largest absolute value; 0 for an all-zero tensor (caller decides how to
/// handle that degenerate case).
double max_scalar_threshold(std::span<const double> values);

inline double clip(double x, double s) {
  return std::min(std::max(x, -s), s);
}

inline std::uint64_t level_count(int bits) { return std::uint64_t{1} << bits; }

inline double level_step(double s, int bits) {
  return 2.0 * s / static_cast<double>(level_count(bits) - 1);
}

inline double level_value(std::uint32_t index, double s, int bits) {
  // (index - half) / half is exactly -1, +1 at the ends and exactly odd
  // around the centre, so q_0 = -s and q_{L-1} = +s hold bit-for-bit.
  const double half = static_cast<double>(level_count(bits) - 1) / 2.0;
  return s * ((static_cast<double>(index) - half) / half);
}

namespace detail {

// Nearest level index for a clipped value; exact midpoints go to the
// larger index. Result clamped to [0, L-1].
inline std::uint32_t nearest_index(double clipped, double s, double step,
                                   std::uint64_t nlevels) {
  double z = (clipped + s) / step;
  double k = std::floor(z + 0.5);
  if (k < 0.0) k = 0.0;
  double hi = static_cast<double>(nlevels - 1);
  if (k > hi) k = hi;
  return static_cast<std::uint32_t>(k);
}

inline void require_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) throw NonFiniteInput("non-finite tensor element");
}

// Placeholder generator for code paths that never draw.
struct NullRng {
  std::uint64_t operator()() { return 0; }
};

}  // namespace detail

/// Deterministic nearest-level quantization of pre-clipped inputs.
QuantizedTensor quantize_deterministic(std::span<const double> values,
                                       int bits, double s);

/// Quantize with the mode chosen by `spec`. Stochastic mode adds a uniform
/// dither in [-step/2, step/2) before nearest-level rounding, which maps a
/// value to its two bracketing levels with probabilities proportional to
/// proximity (unbiased inside the clipping range).
template <class Rng>
QuantizedTensor quantize(std::span<const double> values, const QuantSpec& spec,
                         double s, Rng& rng) {
  validate(spec);
  if (!(s > 0.0)) throw Error("quantize: scale must be > 0");
  detail::require_finite(values);
  const std::uint64_t nlevels = level_count(spec.bits);
  const double step = level_step(s, spec.bits);
  QuantizedTensor out;
  out.scale = s;
  out.bits = spec.bits;
  out.levels.resize(values.size());
  if (spec.mode == QuantMode::Deterministic) {
    for (std::size_t i = 0; i < values.size(); ++i)
      out.levels[i] = detail::nearest_index(clip(values[i], s), s, step, nlevels);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      double dither = (uniform_unit(rng) - 0.5) * step;
      out.levels[i] =
          detail::nearest_index(clip(values[i], s) + dither, s, step, nlevels);
    }
  }
  return out;
}

/// Reconstruct values from level indices: q_k = -s + k * step.
/// Throws CorruptPayload if an index is outside [0, 2^b - 1].
std::vector<double> dequantize(const QuantizedTensor& qt);

/// Quantize-then-dequantize used for quantization-aware training. The
/// returned stats measure error against the ORIGINAL unclipped input, so
/// both clipping and discretization error are captured.
template <class Rng>
std::pair<std::vector<double>, QuantStats> fake_quantize(
    std::span<const double> values, const QuantSpec& spec, double s, Rng& rng) {
  QuantizedTensor qt = quantize(values, spec, s, rng);
  std::vector<double> deq = dequantize(qt);
  QuantStats stats;
  std::size_t clipped = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    double e = values[i] - deq[i];
    acc += e * e;
    if (std::abs(values[i]) > s) ++clipped;
  }
  if (!values.empty()) {
    stats.msqe = acc / static_cast<double>(values.size());
    stats.clipped_fraction =
        static_cast<double>(clipped) / static_cast<double>(values.size());
  }
  return {std::move(deq), stats};
}

std::pair<std::vector<double>, QuantStats> fake_quantize_deterministic(
    std::span<const double> values, int bits, double s);

/// Empirical estimate of E[(X - Q(clip(X)))^2] over the given values,
/// averaged over `trials` independent quantization passes (averaging only
/// matters for stochastic mode).
template <class Rng>
double empirical_mse(std::span<const double> values, const QuantSpec& spec,
                     double s, int trials, Rng& rng) {
  if (trials < 1) throw Error("empirical_mse: trials must be >= 1");
  double acc = 0.0;
  for (int t = 0; t < trials; ++t)
    acc += fake_quantize(values, spec, s, rng).second.msqe;
  return acc / static_cast<double>(trials);
}

double empirical_mse_deterministic(std::span<const double> values, int bits,
                                   double s);

/// Probabilities with which a stochastically quantized scalar lands on its
/// two bracketing levels. For x on a level, p_lower = 1 at that index.
struct BracketProbabilities {
  std::uint32_t lower_index = 0;
  double p_lower = 1.0;
  double p_upper = 0.0;
};

BracketProbabilities stochastic_level_probabilities(double x, int bits,
                                                    double s);

}  // namespace fedq::quant
