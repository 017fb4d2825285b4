#include "fedq/quant.hpp"

#include <algorithm>
#include <cmath>

namespace fedq::quant {

OctavResult octav_threshold_full(std::span<const double> values, int bits,
                                 int max_iters, double tol,
                                 std::optional<double> initial) {
  if (values.empty()) throw Error("octav_threshold: empty input");
  if (bits < 1 || bits > 32) throw Error("octav_threshold: bits out of range");
  if (max_iters < 1) throw Error("octav_threshold: max_iters must be >= 1");
  if (!(tol > 0.0)) throw Error("octav_threshold: tol must be > 0");
  detail::require_finite(values);

  double abs_sum = 0.0;
  double abs_max = 0.0;
  for (double v : values) {
    double a = std::abs(v);
    abs_sum += a;
    abs_max = std::max(abs_max, a);
  }
  if (abs_max == 0.0)
    throw DegenerateTensor("octav_threshold: all-zero tensor");

  const double inner_coeff =
      std::pow(4.0, -static_cast<double>(bits)) / 3.0;

  double s = initial.value_or(abs_sum / static_cast<double>(values.size()));
  OctavResult result;
  // Collapsed recursion: nothing left above the iterate, so the map is
  // undefined. max|x| is the fixed point in that regime.
  bool collapsed = false;
  auto step_from = [&](double at) {
    double num = 0.0;
    std::size_t n_above = 0;
    std::size_t n_inner = 0;
    for (double v : values) {
      double a = std::abs(v);
      if (a > at)
        num += a, ++n_above;
      else if (a > 0.0)
        ++n_inner;
    }
    double den = inner_coeff * static_cast<double>(n_inner) +
                 static_cast<double>(n_above);
    if (num == 0.0 || den == 0.0) {
      collapsed = true;
      return abs_max;
    }
    return num / den;
  };
  for (int it = 0; it < max_iters; ++it) {
    double next = step_from(s);
    result.iterations = it + 1;
    if (collapsed) {
      result.threshold = abs_max;
      result.converged = true;
      return result;
    }
    double rel = std::abs(next - s) / std::max(std::abs(s), 1e-300);
    s = next;
    if (rel < tol) {
      result.converged = true;
      break;
    }
  }
  if (!result.converged) {
    // Detecting a fixed point costs one evaluation more than reaching it:
    // an iterate that lands exactly at the cap still deserves the flag, so
    // certify it with a residual check that does not advance s.
    double next = step_from(s);
    if (collapsed) {
      result.threshold = abs_max;
      result.converged = true;
      return result;
    }
    if (std::abs(next - s) / std::max(std::abs(s), 1e-300) < tol)
      result.converged = true;
  }
  result.threshold = s;
  return result;
}

double octav_threshold(std::span<const double> values, int bits, int max_iters,
                       double tol) {
  return octav_threshold_full(values, bits, max_iters, tol).threshold;
}

double max_scalar_threshold(std::span<const double> values) {
  if (values.empty()) throw Error("max_scalar_threshold: empty input");
  detail::require_finite(values);
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return m;
}

QuantizedTensor quantize_deterministic(std::span<const double> values,
                                       int bits, double s) {
  QuantSpec spec;
  spec.bits = bits;
  spec.mode = QuantMode::Deterministic;
  detail::NullRng rng;
  return quantize(values, spec, s, rng);
}

std::vector<double> dequantize(const QuantizedTensor& qt) {
  if (qt.bits < 1 || qt.bits > 32)
    throw CorruptPayload("dequantize: bits out of range");
  if (!(qt.scale > 0.0)) throw CorruptPayload("dequantize: scale must be > 0");
  const std::uint64_t nlevels = level_count(qt.bits);
  std::vector<double> out(qt.levels.size());
  for (std::size_t i = 0; i < qt.levels.size(); ++i) {
    if (qt.levels[i] >= nlevels)
      throw CorruptPayload("dequantize: level index out of range");
    out[i] = level_value(qt.levels[i], qt.scale, qt.bits);
  }
  return out;
}

std::pair<std::vector<double>, QuantStats> fake_quantize_deterministic(
    std::span<const double> values, int bits, double s) {
  QuantSpec spec;
  spec.bits = bits;
  spec.mode = QuantMode::Deterministic;
  detail::NullRng rng;
  return fake_quantize(values, spec, s, rng);
}

double empirical_mse_deterministic(std::span<const double> values, int bits,
                                   double s) {
  return fake_quantize_deterministic(values, bits, s).second.msqe;
}

BracketProbabilities stochastic_level_probabilities(double x, int bits,
                                                    double s) {
  if (!(s > 0.0)) throw Error("stochastic_level_probabilities: s must be > 0");
  const std::uint64_t nlevels = level_count(bits);
  const double step = level_step(s, bits);
  double xt = clip(x, s);
  double z = (xt + s) / step;  // fractional index in [0, L-1]
  double lower = std::floor(z);
  if (lower < 0.0) lower = 0.0;
  if (lower > static_cast<double>(nlevels - 2))
    lower = static_cast<double>(nlevels - 2);
  BracketProbabilities out;
  out.lower_index = static_cast<std::uint32_t>(lower);
  // Interpolate against the actual level values rather than the raw ratio so
  // an input sitting exactly on a level gets probability exactly 1.
  double ql = level_value(out.lower_index, s, bits);
  double qu = level_value(out.lower_index + 1, s, bits);
  out.p_upper = std::clamp((xt - ql) / (qu - ql), 0.0, 1.0);
  out.p_lower = 1.0 - out.p_upper;
  return out;
}

}  // namespace fedq::quant
