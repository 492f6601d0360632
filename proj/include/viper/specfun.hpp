#pragma once

// Scalar special functions for Gaussian expectations.
//
// Everything that multiplies a large exponential by a small normal tail goes
// through log_std_normal_cdf so that products such as exp(k^2 tau^2 / 2) *
// Phi(-k tau) stay finite.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "viper/errors.hpp"

namespace viper {

inline constexpr double kInvSqrt2Pi = 0.398942280401432677939946059934381868;
inline constexpr double kLogSqrt2Pi = 0.918938533204672741780329736405617640;
inline constexpr double kSqrt1_2 = 0.707106781186547524400844362104849039;

inline double std_normal_pdf(double x) {
  return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline double std_normal_cdf(double x) {
  return 0.5 * std::erfc(-x * kSqrt1_2);
}

namespace detail {

// log of the Mills-ratio series R(t) = Phi(-t) / phi(t) * t for t >= 20:
// 1 - 1/t^2 + 3/t^4 - 15/t^6 + ...  Twelve terms leave < 1e-20 at t = 20.
inline double log_mills_series(double t) {
  const double inv_t2 = 1.0 / (t * t);
  double term = 1.0;
  double sum = 1.0;
  for (int n = 1; n <= 12; ++n) {
    term *= -(2.0 * n - 1.0) * inv_t2;
    sum += term;
  }
  return std::log(sum);
}

inline constexpr double kTailSwitch = -20.0;

}  // namespace detail

/// log Phi(x), accurate from x = -1e4 up to +inf.
inline double log_std_normal_cdf(double x) {
  if (x >= 0.0) {
    return std::log1p(-0.5 * std::erfc(x * kSqrt1_2));
  }
  if (x > detail::kTailSwitch) {
    return std::log(0.5 * std::erfc(-x * kSqrt1_2));
  }
  const double t = -x;
  return -0.5 * t * t - std::log(t) - kLogSqrt2Pi + detail::log_mills_series(t);
}

/// exp(a) * Phi(b) evaluated as exp(a + log Phi(b)).
///
/// Underflow returns 0. A product that exceeds the double range throws
/// overflow_error instead of returning inf.
inline double exp_times_cdf(double a, double b) {
  const double log_value = a + log_std_normal_cdf(b);
  if (log_value > std::log(std::numeric_limits<double>::max())) {
    throw overflow_error("exp_times_cdf: exp(" + std::to_string(a) + ") * Phi(" +
                         std::to_string(b) + ") exceeds double range");
  }
  return std::exp(log_value);
}

/// Logistic sigmoid s(x) = 1 / (1 + exp(-x)).
inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) as max(x, 0) + log1p(exp(-|x|)).
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

}  // namespace viper
