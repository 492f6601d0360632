#pragma once

// Test-only reference computations, independent of the library code paths
// they are used to check.

#include <algorithm>
#include <cmath>

namespace viper::testing {

inline constexpr double kGL8Nodes[] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                                       -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                                       0.7966664774136267,  0.9602898564975363};
inline constexpr double kGL8Weights[] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                         0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                         0.2223810344533745, 0.1012285362903763};

/// Composite 8-point Gauss-Legendre integral of f over [a, b].
template <class F>
double integrate(F&& f, double a, double b, int panels) {
  const double h = (b - a) / panels;
  double sum = 0.0;
  for (int p = 0; p < panels; ++p) {
    const double mid = a + (p + 0.5) * h;
    for (int i = 0; i < 8; ++i) sum += kGL8Weights[i] * f(mid + 0.5 * h * kGL8Nodes[i]);
  }
  return 0.5 * h * sum;
}

/// E[f(X)], X ~ N(mean, sd^2), by composite Gauss-Legendre on mean +- 15 sd
/// with panels no wider than min(sd, 1) / 2.
template <class F>
double gaussian_expectation_reference(F&& f, double mean, double sd) {
  const double lo = mean - 15.0 * sd;
  const double hi = mean + 15.0 * sd;
  const double width = 0.5 * std::min(sd, 1.0);
  const int panels = std::max(64, static_cast<int>(std::ceil((hi - lo) / width)));
  const double norm = 1.0 / (sd * std::sqrt(2.0 * M_PI));
  return integrate(
      [&](double x) {
        const double z = (x - mean) / sd;
        return f(x) * norm * std::exp(-0.5 * z * z);
      },
      lo, hi, panels);
}

inline double softplus_reference(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double softplus_expectation_reference(double theta, double tau) {
  return gaussian_expectation_reference(softplus_reference, theta, tau);
}

/// Central finite difference.
template <class F>
double central_difference(F&& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace viper::testing
