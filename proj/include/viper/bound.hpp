#pragma once

// Upper bound on E[log(1 + exp(X))] for X ~ N(theta, tau^2).
//
// Splitting the expectation at X = 0 and expanding log(1 + e^{-|x|}) in its
// alternating Maclaurin series gives, with g_k^{+/-} = exp(+/-k theta + k^2
// tau^2 / 2) Phi(-/+theta/tau - k tau),
//
//   S_K = tau phi(theta/tau) + theta Phi(theta/tau)
//         + sum_{k=1}^{K} (-1)^{k-1} a_k,      a_k = (g_k^+ + g_k^-) / k.
//
// Odd partial sums bound the expectation from above and even ones from
// below; eta_l = S_{2l-1}. Each g_k is a Gaussian integral of exp(+/-k(z +
// theta)) over a half line, so 0 < g_k <= 1 and the log-space evaluation never
// overflows.
//
// Derivatives used by eta_gradient follow from exp(A) phi(b) = phi(theta/tau)
// for every k, where (A, b) are the exponent and the Phi argument of g_k:
//   d a_k / d theta = g_k^+ - g_k^-
//   d a_k / d tau   = k^2 tau a_k - 2 phi(theta/tau)

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "viper/errors.hpp"
#include "viper/gauss_hermite.hpp"
#include "viper/rng.hpp"
#include "viper/specfun.hpp"

namespace viper {

/// Mean and standard deviation of a scalar Gaussian. tau must be > 0.
struct GaussianMoment {
  double theta = 0.0;
  double tau = 1.0;
};

inline GaussianMoment make_moment(double theta, double tau) {
  if (!std::isfinite(theta) || !std::isfinite(tau) || !(tau > 0.0)) {
    throw config_error("GaussianMoment requires finite theta and tau > 0 (got theta=" +
                       std::to_string(theta) + ", tau=" + std::to_string(tau) + ")");
  }
  return {theta, tau};
}

/// Number of bound pairs; the series has 2l - 1 terms.
class TruncationOrder {
 public:
  static constexpr int kDefault = 12;

  constexpr TruncationOrder() = default;
  explicit TruncationOrder(int l) : l_(l) {
    if (l < 1) throw config_error("TruncationOrder: l must be >= 1, got " + std::to_string(l));
  }

  constexpr int value() const { return l_; }
  constexpr int terms() const { return 2 * l_ - 1; }

 private:
  int l_ = kDefault;
};

struct BoundGradient {
  double d_theta = 0.0;
  double d_tau = 0.0;
};

struct BoundValueGradient {
  double value = 0.0;
  BoundGradient gradient;
};

namespace detail {

struct TermPair {
  double plus;
  double minus;
};

inline TermPair term_pair(double theta, double tau, int k) {
  const double half_var = 0.5 * k * k * tau * tau;
  const double ratio = theta / tau;
  return {exp_times_cdf(k * theta + half_var, -ratio - k * tau),
          exp_times_cdf(-k * theta + half_var, ratio - k * tau)};
}

inline double leading_terms(double theta, double tau) {
  const double ratio = theta / tau;
  return tau * std_normal_pdf(ratio) + theta * std_normal_cdf(ratio);
}

inline void check_moment(const GaussianMoment& m) {
  if (!(m.tau > 0.0) || !std::isfinite(m.theta) || !std::isfinite(m.tau)) {
    throw config_error("bound: invalid GaussianMoment (theta=" + std::to_string(m.theta) +
                       ", tau=" + std::to_string(m.tau) + ")");
  }
}

}  // namespace detail

/// Absolute value of the k-th series term.
inline double term_a_k(const GaussianMoment& m, int k) {
  detail::check_moment(m);
  if (k < 1) throw config_error("term_a_k: k must be >= 1");
  const auto g = detail::term_pair(m.theta, m.tau, k);
  return (g.plus + g.minus) / k;
}

/// S_K; S_0 is the pair of closed-form leading terms.
inline double partial_sum(const GaussianMoment& m, int K) {
  detail::check_moment(m);
  if (K < 0) throw config_error("partial_sum: K must be >= 0");
  double sum = 0.0;
  for (int k = 1; k <= K; ++k) {
    const auto g = detail::term_pair(m.theta, m.tau, k);
    const double a = (g.plus + g.minus) / k;
    sum += (k % 2 == 1) ? a : -a;
  }
  return detail::leading_terms(m.theta, m.tau) + sum;
}

/// eta_l(theta, tau) = S_{2l-1} >= E[softplus(X)].
inline double eta(const GaussianMoment& m, TruncationOrder l = {}) {
  return partial_sum(m, l.terms());
}

/// eta_l together with its partial derivatives in one pass over the terms.
inline BoundValueGradient eta_value_gradient(const GaussianMoment& m, TruncationOrder l = {}) {
  detail::check_moment(m);
  const double theta = m.theta;
  const double tau = m.tau;
  const double ratio = theta / tau;
  const double pdf = std_normal_pdf(ratio);
  BoundValueGradient out;
  double sum = 0.0;  // same order as partial_sum
  out.gradient.d_theta = std_normal_cdf(ratio);
  out.gradient.d_tau = pdf;
  const int K = l.terms();
  for (int k = 1; k <= K; ++k) {
    const auto g = detail::term_pair(theta, tau, k);
    const double a = (g.plus + g.minus) / k;
    const double da_dtheta = g.plus - g.minus;
    const double da_dtau = k * k * tau * a - 2.0 * pdf;
    if (k % 2 == 1) {
      sum += a;
      out.gradient.d_theta += da_dtheta;
      out.gradient.d_tau += da_dtau;
    } else {
      sum -= a;
      out.gradient.d_theta -= da_dtheta;
      out.gradient.d_tau -= da_dtau;
    }
  }
  out.value = detail::leading_terms(theta, tau) + sum;
  return out;
}

inline BoundGradient eta_gradient(const GaussianMoment& m, TruncationOrder l = {}) {
  return eta_value_gradient(m, l).gradient;
}

/// a(t) = (s(t) - 1/2) / t, with a(0) = 1/4.
inline double jj_a(double t) {
  const double at = std::fabs(t);
  if (at < 1e-4) return 0.25 - at * at / 48.0;
  return std::tanh(0.5 * at) / (2.0 * at);
}

/// Gaussian expectation of the Jaakkola-Jordan quadratic bound at t.
inline double jj_expected_bound(const GaussianMoment& m, double t) {
  detail::check_moment(m);
  // -log s(t) = softplus(-t)
  return softplus(-t) + 0.5 * (m.theta + t) + 0.5 * jj_a(t) * (m.theta * m.theta + m.tau * m.tau - t * t);
}

/// Minimizer of jj_expected_bound over t >= 0.
inline double jj_optimal_t(const GaussianMoment& m) {
  detail::check_moment(m);
  return std::hypot(m.theta, m.tau);
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Plain Monte Carlo estimate of E[softplus(X)] from the stream Rng(seed).
inline MonteCarloEstimate mc_expectation(const GaussianMoment& m, std::int64_t n_samples, std::uint64_t seed) {
  detail::check_moment(m);
  if (n_samples < 2) throw config_error("mc_expectation: need at least 2 samples");
  Rng rng(seed);
  // Welford accumulation.
  double mean = 0.0;
  double m2 = 0.0;
  for (std::int64_t j = 0; j < n_samples; ++j) {
    const double v = softplus(m.theta + m.tau * rng.normal());
    const double delta = v - mean;
    mean += delta / static_cast<double>(j + 1);
    m2 += delta * (v - mean);
  }
  const double var = m2 / static_cast<double>(n_samples - 1);
  return {mean, std::sqrt(var / static_cast<double>(n_samples))};
}

/// Gauss-Hermite reference value of E[softplus(X)].
inline double quad_expectation(const GaussianMoment& m, int n_nodes = 200) {
  detail::check_moment(m);
  if (n_nodes < 2) throw config_error("quad_expectation: need at least 2 nodes");
  return gaussian_expectation([](double x) { return softplus(x); }, m.theta, m.tau, n_nodes);
}

}  // namespace viper
