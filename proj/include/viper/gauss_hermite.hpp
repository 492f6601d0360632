#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "viper/errors.hpp"

namespace viper {

/// Nodes and weights for int f(x) exp(-x^2) dx ~= sum_i w_i f(x_i).
struct GaussHermiteRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
};

namespace detail {

// Orthonormal Hermite recurrence (weight exp(-x^2)). Returns p_n(x) and
// p_{n-1}(x).
inline std::pair<double, double> hermite_orthonormal(int n, double x) {
  double p_prev = 0.0;
  double p = 1.0 / std::pow(std::numbers::pi, 0.25);
  for (int k = 0; k < n; ++k) {
    const double p_next = x * std::sqrt(2.0 / (k + 1)) * p - std::sqrt(static_cast<double>(k) / (k + 1)) * p_prev;
    p_prev = p;
    p = p_next;
  }
  return {p, p_prev};
}

inline GaussHermiteRule compute_gauss_hermite(int n) {
  // Golub-Welsch for starting values, then Newton on the orthonormal
  // polynomial to polish nodes; weights are 2 / p_n'(x)^2.
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd sub(n > 1 ? n - 1 : 0);
  for (int k = 1; k < n; ++k) sub[k - 1] = std::sqrt(0.5 * k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);

  GaussHermiteRule rule;
  rule.nodes = solver.eigenvalues();
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = rule.nodes[i];
    double dp = 1.0;
    for (int iter = 0; iter < 4; ++iter) {
      const auto [p, p_prev] = hermite_orthonormal(n, x);
      dp = std::sqrt(2.0 * n) * p_prev;
      const double step = p / dp;
      x -= step;
      if (std::fabs(step) <= 1e-15 * std::max(1.0, std::fabs(x))) break;
    }
    const auto [p, p_prev] = hermite_orthonormal(n, x);
    (void)p;
    dp = std::sqrt(2.0 * n) * p_prev;
    rule.nodes[i] = x;
    rule.weights[i] = 2.0 / (dp * dp);
  }
  // Exact symmetry.
  for (int i = 0; i < n / 2; ++i) {
    const double x = 0.5 * (rule.nodes[n - 1 - i] - rule.nodes[i]);
    const double w = 0.5 * (rule.weights[i] + rule.weights[n - 1 - i]);
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

}  // namespace detail

/// Cached n-point rule; thread-safe.
inline const GaussHermiteRule& gauss_hermite(int n) {
  if (n < 1) throw config_error("gauss_hermite: need at least one node");
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<GaussHermiteRule>> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<GaussHermiteRule>(detail::compute_gauss_hermite(n));
  return *slot;
}

/// E[f(X)] for X ~ N(mean, sd^2) with an n-point Gauss-Hermite rule.
template <class F>
double gaussian_expectation(F&& f, double mean, double sd, int n) {
  const auto& rule = gauss_hermite(n);
  const double scale = std::numbers::sqrt2 * sd;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += rule.weights[i] * f(mean + scale * rule.nodes[i]);
  return sum / std::sqrt(std::numbers::pi);
}

}  // namespace viper
