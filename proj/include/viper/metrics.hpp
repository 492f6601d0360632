#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "viper/bound.hpp"
#include "viper/errors.hpp"
#include "viper/linalg.hpp"
#include "viper/vblogit.hpp"

namespace viper {

/// Phi^{-1}(0.975).
inline constexpr double kZ975 = 1.959963984540054;

struct KLPair {
  double fwd = 0.0;  // KL(q_ref || q)
  double rev = 0.0;  // KL(q || q_ref)
};

/// Both directions of the Gaussian KL between two variational Gaussians.
inline KLPair kl_mc_gaussians(const VariationalGaussian& q_ref, const VariationalGaussian& q) {
  if (q_ref.dim() != q.dim()) {
    throw dimension_error("kl_mc_gaussians: dimensions " + std::to_string(q_ref.dim()) + " and " +
                          std::to_string(q.dim()) + " differ");
  }
  auto kl = [](const VariationalGaussian& a, const VariationalGaussian& b) {
    a.validate();
    b.validate();
    const Eigen::Index d = a.dim();
    // tr(Sb^{-1} Sa) = ||Lb^{-1} La||_F^2, Mahalanobis term via Lb^{-1}(mu_a - mu_b).
    const Eigen::MatrixXd M = b.L.triangularView<Eigen::Lower>().solve(a.L);
    const Eigen::VectorXd r = b.L.triangularView<Eigen::Lower>().solve(a.mu - b.mu);
    const double log_det = 2.0 * (b.L.diagonal().array().log().sum() - a.L.diagonal().array().log().sum());
    return std::max(0.0, 0.5 * (M.squaredNorm() + r.squaredNorm() - static_cast<double>(d) + log_det));
  };
  return {kl(q_ref, q), kl(q, q_ref)};
}

/// Same, for products of independent scalar Gaussians given as marginal moments.
inline KLPair kl_marginals(const std::vector<GaussianMoment>& ref, const std::vector<GaussianMoment>& q) {
  if (ref.size() != q.size()) throw dimension_error("kl_marginals: lengths differ");
  auto kl1 = [](const GaussianMoment& a, const GaussianMoment& b) {
    const double r = a.tau / b.tau;
    const double d = (a.theta - b.theta) / b.tau;
    return 0.5 * (r * r + d * d - 1.0) - std::log(r);
  };
  KLPair out;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    out.fwd += kl1(ref[i], q[i]);
    out.rev += kl1(q[i], ref[i]);
  }
  out.fwd = std::max(0.0, out.fwd);
  out.rev = std::max(0.0, out.rev);
  return out;
}

inline double mse_posterior_mean(const Eigen::VectorXd& theta, const Eigen::VectorXd& f0) {
  if (theta.size() != f0.size()) throw dimension_error("mse_posterior_mean: lengths differ");
  if (theta.size() == 0) throw dimension_error("mse_posterior_mean: empty input");
  return (theta - f0).squaredNorm() / static_cast<double>(theta.size());
}

struct CoverageResult {
  double coverage = 0.0;
  double mean_width = 0.0;
};

/// Equal-tailed Gaussian intervals theta_i +- z tau_i. The closed interval counts as inside.
inline CoverageResult coverage_and_width(const std::vector<GaussianMoment>& moments, const Eigen::VectorXd& f0,
                                         double level = 0.95) {
  if (static_cast<Eigen::Index>(moments.size()) != f0.size()) {
    throw dimension_error("coverage_and_width: lengths differ");
  }
  if (moments.empty()) throw dimension_error("coverage_and_width: empty input");
  if (!(level > 0.0 && level < 1.0)) throw config_error("coverage_and_width: level must lie in (0, 1)");
  double z = kZ975;
  if (level != 0.95) {
    // Phi^{-1}((1 + level) / 2) by bisection on the cdf.
    const double target = 0.5 * (1.0 + level);
    double lo = 0.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (std_normal_cdf(mid) < target ? lo : hi) = mid;
    }
    z = 0.5 * (lo + hi);
  }
  std::size_t inside = 0;
  double width = 0.0;
  for (std::size_t i = 0; i < moments.size(); ++i) {
    const double half = z * moments[i].tau;
    if (std::fabs(f0[static_cast<Eigen::Index>(i)] - moments[i].theta) <= half) ++inside;
    width += 2.0 * half;
  }
  const auto n = static_cast<double>(moments.size());
  return {static_cast<double>(inside) / n, width / n};
}

/// Mann-Whitney AUC with half credit for ties.
inline double auc(const Eigen::VectorXd& y, const Eigen::VectorXd& scores) {
  if (y.size() != scores.size()) throw dimension_error("auc: lengths differ");
  const Eigen::Index n = y.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores[a] < scores[b]; });
  // Sum of midranks of the positives.
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j + 1 < n && scores[order[static_cast<std::size_t>(j + 1)]] == scores[order[static_cast<std::size_t>(i)]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) {
      const double label = y[order[static_cast<std::size_t>(k)]];
      if (label != 0.0 && label != 1.0) throw data_error("auc: labels must be 0 or 1");
      if (label == 1.0) {
        rank_sum += midrank;
        n_pos += 1.0;
      }
    }
    i = j + 1;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw data_error("auc: both classes must be present");
  return (rank_sum - 0.5 * n_pos * (n_pos + 1.0)) / (n_pos * n_neg);
}

/// Linear-interpolation quantile: index h = p (n - 1) into the sorted sample.
inline double quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw dimension_error("quantile: empty input");
  if (!(prob >= 0.0 && prob <= 1.0)) throw config_error("quantile: probability must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = prob * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct QuantileSummary {
  double q025 = 0.0;
  double median = 0.0;
  double q975 = 0.0;
};

inline QuantileSummary quantile_summary(const std::vector<double>& values) {
  return {quantile(values, 0.025), quantile(values, 0.5), quantile(values, 0.975)};
}

}  // namespace viper
