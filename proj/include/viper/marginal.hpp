#pragma once

// Summed softplus expectations over a set of scalar Gaussian marginals
// f_i ~ N(theta_i, tau_i^2), with derivatives in theta_i and tau_i. These are
// the only pieces of the logistic and GP objectives that differ between
// VI-PER, VI-PG and VI-MC.

#include <cmath>
#include <cstdint>

#include <Eigen/Core>

#include "viper/bound.hpp"
#include "viper/rng.hpp"
#include "viper/specfun.hpp"

namespace viper {

/// Floor applied to marginal standard deviations before they reach a bound.
inline constexpr double kMinTau = 1e-8;

namespace detail {

inline void require_finite_moments(const Eigen::VectorXd& theta, const Eigen::VectorXd& tau) {
  if (!theta.allFinite() || !tau.allFinite()) throw numerical_error("marginal moments are not finite");
}

}  // namespace detail

/// Sum of eta_l(theta_i, tau_i).
class EtaTerm {
 public:
  explicit EtaTerm(TruncationOrder l = {}) : l_(l) {}

  double operator()(const Eigen::VectorXd& theta, const Eigen::VectorXd& tau, Eigen::VectorXd* d_theta,
                    Eigen::VectorXd* d_tau) const {
    detail::require_finite_moments(theta, tau);
    double total = 0.0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const GaussianMoment m{theta[i], tau[i]};
      if (d_theta) {
        const auto vg = eta_value_gradient(m, l_);
        total += vg.value;
        (*d_theta)[i] = vg.gradient.d_theta;
        (*d_tau)[i] = vg.gradient.d_tau;
      } else {
        total += eta(m, l_);
      }
    }
    return total;
  }

 private:
  TruncationOrder l_;
};

/// Sum of the Jaakkola-Jordan bound at the per-marginal optimum t_i = hypot(theta_i, tau_i).
/// Since t_i minimizes the bound, the derivatives at fixed t are also those of
/// the profiled function.
class JaakkolaJordanTerm {
 public:
  double operator()(const Eigen::VectorXd& theta, const Eigen::VectorXd& tau, Eigen::VectorXd* d_theta,
                    Eigen::VectorXd* d_tau) const {
    detail::require_finite_moments(theta, tau);
    double total = 0.0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const GaussianMoment m{theta[i], tau[i]};
      const double t = jj_optimal_t(m);
      total += jj_expected_bound(m, t);
      if (d_theta) {
        const double a = jj_a(t);
        (*d_theta)[i] = 0.5 + a * theta[i];
        (*d_tau)[i] = a * tau[i];
      }
    }
    return total;
  }
};

/// Monte Carlo estimate with S reparameterized draws per marginal,
/// f_is = theta_i + tau_i z_is. resample() refreshes all z from the stream.
class MonteCarloTerm {
 public:
  MonteCarloTerm(Eigen::Index n, int samples, std::uint64_t seed) : z_(n, samples), rng_(seed) {
    if (samples < 1) throw config_error("MonteCarloTerm: need at least one sample");
  }

  void resample() { rng_.fill_normal(z_); }

  const Eigen::MatrixXd& draws() const { return z_; }

  double operator()(const Eigen::VectorXd& theta, const Eigen::VectorXd& tau, Eigen::VectorXd* d_theta,
                    Eigen::VectorXd* d_tau) const {
    detail::require_finite_moments(theta, tau);
    const Eigen::Index n = theta.size();
    const Eigen::Index S = z_.cols();
    if (z_.rows() != n) throw dimension_error("MonteCarloTerm: draws sized for a different n");
    Eigen::ArrayXd value = Eigen::ArrayXd::Zero(n);
    Eigen::ArrayXd g_theta, g_tau;
    if (d_theta) {
      g_theta = Eigen::ArrayXd::Zero(n);
      g_tau = Eigen::ArrayXd::Zero(n);
    }
    // softplus(f) = max(f, 0) + log(1 + e^{-|f|}) and sigmoid(f) = exp(min(f, 0) - log(1 + e^{-|f|})).
    // log(1 + x) rather than log1p(x) because Eigen vectorizes it (absolute error < 2e-16).
    Eigen::ArrayXd f(n), l(n);
    for (Eigen::Index s = 0; s < S; ++s) {
      const auto z = z_.col(s).array();
      f = theta.array() + tau.array() * z;
      l = ((-f.abs()).exp() + 1.0).log();
      value += f.max(0.0) + l;
      if (d_theta) {
        l = (f.min(0.0) - l).exp();
        g_theta += l;
        g_tau += l * z;
      }
    }
    const double inv = 1.0 / static_cast<double>(S);
    if (d_theta) {
      *d_theta = g_theta.matrix() * inv;
      *d_tau = g_tau.matrix() * inv;
    }
    return value.sum() * inv;
  }

 private:
  Eigen::MatrixXd z_;
  Rng rng_;
};

}  // namespace viper
