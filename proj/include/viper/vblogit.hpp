#pragma once

// Variational Bayesian logistic regression.
//
// Objective for q = N(mu, L L^T) and prior N(m, S):
//   F(mu, L) = sum_i [y_i theta_i - E_i(theta_i, tau_i)] - KL(q || prior),
//   theta_i = x_i^T mu,  tau_i = ||L^T x_i||,
// where E_i is eta_l (VI-PER), the JJ bound at its optimal t (VI-PG) or a
// Monte Carlo estimate (VI-MC). Gradients:
//   dF/dmu = X^T (y - dE/dtheta) - S^{-1}(mu - m)
//   dF/dL  = -X^T diag(dE/dtau / tau) X L - S^{-1} L + diag(1 / L_jj)   (lower part)
//
// Parameter vector: [mu; lower triangle of L column by column], or [mu; diag L]
// for the mean-field family. L is optimized directly; points with a
// non-positive diagonal are outside the domain and get rejected by the line
// search.
//
// Random streams for a fit with seed s: derive_seed(s, 1) draws the initial
// mean, derive_seed(s, 2) feeds the VI-MC batches.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "viper/bound.hpp"
#include "viper/dataset.hpp"
#include "viper/errors.hpp"
#include "viper/gauss_hermite.hpp"
#include "viper/linalg.hpp"
#include "viper/marginal.hpp"
#include "viper/optim.hpp"
#include "viper/rng.hpp"

namespace viper {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Family { full, mean_field };

inline const char* to_string(Family f) { return f == Family::full ? "full" : "mean_field"; }

struct GaussianPrior {
  VectorXd m;
  MatrixXd S;

  static GaussianPrior standard(Eigen::Index p) { return {VectorXd::Zero(p), MatrixXd::Identity(p, p)}; }
  Eigen::Index dim() const { return m.size(); }
};

struct VariationalGaussian {
  VectorXd mu;
  MatrixXd L;  // lower triangular, positive diagonal
  Family family = Family::full;

  Eigen::Index dim() const { return mu.size(); }
  MatrixXd covariance() const { return L * L.transpose(); }
  VectorXd marginal_sd() const { return L.rowwise().norm(); }

  void validate() const {
    if (L.rows() != mu.size() || L.cols() != mu.size()) throw dimension_error("VariationalGaussian: L is not d x d");
    linalg::require_positive_diagonal(L, "VariationalGaussian");
    if (family == Family::mean_field && !L.isDiagonal(0.0)) {
      throw config_error("VariationalGaussian: mean-field scale must be diagonal");
    }
  }

  static VariationalGaussian from_covariance(const VectorXd& mu, const MatrixXd& Sigma, Family family = Family::full) {
    return {mu, linalg::cholesky_lower(Sigma, "VariationalGaussian covariance"), family};
  }
};

namespace detail {

struct PriorCache {
  VectorXd m;
  MatrixXd S_inv;
  double log_det_S = 0.0;

  explicit PriorCache(const GaussianPrior& prior) : m(prior.m) {
    if (prior.S.rows() != prior.m.size() || prior.S.cols() != prior.m.size()) {
      throw dimension_error("GaussianPrior: S is not p x p");
    }
    const MatrixXd Ls = linalg::cholesky_lower(prior.S, "GaussianPrior S");
    S_inv = linalg::cholesky_inverse(Ls);
    log_det_S = linalg::log_det_from_cholesky(Ls);
  }

  double kl(const VectorXd& mu, const MatrixXd& L) const {
    const VectorXd d = mu - m;
    const double tr = (S_inv * L).cwiseProduct(L).sum();
    const double log_det_q = 2.0 * L.diagonal().array().log().sum();
    return 0.5 * (log_det_S - log_det_q - static_cast<double>(mu.size()) + tr + d.dot(S_inv * d));
  }
};

}  // namespace detail

/// KL(q || p) for Gaussians in closed form.
inline double gaussian_kl(const VariationalGaussian& q, const GaussianPrior& p) {
  if (q.dim() != p.dim()) {
    throw dimension_error("gaussian_kl: q has dimension " + std::to_string(q.dim()) + ", prior " +
                          std::to_string(p.dim()));
  }
  q.validate();
  return std::max(0.0, detail::PriorCache(p).kl(q.mu, q.L));
}

inline void check_dimensions(const LabeledDataset& data, Eigen::Index d, const char* what) {
  if (data.p() != d) {
    throw dimension_error(std::string(what) + ": data has p = " + std::to_string(data.p()) +
                          " but the Gaussian has dimension " + std::to_string(d));
  }
}

/// theta_i = x_i^T mu and tau_i = ||L^T x_i|| (floored at kMinTau).
inline std::vector<GaussianMoment> local_moments(const LabeledDataset& data, const VariationalGaussian& q) {
  check_dimensions(data, q.dim(), "local_moments");
  const VectorXd theta = data.X * q.mu;
  const VectorXd tau = (data.X * q.L).rowwise().norm();
  std::vector<GaussianMoment> out(static_cast<std::size_t>(data.n()));
  for (Eigen::Index i = 0; i < data.n(); ++i) out[static_cast<std::size_t>(i)] = {theta[i], std::max(tau[i], kMinTau)};
  return out;
}

/// Packs, unpacks and differentiates the logistic objective.
class LogisticObjective {
 public:
  LogisticObjective(const LabeledDataset& data, const GaussianPrior& prior, Family family)
      : data_(data), prior_(prior), family_(family), p_(prior.dim()) {
    data.validate();
    check_dimensions(data, p_, "LogisticObjective");
  }

  Eigen::Index size() const { return p_ + (family_ == Family::full ? p_ * (p_ + 1) / 2 : p_); }

  VectorXd pack(const VariationalGaussian& q) const {
    VectorXd x(size());
    x.head(p_) = q.mu;
    Eigen::Index k = p_;
    for (Eigen::Index j = 0; j < p_; ++j) {
      if (family_ == Family::full) {
        for (Eigen::Index i = j; i < p_; ++i) x[k++] = q.L(i, j);
      } else {
        x[k++] = q.L(j, j);
      }
    }
    return x;
  }

  VariationalGaussian unpack(const VectorXd& x) const {
    VariationalGaussian q{x.head(p_), MatrixXd::Zero(p_, p_), family_};
    Eigen::Index k = p_;
    for (Eigen::Index j = 0; j < p_; ++j) {
      if (family_ == Family::full) {
        for (Eigen::Index i = j; i < p_; ++i) q.L(i, j) = x[k++];
      } else {
        q.L(j, j) = x[k++];
      }
    }
    return q;
  }

  /// F at x; writes dF/dx when grad is non-null. Throws numerical_error outside the domain.
  template <class Term>
  double operator()(const VectorXd& x, VectorXd* grad, const Term& term) const {
    const VariationalGaussian q = unpack(x);
    linalg::require_positive_diagonal(q.L, "LogisticObjective");
    const VectorXd theta = data_.X * q.mu;
    const MatrixXd V = data_.X * q.L;
    VectorXd tau = V.rowwise().norm();
    const Eigen::Index n = data_.n();
    VectorXd dE_dtheta(n), dE_dtau(n);
    for (Eigen::Index i = 0; i < n; ++i) tau[i] = std::max(tau[i], kMinTau);
    const double expected = term(theta, tau, grad ? &dE_dtheta : nullptr, grad ? &dE_dtau : nullptr);
    const double value = data_.y.dot(theta) - expected - prior_.kl(q.mu, q.L);
    if (grad) {
      grad->resize(size());
      grad->head(p_) = data_.X.transpose() * (data_.y - dE_dtheta) - prior_.S_inv * (q.mu - prior_.m);
      VectorXd w(n);
      for (Eigen::Index i = 0; i < n; ++i) w[i] = tau[i] > kMinTau ? dE_dtau[i] / tau[i] : 0.0;
      MatrixXd gL = -(data_.X.transpose() * (w.asDiagonal() * V)) - prior_.S_inv * q.L;
      gL.diagonal() += q.L.diagonal().cwiseInverse();
      Eigen::Index k = p_;
      for (Eigen::Index j = 0; j < p_; ++j) {
        if (family_ == Family::full) {
          for (Eigen::Index i = j; i < p_; ++i) (*grad)[k++] = gL(i, j);
        } else {
          (*grad)[k++] = gL(j, j);
        }
      }
    }
    return value;
  }

  const LabeledDataset& data() const { return data_; }
  Family family() const { return family_; }

 private:
  const LabeledDataset& data_;
  detail::PriorCache prior_;
  Family family_;
  Eigen::Index p_;
};

/// VI-PER objective F_l(mu, Sigma).
inline double elbo_bound(const LabeledDataset& data, const VariationalGaussian& q, const GaussianPrior& prior,
                         TruncationOrder l = {}) {
  q.validate();
  const LogisticObjective obj(data, prior, Family::full);
  VariationalGaussian full = q;
  full.family = Family::full;
  return obj(obj.pack(full), nullptr, EtaTerm(l));
}

/// JJ-bounded ELBO at the optimal t for every observation.
inline double elbo_jj(const LabeledDataset& data, const VariationalGaussian& q, const GaussianPrior& prior) {
  q.validate();
  const LogisticObjective obj(data, prior, Family::full);
  VariationalGaussian full = q;
  full.family = Family::full;
  return obj(obj.pack(full), nullptr, JaakkolaJordanTerm{});
}

/// Monte Carlo ELBO: beta_s = mu + L z_s, z_s drawn from Rng(seed) in blocks
/// of 256 samples (p normals per sample, column-major), exact KL.
inline MonteCarloEstimate elbo_mc(const LabeledDataset& data, const VariationalGaussian& q, const GaussianPrior& prior,
                                  std::int64_t n_samples, std::uint64_t seed) {
  if (n_samples < 2) throw config_error("elbo_mc: need at least 2 samples");
  data.validate();
  check_dimensions(data, q.dim(), "elbo_mc");
  const double kl = gaussian_kl(q, prior);
  Rng rng(seed);
  const VectorXd theta = data.X * q.mu;
  const MatrixXd V = data.X * q.L;
  const double ytheta = data.y.dot(theta);
  constexpr Eigen::Index kBlock = 256;
  MatrixXd z(q.dim(), kBlock);
  double mean = 0.0;
  double m2 = 0.0;
  std::int64_t done = 0;
  while (done < n_samples) {
    const Eigen::Index b = static_cast<Eigen::Index>(std::min<std::int64_t>(kBlock, n_samples - done));
    rng.fill_normal(z.leftCols(b));
    const MatrixXd F = V * z.leftCols(b);  // n x b deviations from theta
    for (Eigen::Index s = 0; s < b; ++s) {
      double ll = ytheta + data.y.dot(F.col(s));
      for (Eigen::Index i = 0; i < data.n(); ++i) ll -= softplus(theta[i] + F(i, s));
      ++done;
      const double delta = ll - mean;
      mean += delta / static_cast<double>(done);
      m2 += delta * (ll - mean);
    }
  }
  const double var = m2 / static_cast<double>(n_samples - 1);
  return {mean - kl, std::sqrt(var / static_cast<double>(n_samples))};
}

struct FitConfig {
  TruncationOrder l;
  OptimizerKind optimizer = OptimizerKind::lbfgs;
  double step_size = 0.05;
  int max_iters = 2000;
  double rel_tol = 1e-7;
  int mc_samples = 1000;
  std::uint64_t seed = 0;
  Family family = Family::full;
  int lbfgs_history = 10;
  StochasticOptions stochastic;

  void validate() const {
    if (!(rel_tol >= 1e-10 && rel_tol <= 1e-2)) {
      throw config_error("FitConfig: rel_tol must lie in [1e-10, 1e-2], got " + std::to_string(rel_tol));
    }
    if (!(step_size > 0.0)) throw config_error("FitConfig: step_size must be > 0");
    if (max_iters < 0) throw config_error("FitConfig: max_iters must be >= 0");
    if (mc_samples < 1) throw config_error("FitConfig: mc_samples must be >= 1");
    if (lbfgs_history < 1) throw config_error("FitConfig: lbfgs_history must be >= 1");
    if (!(stochastic.ema_decay >= 0.0 && stochastic.ema_decay < 1.0)) {
      throw config_error("FitConfig: ema_decay must lie in [0, 1)");
    }
    if (stochastic.average_window < 1) throw config_error("FitConfig: average_window must be >= 1");
  }

  OptimizerOptions optimizer_options() const {
    OptimizerOptions o;
    o.kind = optimizer;
    o.step_size = step_size;
    o.max_iters = max_iters;
    o.rel_tol = rel_tol;
    o.history = lbfgs_history;
    return o;
  }
};

struct FitResult {
  VariationalGaussian posterior;
  std::vector<double> elbo_trace;
  int iterations = 0;
  bool converged = false;
  std::string stop_reason;
  double wall_time_s = 0.0;
};

namespace detail {

inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kMonteCarloStream = 2;

inline VariationalGaussian initial_gaussian(Eigen::Index p, Family family, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kInitStream));
  return {rng.normal_vector(p), std::sqrt(0.35) * MatrixXd::Identity(p, p), family};
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline FitResult finish(const LogisticObjective& obj, const OptimizerResult& r, const Stopwatch& clock) {
  FitResult out;
  out.posterior = obj.unpack(r.x);
  out.elbo_trace = r.trace;
  out.iterations = static_cast<int>(r.trace.size());
  out.converged = r.converged;
  out.stop_reason = to_string(r.reason);
  out.wall_time_s = clock.seconds();
  return out;
}

}  // namespace detail

/// VI-PER: maximize F_l over (mu, L).
inline FitResult fit_viper(const LabeledDataset& data, const GaussianPrior& prior, const FitConfig& config) {
  config.validate();
  detail::Stopwatch clock;
  const LogisticObjective obj(data, prior, config.family);
  const EtaTerm term(config.l);
  auto f = [&](const VectorXd& x, VectorXd* g) { return obj(x, g, term); };
  const auto r = maximize(f, obj.pack(detail::initial_gaussian(prior.dim(), config.family, config.seed)),
                          config.optimizer_options());
  return detail::finish(obj, r, clock);
}

/// VI-MC: stochastic maximization of the reparameterized Monte Carlo ELBO
/// with mc_samples fresh draws per observation and iteration.
inline FitResult fit_vimc(const LabeledDataset& data, const GaussianPrior& prior, const FitConfig& config) {
  config.validate();
  detail::Stopwatch clock;
  const LogisticObjective obj(data, prior, config.family);
  MonteCarloTerm term(data.n(), config.mc_samples, derive_seed(config.seed, detail::kMonteCarloStream));
  auto f = [&](const VectorXd& x, VectorXd* g) { return obj(x, g, term); };
  auto resample = [&] { term.resample(); };
  const auto r = maximize_stochastic(f, resample,
                                     obj.pack(detail::initial_gaussian(prior.dim(), config.family, config.seed)),
                                     config.optimizer_options(), config.stochastic);
  return detail::finish(obj, r, clock);
}

/// VI-PG: coordinate ascent on the JJ-bounded ELBO, starting from t_i = 1.
///   P = S^{-1} + X^T diag(a(t)) X,  Sigma = P^{-1},  mu = P^{-1}(S^{-1} m + X^T (y - 1/2)),
///   t_i = sqrt(theta_i^2 + tau_i^2).
/// Mean-field keeps sigma_j^2 = 1 / P_jj; mu is the same exact solve.
inline FitResult fit_vipg(const LabeledDataset& data, const GaussianPrior& prior, const FitConfig& config) {
  config.validate();
  data.validate();
  check_dimensions(data, prior.dim(), "fit_vipg");
  detail::Stopwatch clock;
  const detail::PriorCache cache(prior);
  const Eigen::Index n = data.n();
  const Eigen::Index p = prior.dim();
  FitResult out;
  out.posterior = detail::initial_gaussian(p, config.family, config.seed);
  const VectorXd b = cache.S_inv * prior.m + data.X.transpose() * (data.y.array() - 0.5).matrix();
  VectorXd t = VectorXd::Ones(n);
  double previous = 0.0;
  out.stop_reason = to_string(config.max_iters > 0 ? StopReason::max_iters : StopReason::not_started);
  for (int it = 1; it <= config.max_iters; ++it) {
    VectorXd a(n);
    for (Eigen::Index i = 0; i < n; ++i) a[i] = jj_a(t[i]);
    const MatrixXd P = cache.S_inv + data.X.transpose() * a.asDiagonal() * data.X;
    Eigen::LLT<MatrixXd> llt(P);
    if (llt.info() != Eigen::Success) {
      throw numerical_error("fit_vipg: update matrix is singular at iteration " + std::to_string(it));
    }
    const VectorXd mu = llt.solve(b);
    MatrixXd L;
    if (config.family == Family::full) {
      L = linalg::cholesky_lower(llt.solve(MatrixXd::Identity(p, p)), "fit_vipg covariance");
    } else {
      L = P.diagonal().cwiseInverse().cwiseSqrt().asDiagonal();
    }
    out.posterior = {mu, L, config.family};
    const auto moments = local_moments(data, out.posterior);
    double value = data.y.dot(data.X * mu) - cache.kl(mu, L);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& m = moments[static_cast<std::size_t>(i)];
      t[i] = jj_optimal_t(m);
      value -= jj_expected_bound(m, t[i]);
    }
    if (!std::isfinite(value)) throw numerical_error("fit_vipg: non-finite objective at iteration " + std::to_string(it));
    out.elbo_trace.push_back(value);
    if (it > 1 && detail::relative_change_below(value, previous, config.rel_tol)) {
      out.converged = true;
      out.stop_reason = to_string(StopReason::converged);
      break;
    }
    previous = value;
  }
  out.iterations = static_cast<int>(out.elbo_trace.size());
  out.wall_time_s = clock.seconds();
  return out;
}

/// E_q[s(x^T beta)] per row by 64-node Gauss-Hermite over the scalar marginal.
inline VectorXd predict_proba(const VariationalGaussian& q, const MatrixXd& X) {
  if (X.cols() != q.dim()) throw dimension_error("predict_proba: X has the wrong number of columns");
  const VectorXd theta = X * q.mu;
  const VectorXd tau = (X * q.L).rowwise().norm();
  VectorXd out(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    out[i] = gaussian_expectation([](double f) { return sigmoid(f); }, theta[i], tau[i], 64);
  }
  return out;
}

}  // namespace viper
