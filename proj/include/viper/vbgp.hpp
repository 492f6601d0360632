#pragma once

// Sparse variational GP classification.
//
// q(u) = N(mu, Sigma) on M inducing values, stored in natural form:
// nat1 = Sigma^{-1} mu and Sigma^{-1} = F F^T with F lower triangular and
// positive on the diagonal, i.e. F is the Cholesky factor of the precision.
// Prior p(u) = N(m(Z), Kmm), linear mean m(x) = x^T w + b, ARD RBF kernel.
//
// Marginals of q(f) at rows of X, with A = Knm Kmm^{-1}:
//   theta = m(X) + A (mu - m(Z))
//   tau^2 = diag(Knn) - diag(A Knm^T) + diag(A Sigma A^T)   (floored at 1e-10)
// Objective: sum_i [y_i theta_i - E_i(theta_i, tau_i)] - KL(q(u) || p(u)).
//
// Gradient (reverse mode, g = dF/dtheta, v = dF/d(tau^2), d = mu - m(Z), K = Kmm):
//   Abar     = g d^T + diag(v) (2 A Sigma - Knm)
//   Knm_bar  = -diag(v) A + Abar K^{-1}
//   K_bar    = -A^T Abar K^{-1} + 1/2 K^{-1} (Sigma + d d^T) K^{-1} - 1/2 K^{-1}
//   Sigma_bar = A^T diag(v) A - 1/2 (K^{-1} - Sigma^{-1}),  mu_bar = A^T g - K^{-1} d
//   P_bar    = -Sigma mu_bar mu^T - Sigma Sigma_bar Sigma,  F_bar = lower((P_bar + P_bar^T) F)
//   nat1_bar = Sigma mu_bar
// and the kernel entries are differentiated in Z, log lengthscales and log signal variance.
//
// Parameter vector: [nat1 (M); lower(F) column by column; Z column-major (M p);
// log lengthscales (p); log signal variance; mean weights (p); mean bias].
//
// Random streams for seed s: derive_seed(s, 1) initial mean, derive_seed(s, 2)
// VI-MC batches, derive_seed(s, 3) choice of inducing inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>

#include "viper/bound.hpp"
#include "viper/dataset.hpp"
#include "viper/errors.hpp"
#include "viper/gauss_hermite.hpp"
#include "viper/linalg.hpp"
#include "viper/marginal.hpp"
#include "viper/optim.hpp"
#include "viper/vblogit.hpp"

namespace viper {

struct KernelSpec {
  VectorXd lengthscales;
  double signal_variance = 1.0;
  double jitter = 1e-6;

  void validate() const {
    if (lengthscales.size() == 0) throw config_error("KernelSpec: no lengthscales");
    for (Eigen::Index d = 0; d < lengthscales.size(); ++d) {
      if (!(lengthscales[d] > 0.0) || !std::isfinite(lengthscales[d])) {
        throw config_error("KernelSpec: lengthscale " + std::to_string(d) + " must be positive");
      }
    }
    if (!(signal_variance > 0.0) || !std::isfinite(signal_variance)) {
      throw config_error("KernelSpec: signal variance must be positive");
    }
    if (!(jitter >= 0.0)) throw config_error("KernelSpec: jitter must be >= 0");
  }
};

struct MeanFunction {
  VectorXd weights;
  double bias = 0.0;

  VectorXd operator()(const MatrixXd& X) const { return (X * weights).array() + bias; }
};

/// Cross-covariance k(A, B), no jitter.
inline MatrixXd kernel_matrix(const KernelSpec& k, const MatrixXd& A, const MatrixXd& B) {
  k.validate();
  if (A.cols() != k.lengthscales.size() || B.cols() != k.lengthscales.size()) {
    throw dimension_error("kernel_matrix: inputs must have one column per lengthscale");
  }
  const VectorXd inv_l = k.lengthscales.cwiseInverse();
  const MatrixXd As = A * inv_l.asDiagonal();
  const MatrixXd Bs = B * inv_l.asDiagonal();
  MatrixXd K(A.rows(), B.rows());
  for (Eigen::Index j = 0; j < B.rows(); ++j) {
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      K(i, j) = k.signal_variance * std::exp(-0.5 * (As.row(i) - Bs.row(j)).squaredNorm());
    }
  }
  return K;
}

/// k(A, A) + jitter I.
inline MatrixXd kernel_matrix(const KernelSpec& k, const MatrixXd& A) {
  MatrixXd K = kernel_matrix(k, A, A);
  K.diagonal().array() += k.jitter;
  return K;
}

struct SparseGPState {
  MatrixXd Z;
  VectorXd nat1;
  MatrixXd nat2_factor;  // F, Sigma^{-1} = F F^T
  KernelSpec kernel;
  MeanFunction mean;

  Eigen::Index M() const { return Z.rows(); }
  Eigen::Index p() const { return Z.cols(); }

  void validate() const {
    if (M() < 1) throw config_error("SparseGPState: need at least one inducing point");
    if (nat1.size() != M() || nat2_factor.rows() != M() || nat2_factor.cols() != M()) {
      throw dimension_error("SparseGPState: natural parameters do not match M");
    }
    if (kernel.lengthscales.size() != p() || mean.weights.size() != p()) {
      throw dimension_error("SparseGPState: kernel or mean dimension does not match Z");
    }
    kernel.validate();
    linalg::require_positive_diagonal(nat2_factor, "SparseGPState precision factor");
  }

  /// mu = Sigma nat1.
  VectorXd mean_u() const {
    VectorXd x = nat2_factor.triangularView<Eigen::Lower>().solve(nat1);
    nat2_factor.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  }

  /// Sigma = F^{-T} F^{-1}.
  MatrixXd covariance_u() const {
    const MatrixXd Finv = nat2_factor.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(M(), M()));
    return Finv.transpose() * Finv;
  }

  /// Theta = -1/2 Sigma^{-1}.
  MatrixXd nat2() const { return -0.5 * nat2_factor * nat2_factor.transpose(); }

  VariationalGaussian q_u() const {
    return VariationalGaussian::from_covariance(mean_u(), covariance_u(), Family::full);
  }

  void set_moments(const VectorXd& mu, const MatrixXd& Sigma) {
    const MatrixXd Ls = linalg::cholesky_lower(Sigma, "SparseGPState covariance");
    const MatrixXd precision = linalg::cholesky_inverse(Ls);
    nat2_factor = linalg::cholesky_lower(0.5 * (precision + precision.transpose()), "SparseGPState precision");
    nat1 = precision * mu;
  }
};

namespace detail {

// Everything the value needs; the gradient pass reuses it.
struct GPForward {
  MatrixXd Kmm, Emm, Lk, Knm, A, Finv, Sigma;
  VectorXd mu, mZ, mX, d, theta, tau, tau2_raw;
  double c = 0.0;
};

inline GPForward gp_forward(const SparseGPState& s, const MatrixXd& X) {
  GPForward fw;
  const Eigen::Index M = s.M();
  fw.Emm = kernel_matrix(s.kernel, s.Z, s.Z);
  fw.Kmm = fw.Emm;
  fw.Kmm.diagonal().array() += s.kernel.jitter;
  fw.Lk = linalg::cholesky_lower(fw.Kmm, "Kmm");
  fw.Knm = kernel_matrix(s.kernel, X, s.Z);
  fw.A = linalg::cholesky_solve(fw.Lk, MatrixXd(fw.Knm.transpose())).transpose();
  fw.Finv = s.nat2_factor.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(M, M));
  fw.Sigma = fw.Finv.transpose() * fw.Finv;
  fw.mu = s.mean_u();
  fw.mZ = s.mean(s.Z);
  fw.mX = s.mean(X);
  fw.d = fw.mu - fw.mZ;
  fw.theta = fw.mX + fw.A * fw.d;
  fw.c = s.kernel.signal_variance + s.kernel.jitter;
  const MatrixXd B = fw.Finv * fw.A.transpose();  // M x n, diag(A Sigma A^T) = column norms^2
  fw.tau2_raw = fw.c - fw.A.cwiseProduct(fw.Knm).rowwise().sum().array() + B.colwise().squaredNorm().transpose().array();
  fw.tau = fw.tau2_raw.cwiseMax(1e-10).cwiseSqrt();
  return fw;
}

inline double gp_kl_from_forward(const GPForward& fw, const SparseGPState& s) {
  const auto M = static_cast<double>(s.M());
  const MatrixXd T = fw.Lk.triangularView<Eigen::Lower>().solve(fw.Finv.transpose());
  const VectorXd r = fw.Lk.triangularView<Eigen::Lower>().solve(fw.d);
  const double log_det_K = linalg::log_det_from_cholesky(fw.Lk);
  const double log_det_Sigma = -2.0 * s.nat2_factor.diagonal().array().log().sum();
  return 0.5 * (T.squaredNorm() + r.squaredNorm() - M + log_det_K - log_det_Sigma);
}

}  // namespace detail

/// Marginal moments of q(f) at the rows of X.
inline std::vector<GaussianMoment> q_f_moments(const SparseGPState& state, const MatrixXd& X) {
  state.validate();
  if (X.cols() != state.p()) throw dimension_error("q_f_moments: X has the wrong number of columns");
  const auto fw = detail::gp_forward(state, X);
  std::vector<GaussianMoment> out(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) out[static_cast<std::size_t>(i)] = {fw.theta[i], fw.tau[i]};
  return out;
}

/// KL(q(u) || N(m(Z), Kmm)).
inline double gp_kl(const SparseGPState& state) {
  state.validate();
  return detail::gp_kl_from_forward(detail::gp_forward(state, MatrixXd(0, state.p())), state);
}

/// Which blocks of the state the optimizer moves.
struct GPTrainable {
  bool inducing = true;
  bool kernel = true;
  bool mean = true;
};

class GPObjective {
 public:
  GPObjective(const LabeledDataset& data, const SparseGPState& shape, GPTrainable trainable = {})
      : data_(data), M_(shape.M()), p_(shape.p()), jitter_(shape.kernel.jitter), trainable_(trainable) {
    data.validate();
    if (data.p() != p_) throw dimension_error("GPObjective: data and state dimensions differ");
  }

  Eigen::Index size() const { return M_ + M_ * (M_ + 1) / 2 + M_ * p_ + p_ + 1 + p_ + 1; }

  VectorXd pack(const SparseGPState& s) const {
    VectorXd x(size());
    Eigen::Index k = 0;
    x.segment(k, M_) = s.nat1;
    k += M_;
    for (Eigen::Index j = 0; j < M_; ++j)
      for (Eigen::Index i = j; i < M_; ++i) x[k++] = s.nat2_factor(i, j);
    x.segment(k, M_ * p_) = s.Z.reshaped();
    k += M_ * p_;
    x.segment(k, p_) = s.kernel.lengthscales.array().log().matrix();
    k += p_;
    x[k++] = std::log(s.kernel.signal_variance);
    x.segment(k, p_) = s.mean.weights;
    k += p_;
    x[k] = s.mean.bias;
    return x;
  }

  SparseGPState unpack(const VectorXd& x) const {
    SparseGPState s;
    Eigen::Index k = 0;
    s.nat1 = x.segment(k, M_);
    k += M_;
    s.nat2_factor = MatrixXd::Zero(M_, M_);
    for (Eigen::Index j = 0; j < M_; ++j)
      for (Eigen::Index i = j; i < M_; ++i) s.nat2_factor(i, j) = x[k++];
    s.Z = x.segment(k, M_ * p_).reshaped(M_, p_);
    k += M_ * p_;
    s.kernel.lengthscales = x.segment(k, p_).array().exp().matrix();
    k += p_;
    s.kernel.signal_variance = std::exp(x[k++]);
    s.kernel.jitter = jitter_;
    s.mean.weights = x.segment(k, p_);
    k += p_;
    s.mean.bias = x[k];
    return s;
  }

  /// Value, packed gradient and the moment-space pieces dF/dmu, dF/dSigma.
  struct Evaluation {
    double value = 0.0;
    VectorXd grad;
    VectorXd mu_bar;
    MatrixXd Sigma_bar;
  };

  /// Throws numerical_error when s is outside the parameter domain.
  static void check_domain(const SparseGPState& s) {
    linalg::require_positive_diagonal(s.nat2_factor, "GPObjective precision factor");
    if (!s.nat1.allFinite() || !s.Z.allFinite() || !s.mean.weights.allFinite() || !std::isfinite(s.mean.bias)) {
      throw numerical_error("GPObjective: non-finite parameters");
    }
    if (!s.kernel.lengthscales.allFinite() || !std::isfinite(s.kernel.signal_variance) ||
        !(s.kernel.lengthscales.minCoeff() > 0.0) || !(s.kernel.signal_variance > 0.0)) {
      throw numerical_error("GPObjective: kernel hyperparameters out of range");
    }
  }

  /// With whitened = true the hyperparameter part of grad holds q(v) fixed,
  /// v = Lk^{-1} (u - m(Z)), instead of q(u).
  template <class Term>
  Evaluation evaluate(const SparseGPState& s, const Term& term, bool with_grad, bool whitened = false) const {
    check_domain(s);
    const auto fw = detail::gp_forward(s, data_.X);
    const Eigen::Index n = data_.n();
    VectorXd dE_dtheta(n), dE_dtau(n);
    const double expected =
        term(fw.theta, fw.tau, with_grad ? &dE_dtheta : nullptr, with_grad ? &dE_dtau : nullptr);
    Evaluation e;
    e.value = data_.y.dot(fw.theta) - expected - detail::gp_kl_from_forward(fw, s);
    if (!std::isfinite(e.value)) throw numerical_error("GPObjective: non-finite objective");
    if (with_grad) e.grad = gradient(s, fw, dE_dtheta, dE_dtau, whitened, &e.mu_bar, &e.Sigma_bar);
    return e;
  }

  template <class Term>
  double operator()(const VectorXd& x, VectorXd* grad, const Term& term) const {
    auto e = evaluate(unpack(x), term, grad != nullptr);
    if (grad) *grad = std::move(e.grad);
    return e.value;
  }

  /// Offset of the first non-variational entry in the packed vector.
  Eigen::Index variational_size() const { return M_ + M_ * (M_ + 1) / 2; }

  /// q(v) for v = Lk^{-1} (u - m(Z)): mean and a square root G of the precision.
  struct WhitenedQ {
    VectorXd mean;
    MatrixXd G;  // S_v^{-1} = G G^T
  };

  WhitenedQ whiten(const SparseGPState& s) const {
    const auto fw = detail::gp_forward(s, MatrixXd(0, p_));
    return {fw.Lk.triangularView<Eigen::Lower>().solve(fw.d), fw.Lk.transpose() * s.nat2_factor};
  }

  /// s with the hyperparameter block replaced by hyper and q(u) rebuilt from q.
  SparseGPState with_hyper(const SparseGPState& s, const VectorXd& hyper, const WhitenedQ& q) const {
    VectorXd x = pack(s);
    x.tail(hyper.size()) = hyper;
    SparseGPState out = unpack(x);
    const MatrixXd K = kernel_matrix(out.kernel, out.Z);
    Eigen::LLT<MatrixXd> llt(K);
    if (llt.info() != Eigen::Success) throw numerical_error("GPObjective: Kmm is not positive definite");
    const MatrixXd Lk = llt.matrixL();
    const VectorXd mu = out.mean(out.Z) + Lk * q.mean;
    // P = Lk^{-T} G G^T Lk^{-1} = R^T R from the QR of H^T, H = Lk^{-T} G
    const MatrixXd H = Lk.transpose().triangularView<Eigen::Upper>().solve(q.G);
    Eigen::HouseholderQR<MatrixXd> qr(H.transpose());
    MatrixXd F = qr.matrixQR().triangularView<Eigen::Upper>().toDenseMatrix().transpose();
    for (Eigen::Index j = 0; j < M_; ++j) {
      if (F(j, j) < 0.0) F.col(j) = -F.col(j);
    }
    out.nat2_factor = std::move(F);
    out.nat1 = out.nat2_factor * (out.nat2_factor.transpose() * mu);
    return out;
  }

  const LabeledDataset& data() const { return data_; }

 private:
  VectorXd gradient(const SparseGPState& s, const detail::GPForward& fw, const VectorXd& dE_dtheta,
                    const VectorXd& dE_dtau, bool whitened, VectorXd* mu_bar_out, MatrixXd* Sigma_bar_out) const {
    const Eigen::Index n = data_.n();
    const MatrixXd& X = data_.X;
    const MatrixXd& A = fw.A;
    const VectorXd g = data_.y - dE_dtheta;
    VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = fw.tau2_raw[i] > 1e-10 ? -dE_dtau[i] / (2.0 * fw.tau[i]) : 0.0;

    const MatrixXd Kinv = linalg::cholesky_inverse(fw.Lk);
    const MatrixXd ASigma = A * fw.Sigma;
    const MatrixXd Abar = g * fw.d.transpose() + v.asDiagonal() * (2.0 * ASigma - fw.Knm);
    const MatrixXd Knm_bar = -(v.asDiagonal() * A) + Abar * Kinv;
    const VectorXd Kinv_d = Kinv * fw.d;
    MatrixXd K_bar = -(A.transpose() * Abar) * Kinv + 0.5 * (Kinv * fw.Sigma * Kinv + Kinv_d * Kinv_d.transpose()) -
                     0.5 * Kinv;
    const MatrixXd P = s.nat2_factor * s.nat2_factor.transpose();
    const MatrixXd Sigma_bar = A.transpose() * v.asDiagonal() * A - 0.5 * (Kinv - P);
    const VectorXd mu_bar = A.transpose() * g - Kinv_d;
    VectorXd mZ_bar = -mu_bar;
    const double c_bar = v.sum();
    if (whitened) {
      // mu = m(Z) + Lk m_v and Sigma = Lk S_v Lk^T move with the kernel:
      //   Lk_bar = mu_bar m_v^T + 2 Sigma_bar Sigma Lk^{-T}
      // then the Cholesky adjoint K_bar += sym(Lk^{-T} Phi(Lk^T Lk_bar) Lk^{-1}),
      // Phi = lower triangle with the diagonal halved.
      const MatrixXd Sb = 0.5 * (Sigma_bar + Sigma_bar.transpose());
      const auto Lk = fw.Lk.triangularView<Eigen::Lower>();
      const VectorXd m_v = Lk.solve(fw.d);
      const MatrixXd SigmaLkinvT = Lk.solve(fw.Sigma).transpose();  // Sigma Lk^{-T}
      const MatrixXd Lk_bar = mu_bar * m_v.transpose() + 2.0 * Sb * SigmaLkinvT;
      MatrixXd Phi = (fw.Lk.transpose() * Lk_bar).triangularView<Eigen::Lower>();
      Phi.diagonal() *= 0.5;
      MatrixXd T = fw.Lk.transpose().triangularView<Eigen::Upper>().solve(Phi);
      T = fw.Lk.transpose().triangularView<Eigen::Upper>().solve(MatrixXd(T.transpose())).transpose();
      K_bar += 0.5 * (T + T.transpose());
      mZ_bar.setZero();
    }

    *mu_bar_out = mu_bar;
    *Sigma_bar_out = 0.5 * (Sigma_bar + Sigma_bar.transpose());
    const VectorXd nat1_bar = fw.Sigma * mu_bar;
    const MatrixXd P_bar = -(fw.Sigma * mu_bar) * fw.mu.transpose() - fw.Sigma * Sigma_bar * fw.Sigma;
    const MatrixXd F_bar = (P_bar + P_bar.transpose()) * s.nat2_factor;

    VectorXd out = VectorXd::Zero(size());
    Eigen::Index k = 0;
    out.segment(k, M_) = nat1_bar;
    k += M_;
    for (Eigen::Index j = 0; j < M_; ++j)
      for (Eigen::Index i = j; i < M_; ++i) out[k++] = F_bar(i, j);

    // Kernel entries: Knm_ij = sf2 exp(-r^2/2), Kmm likewise plus jitter on the diagonal.
    const VectorXd& ell = s.kernel.lengthscales;
    const MatrixXd Wn = Knm_bar.cwiseProduct(fw.Knm);  // n x M
    const MatrixXd Wm = (K_bar + K_bar.transpose()).cwiseProduct(fw.Emm);  // symmetric, M x M
    MatrixXd Z_bar = mZ_bar * s.mean.weights.transpose();
    VectorXd log_ell_bar = VectorXd::Zero(p_);
    for (Eigen::Index d = 0; d < p_; ++d) {
      const double inv_l2 = 1.0 / (ell[d] * ell[d]);
      // Knm part
      for (Eigen::Index j = 0; j < M_; ++j) {
        double zsum = 0.0;
        double lsum = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double diff = X(i, d) - s.Z(j, d);
          zsum += Wn(i, j) * diff;
          lsum += Wn(i, j) * diff * diff;
        }
        Z_bar(j, d) += zsum * inv_l2;
        log_ell_bar[d] += lsum * inv_l2;
      }
      // Kmm part; Wm counts each unordered pair from both sides.
      for (Eigen::Index j = 0; j < M_; ++j) {
        double zsum = 0.0;
        double lsum = 0.0;
        for (Eigen::Index m = 0; m < M_; ++m) {
          const double diff = s.Z(m, d) - s.Z(j, d);
          zsum += Wm(j, m) * diff;
          lsum += Wm(j, m) * diff * diff;
        }
        Z_bar(j, d) += zsum * inv_l2;
        log_ell_bar[d] += 0.5 * lsum * inv_l2;
      }
    }
    const double log_sf2_bar =
        Wn.sum() + K_bar.cwiseProduct(fw.Emm).sum() + c_bar * s.kernel.signal_variance;

    if (trainable_.inducing) out.segment(k, M_ * p_) = Z_bar.reshaped();
    k += M_ * p_;
    if (trainable_.kernel) {
      out.segment(k, p_) = log_ell_bar;
      out[k + p_] = log_sf2_bar;
    }
    k += p_ + 1;
    if (trainable_.mean) {
      out.segment(k, p_) = X.transpose() * g + s.Z.transpose() * mZ_bar;
      out[k + p_] = g.sum() + mZ_bar.sum();
    }
    return out;
  }

  const LabeledDataset& data_;
  Eigen::Index M_, p_;
  double jitter_;
  GPTrainable trainable_;
};

/// VI-PER objective: sum_i [y_i theta_i - eta_l(theta_i, tau_i)] - KL(q(u) || p(u)).
inline double gp_elbo_bound(const SparseGPState& state, const LabeledDataset& data, TruncationOrder l = {}) {
  state.validate();
  const GPObjective obj(data, state);
  return obj(obj.pack(state), nullptr, EtaTerm(l));
}

/// Same objective with the JJ bound at the optimal t for every observation.
inline double gp_elbo_jj(const SparseGPState& state, const LabeledDataset& data) {
  state.validate();
  const GPObjective obj(data, state);
  return obj(obj.pack(state), nullptr, JaakkolaJordanTerm{});
}

/// Monte Carlo version through the q(f) marginals: f_is = theta_i + tau_i z_is.
inline MonteCarloEstimate gp_elbo_mc(const SparseGPState& state, const LabeledDataset& data, std::int64_t n_samples,
                                     std::uint64_t seed) {
  if (n_samples < 2) throw config_error("gp_elbo_mc: need at least 2 samples");
  state.validate();
  data.validate();
  const auto moments = q_f_moments(state, data.X);
  const double kl = gp_kl(state);
  Rng rng(seed);
  double mean = 0.0, m2 = 0.0;
  for (std::int64_t s = 0; s < n_samples; ++s) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
      const auto& m = moments[static_cast<std::size_t>(i)];
      const double f = m.theta + m.tau * rng.normal();
      ll += data.y[i] * f - softplus(f);
    }
    const double delta = ll - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (ll - mean);
  }
  return {mean - kl, std::sqrt(m2 / static_cast<double>(n_samples - 1) / static_cast<double>(n_samples))};
}

struct GPFitConfig {
  FitConfig fit;
  double lengthscale = 0.5;
  double signal_variance = 1.0;
  double jitter = 1e-6;
  double init_variance = 0.35;
  GPTrainable trainable;

  void validate() const {
    fit.validate();
    if (!(lengthscale > 0.0) || !(signal_variance > 0.0) || !(init_variance > 0.0) || !(jitter >= 0.0)) {
      throw config_error("GPFitConfig: lengthscale, signal variance and initial variance must be > 0, jitter >= 0");
    }
  }
};

struct GPFitResult {
  SparseGPState state;
  FitResult fit;  // fit.posterior is q(u)
};

namespace detail {

inline constexpr std::uint64_t kInducingStream = 3;

inline SparseGPState initial_gp_state(const LabeledDataset& data, Eigen::Index M, const GPFitConfig& cfg) {
  if (M < 1 || M > data.n()) {
    throw config_error("GP fit: need 1 <= M <= n (M = " + std::to_string(M) + ", n = " + std::to_string(data.n()) + ")");
  }
  const Eigen::Index p = data.p();
  SparseGPState s;
  Rng pick(derive_seed(cfg.fit.seed, kInducingStream));
  const auto rows = pick.sample_without_replacement(data.n(), M);
  s.Z.resize(M, p);
  for (Eigen::Index j = 0; j < M; ++j) s.Z.row(j) = data.X.row(rows[static_cast<std::size_t>(j)]);
  s.kernel.lengthscales = VectorXd::Constant(p, cfg.lengthscale);
  s.kernel.signal_variance = cfg.signal_variance;
  s.kernel.jitter = cfg.jitter;
  s.mean.weights = VectorXd::Zero(p);
  s.mean.bias = 0.0;
  Rng init(derive_seed(cfg.fit.seed, kInitStream));
  const VectorXd mu = init.normal_vector(M);
  s.nat2_factor = MatrixXd::Identity(M, M) / std::sqrt(cfg.init_variance);
  s.nat1 = mu / cfg.init_variance;
  return s;
}

inline GPFitResult finish_gp(const GPObjective& obj, const OptimizerResult& r, const Stopwatch& clock) {
  GPFitResult out;
  out.state = obj.unpack(r.x);
  out.fit.posterior = out.state.q_u();
  out.fit.elbo_trace = r.trace;
  out.fit.iterations = static_cast<int>(r.trace.size());
  out.fit.converged = r.converged;
  out.fit.stop_reason = to_string(r.reason);
  out.fit.wall_time_s = clock.seconds();
  return out;
}

// q(u) moves by natural-gradient steps in (nat1, P = F F^T):
//   nat1 += rho (mu_bar - 2 Sigma_bar mu),   P -= 2 rho Sigma_bar
// accepted when the objective does not decrease, rho halving otherwise (a
// failed Cholesky of P also rejects). The remaining blocks then take one
// L-BFGS (or gradient) step with Armijo backtracking, holding the whitened
// q(v), v = Lk^{-1}(u - m(Z)), fixed rather than q(u): with q(u) fixed a
// kernel change moves every q(f) marginal and the two blocks fight.
template <class Term>
class GPStepper {
 public:
  using Evaluation = GPObjective::Evaluation;

  GPStepper(const GPObjective& obj, const Term& term, const OptimizerOptions& opt)
      : obj_(obj), term_(term), opt_(opt), memory_(opt.history),
        nh_(obj.size() - obj.variational_size()) {}

  Evaluation eval(const SparseGPState& s) const { return obj_.evaluate(s, term_, true, true); }

  // Returns true if either block moved. s and e are updated in place.
  bool step(SparseGPState& s, Evaluation& e) {
    const bool a = natural_step(s, e);
    const bool b = hyper_step(s, e);
    return a || b;
  }

  void reset() { memory_.clear(); }

 private:
  bool try_evaluate(const SparseGPState& s, Evaluation& out) const {
    try {
      out = eval(s);
    } catch (const numerical_error&) {
      return false;
    }
    return out.grad.allFinite();
  }

  bool natural_step(SparseGPState& s, Evaluation& e) {
    const VectorXd mu = s.mean_u();
    const MatrixXd P = s.nat2_factor * s.nat2_factor.transpose();
    const VectorXd d1 = e.mu_bar - 2.0 * e.Sigma_bar * mu;
    const MatrixXd d2 = -2.0 * e.Sigma_bar;
    double r = rho_;
    for (int h = 0; h <= opt_.max_halvings; ++h, r *= 0.5) {
      MatrixXd Pn = P + r * d2;
      Pn = 0.5 * (Pn + Pn.transpose()).eval();
      Eigen::LLT<MatrixXd> llt(Pn);
      if (llt.info() != Eigen::Success) continue;
      SparseGPState trial = s;
      trial.nat1 = s.nat1 + r * d1;
      trial.nat2_factor = llt.matrixL();
      Evaluation te;
      if (!try_evaluate(trial, te)) continue;
      if (te.value >= e.value) {
        s = std::move(trial);
        e = std::move(te);
        rho_ = std::min(1.0, 2.0 * r);
        return true;
      }
    }
    return false;
  }

  bool hyper_step(SparseGPState& s, Evaluation& e) {
    if (nh_ == 0) return false;
    const VectorXd h0 = obj_.pack(s).tail(nh_);
    const VectorXd g = e.grad.tail(nh_);
    if (g.squaredNorm() == 0.0) return false;
    const auto q = obj_.whiten(s);
    SparseGPState last_state;
    Evaluation last;
    auto f = [&](const VectorXd& h, VectorXd* gh) {
      last_state = obj_.with_hyper(s, h, q);
      last = eval(last_state);
      if (gh) *gh = last.grad.tail(nh_);
      return last.value;
    };
    const bool lbfgs = opt_.kind == OptimizerKind::lbfgs;
    const double first = opt_.step_size / std::max(1.0, g.norm());
    VectorXd d = g;
    double alpha = first;
    if (lbfgs && !memory_.empty()) {
      VectorXd q = memory_.direction(g);
      if (g.dot(q) > 0.0) {
        d = std::move(q);
        alpha = 1.0;
      } else {
        memory_.clear();
      }
    }
    auto out = backtrack(f, h0, e.value, g, d, alpha, opt_.max_halvings);
    if (!out.accepted && !memory_.empty()) {
      memory_.clear();
      out = backtrack(f, h0, e.value, g, g, first, opt_.max_halvings);
    }
    if (!out.accepted) return false;
    if (lbfgs) memory_.push(out.x - h0, g - out.grad);
    // the accepted trial is the last one evaluated
    s = std::move(last_state);
    e = std::move(last);
    return true;
  }

  const GPObjective& obj_;
  const Term& term_;
  OptimizerOptions opt_;
  LbfgsMemory memory_;
  Eigen::Index nh_;
  double rho_ = 1.0;
};

template <class Term>
OptimizerResult optimize_gp(const GPObjective& obj, const SparseGPState& init, const Term& term,
                            const OptimizerOptions& opt) {
  OptimizerResult res;
  GPStepper<Term> stepper(obj, term, opt);
  SparseGPState s = init;
  typename GPStepper<Term>::Evaluation e;
  try {
    e = stepper.eval(s);
  } catch (const numerical_error&) {
    throw numerical_error("optimizer: objective not finite at the initial point (iteration 0)");
  }
  for (int it = 1; it <= opt.max_iters; ++it) {
    const double before = e.value;
    if (!stepper.step(s, e)) {
      res.reason = StopReason::line_search_failed;
      break;
    }
    res.trace.push_back(e.value);
    if (relative_change_below(e.value, before, opt.rel_tol)) {
      res.converged = true;
      res.reason = StopReason::converged;
      break;
    }
    if (it == opt.max_iters) res.reason = StopReason::max_iters;
  }
  res.x = obj.pack(s);
  res.value = e.value;
  return res;
}

// Same steps on a fresh batch each iteration; EMA stopping and tail averaging
// as in maximize_stochastic.
template <class Term, class Resample>
OptimizerResult optimize_gp_stochastic(const GPObjective& obj, const SparseGPState& init, const Term& term,
                                       Resample&& resample, const OptimizerOptions& opt,
                                       const StochasticOptions& sopt) {
  OptimizerResult res;
  if (opt.max_iters <= 0) {
    res.x = obj.pack(init);
    return res;
  }
  GPStepper<Term> stepper(obj, term, opt);
  SparseGPState s = init;
  std::deque<VectorXd> tail;
  double ema = 0.0;
  int failures = 0;
  for (int it = 1; it <= opt.max_iters; ++it) {
    resample();
    typename GPStepper<Term>::Evaluation e;
    try {
      e = stepper.eval(s);
    } catch (const numerical_error&) {
      throw numerical_error("optimizer: objective not finite at iteration " + std::to_string(it - 1));
    }
    if (it == 1) ema = e.value;
    if (stepper.step(s, e)) {
      failures = 0;
    } else {
      stepper.reset();
      if (++failures >= 5) {
        res.reason = StopReason::line_search_failed;
        break;
      }
    }
    res.trace.push_back(e.value);
    tail.push_back(obj.pack(s));
    if (static_cast<int>(tail.size()) > sopt.average_window) tail.pop_front();
    const double before = ema;
    ema = sopt.ema_decay * ema + (1.0 - sopt.ema_decay) * e.value;
    if (it >= sopt.min_iters && relative_change_below(ema, before, opt.rel_tol)) {
      res.converged = true;
      res.reason = StopReason::converged;
      break;
    }
    if (it == opt.max_iters) res.reason = StopReason::max_iters;
  }
  if (tail.empty()) {
    res.x = obj.pack(s);
  } else {
    res.x = VectorXd::Zero(obj.size());
    for (const auto& v : tail) res.x += v;
    res.x /= static_cast<double>(tail.size());
  }
  res.value = res.trace.empty() ? 0.0 : res.trace.back();
  return res;
}

template <class Term>
GPFitResult fit_gp_deterministic(const LabeledDataset& data, Eigen::Index M, const GPFitConfig& cfg, const Term& term) {
  cfg.validate();
  Stopwatch clock;
  const SparseGPState init = initial_gp_state(data, M, cfg);
  const GPObjective obj(data, init, cfg.trainable);
  const auto opt = cfg.fit.optimizer_options();
  if (opt.kind == OptimizerKind::gradient) {
    auto f = [&](const VectorXd& x, VectorXd* g) { return obj(x, g, term); };
    return finish_gp(obj, maximize(f, obj.pack(init), opt), clock);
  }
  return finish_gp(obj, optimize_gp(obj, init, term, opt), clock);
}

}  // namespace detail

inline GPFitResult fit_viper_gp(const LabeledDataset& data, Eigen::Index M, const GPFitConfig& cfg) {
  return detail::fit_gp_deterministic(data, M, cfg, EtaTerm(cfg.fit.l));
}

inline GPFitResult fit_vipg_gp(const LabeledDataset& data, Eigen::Index M, const GPFitConfig& cfg) {
  return detail::fit_gp_deterministic(data, M, cfg, JaakkolaJordanTerm{});
}

inline GPFitResult fit_vimc_gp(const LabeledDataset& data, Eigen::Index M, const GPFitConfig& cfg) {
  cfg.validate();
  detail::Stopwatch clock;
  const SparseGPState init = detail::initial_gp_state(data, M, cfg);
  const GPObjective obj(data, init, cfg.trainable);
  MonteCarloTerm term(data.n(), cfg.fit.mc_samples, derive_seed(cfg.fit.seed, detail::kMonteCarloStream));
  auto resample = [&] { term.resample(); };
  const auto opt = cfg.fit.optimizer_options();
  if (opt.kind == OptimizerKind::gradient) {
    auto f = [&](const VectorXd& x, VectorXd* g) { return obj(x, g, term); };
    return detail::finish_gp(obj, maximize_stochastic(f, resample, obj.pack(init), opt, cfg.fit.stochastic), clock);
  }
  return detail::finish_gp(obj, detail::optimize_gp_stochastic(obj, init, term, resample, opt, cfg.fit.stochastic),
                           clock);
}

/// E_q[s(f(x))] per row by 64-node Gauss-Hermite over the q(f) marginal.
inline VectorXd predict_proba_gp(const SparseGPState& state, const MatrixXd& X) {
  const auto moments = q_f_moments(state, X);
  VectorXd out(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const auto& m = moments[static_cast<std::size_t>(i)];
    out[i] = gaussian_expectation([](double f) { return sigmoid(f); }, m.theta, m.tau, 64);
  }
  return out;
}

}  // namespace viper
