#include <cmath>
#include <vector>

#include <Eigen/LU>
#include <gtest/gtest.h>

#include "viper/metrics.hpp"
#include "viper/rng.hpp"

namespace viper {
namespace {

VariationalGaussian scalar(double mu, double var) {
  return VariationalGaussian::from_covariance(VectorXd::Constant(1, mu), MatrixXd::Constant(1, 1, var), Family::full);
}

VariationalGaussian random_gaussian(Eigen::Index d, Rng& rng) {
  MatrixXd B(d, d);
  rng.fill_normal(B);
  const MatrixXd S = B * B.transpose() + 0.5 * MatrixXd::Identity(d, d);
  return VariationalGaussian::from_covariance(rng.normal_vector(d), S, Family::full);
}

TEST(KlGaussians, SelfIsZero) {
  Rng rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    const auto q = random_gaussian(4, rng);
    const auto kl = kl_mc_gaussians(q, q);
    EXPECT_LE(kl.fwd, 1e-12);
    EXPECT_LE(kl.rev, 1e-12);
  }
}

TEST(KlGaussians, ScalarClosedForm) {
  const auto kl = kl_mc_gaussians(scalar(0.0, 1.0), scalar(0.0, 4.0));
  EXPECT_NEAR(kl.fwd, 0.5 * (std::log(4.0) + 0.25 - 1.0), 1e-14);
  EXPECT_NEAR(kl.fwd, 0.318147, 1e-6);
  EXPECT_NEAR(kl.rev, 0.5 * (4.0 - 1.0 - std::log(4.0)), 1e-14);
}

TEST(KlGaussians, AsymmetricAndMatchesDenseFormula) {
  Rng rng(2);
  const auto a = random_gaussian(3, rng);
  const auto b = random_gaussian(3, rng);
  const auto kl = kl_mc_gaussians(a, b);
  EXPECT_GT(std::fabs(kl.fwd - kl.rev), 1e-6);
  const MatrixXd Sa = a.covariance(), Sb = b.covariance();
  const MatrixXd Sb_inv = Sb.inverse();
  const VectorXd d = b.mu - a.mu;
  const double dense =
      0.5 * ((Sb_inv * Sa).trace() + d.dot(Sb_inv * d) - 3.0 + std::log(Sb.determinant() / Sa.determinant()));
  EXPECT_NEAR(kl.fwd, dense, 1e-10 * std::max(1.0, dense));
}

TEST(KlGaussians, DimensionMismatchThrows) {
  Rng rng(3);
  EXPECT_THROW(kl_mc_gaussians(random_gaussian(2, rng), random_gaussian(3, rng)), dimension_error);
}

TEST(KlMarginals, SumOfScalarTerms) {
  const std::vector<GaussianMoment> ref{{0.0, 1.0}, {1.0, 2.0}};
  const std::vector<GaussianMoment> q{{0.0, 2.0}, {1.0, 2.0}};
  const auto kl = kl_marginals(ref, q);
  EXPECT_NEAR(kl.fwd, 0.318147, 1e-6);
  EXPECT_NEAR(kl.rev, 0.5 * (3.0 - std::log(4.0)), 1e-14);
  EXPECT_THROW(kl_marginals(ref, {{0.0, 1.0}}), dimension_error);
}

TEST(Mse, Examples) {
  VectorXd f0(2);
  f0 << 1.0, 0.0;
  VectorXd theta(2);
  theta << 0.0, 2.0;
  EXPECT_DOUBLE_EQ(mse_posterior_mean(theta, f0), 2.5);
  EXPECT_DOUBLE_EQ(mse_posterior_mean(f0, f0), 0.0);
  EXPECT_DOUBLE_EQ(mse_posterior_mean(f0.array() + 1.0, f0), 1.0);
  EXPECT_THROW(mse_posterior_mean(VectorXd(3), f0), dimension_error);
  EXPECT_THROW(mse_posterior_mean(VectorXd(0), VectorXd(0)), dimension_error);
}

TEST(Coverage, Examples) {
  {
    const auto r = coverage_and_width({{0.0, 1.0}}, VectorXd::Constant(1, 1.9));
    EXPECT_EQ(r.coverage, 1.0);
    EXPECT_NEAR(r.mean_width, 3.919927969080108, 1e-12);
  }
  VectorXd f0(3);
  f0 << 0.3, -1.0, 2.0;
  std::vector<GaussianMoment> exact, tight;
  for (Eigen::Index i = 0; i < 3; ++i) {
    exact.push_back({f0[i], 0.5});
    tight.push_back({f0[i] + 0.1, 1e-9});
  }
  EXPECT_EQ(coverage_and_width(exact, f0).coverage, 1.0);
  EXPECT_EQ(coverage_and_width(tight, f0).coverage, 0.0);
  EXPECT_THROW(coverage_and_width(exact, VectorXd(2)), dimension_error);
}

TEST(Coverage, PermutationInvariant) {
  Rng rng(5);
  const Eigen::Index n = 200;
  std::vector<GaussianMoment> m;
  VectorXd f0(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    m.push_back({rng.normal(), rng.uniform(0.1, 2.0)});
    f0[i] = rng.normal();
  }
  const auto base = coverage_and_width(m, f0);
  const auto perm = rng.sample_without_replacement(n, n);
  std::vector<GaussianMoment> mp;
  VectorXd fp(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    mp.push_back(m[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    fp[i] = f0[perm[static_cast<std::size_t>(i)]];
  }
  const auto shuffled = coverage_and_width(mp, fp);
  EXPECT_EQ(base.coverage, shuffled.coverage);
  EXPECT_NEAR(base.mean_width, shuffled.mean_width, 1e-12);
}

TEST(Coverage, CalibratedOnSelfConsistentData) {
  Rng rng(6);
  const Eigen::Index n = 100000;
  std::vector<GaussianMoment> m;
  m.reserve(static_cast<std::size_t>(n));
  VectorXd f0(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double theta = rng.uniform(-3.0, 3.0);
    const double tau = rng.uniform(0.1, 3.0);
    m.push_back({theta, tau});
    f0[i] = theta + tau * rng.normal();
  }
  const double tol = 3.0 * std::sqrt(0.95 * 0.05 / static_cast<double>(n));
  EXPECT_NEAR(coverage_and_width(m, f0).coverage, 0.95, tol);
  // other levels go through the inverse-cdf bisection
  EXPECT_NEAR(coverage_and_width(m, f0, 0.5).coverage, 0.5, 3.0 * std::sqrt(0.25 / static_cast<double>(n)));
}

TEST(Auc, Examples) {
  VectorXd y(4), s(4);
  y << 0, 0, 1, 1;
  s << 0.1, 0.4, 0.35, 0.8;
  EXPECT_DOUBLE_EQ(auc(y, s), 0.75);
  s << 0.1, 0.2, 0.3, 0.4;
  EXPECT_DOUBLE_EQ(auc(y, s), 1.0);
  EXPECT_DOUBLE_EQ(auc(y, VectorXd::Constant(4, 0.7)), 0.5);
  EXPECT_THROW(auc(VectorXd::Ones(3), VectorXd::Zero(3)), data_error);
  EXPECT_THROW(auc(y, VectorXd::Zero(3)), dimension_error);
}

TEST(Auc, MatchesPairCountAndMonotoneInvariant) {
  Rng rng(7);
  const Eigen::Index n = 300;
  VectorXd y(n), s(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    y[i] = rng.uniform01() < 0.4 ? 1.0 : 0.0;
    s[i] = std::round(4.0 * (rng.normal() + y[i])) / 4.0;  // plenty of ties
  }
  double wins = 0.0, pairs = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (y[i] != 1.0 || y[j] != 0.0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  const double a = auc(y, s);
  EXPECT_NEAR(a, wins / pairs, 1e-14);
  EXPECT_NEAR(auc(y, s.unaryExpr([](double v) { return std::exp(3.0 * v) - 7.0; })), a, 1e-14);
}

TEST(Quantile, Examples) {
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4, 5}, 0.025), 1.1);
  std::vector<double> hundred;
  for (int i = 1; i <= 100; ++i) hundred.push_back(i);
  EXPECT_DOUBLE_EQ(quantile(hundred, 0.5), 50.5);
  const auto c = quantile_summary({2.5, 2.5, 2.5});
  EXPECT_EQ(c.q025, 2.5);
  EXPECT_EQ(c.median, 2.5);
  EXPECT_EQ(c.q975, 2.5);
  EXPECT_THROW(quantile({}, 0.5), dimension_error);
  EXPECT_THROW(quantile({1.0}, 1.5), config_error);
}

}  // namespace
}  // namespace viper
