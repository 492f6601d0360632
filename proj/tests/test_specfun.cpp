#include <algorithm>
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "viper/gauss_hermite.hpp"
#include "viper/rng.hpp"
#include "viper/specfun.hpp"

namespace viper {
namespace {

TEST(StdNormal, PdfValues) {
  EXPECT_DOUBLE_EQ(std_normal_pdf(0.0), 0.3989422804014327);
  EXPECT_NEAR(std_normal_pdf(1.0), 0.24197072451914337, 1e-17);
  for (double x : {0.3, 1.7, 4.2, 11.0}) EXPECT_EQ(std_normal_pdf(x), std_normal_pdf(-x));
}

TEST(StdNormal, CdfValues) {
  EXPECT_EQ(std_normal_cdf(0.0), 0.5);
  EXPECT_EQ(std_normal_cdf(38.0), 1.0);
  EXPECT_NEAR(std_normal_cdf(1.0), 0.8413447460685429, 2e-16);
}

TEST(StdNormal, CdfSymmetryAndMonotone) {
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const double x = rng.uniform(-40.0, 40.0);
    EXPECT_LE(std::fabs(std_normal_cdf(x) + std_normal_cdf(-x) - 1.0), 1e-15) << x;
  }
  double prev = 0.0;
  for (double x = -40.0; x <= 40.0; x += 0.01) {
    const double v = std_normal_cdf(x);
    ASSERT_GE(v, prev);
    ASSERT_LE(v, 1.0);
    prev = v;
  }
}

TEST(LogStdNormalCdf, ReferenceValues) {
  // 50-digit mpmath references.
  EXPECT_NEAR(log_std_normal_cdf(0.0), -0.6931471805599453, 1e-16);
  EXPECT_NEAR(log_std_normal_cdf(-40.0) / -804.60844201375378817, 1.0, 1e-14);
  EXPECT_NEAR(log_std_normal_cdf(-25.0) / -316.63940800802025894, 1.0, 1e-14);
  EXPECT_NEAR(log_std_normal_cdf(-10.0) / -53.231285150512470578, 1.0, 1e-14);
  EXPECT_NEAR(log_std_normal_cdf(5.0) / -2.8665161296376359338e-7, 1.0, 1e-12);
  EXPECT_NEAR(log_std_normal_cdf(-1e4) / -50000010.129278915181, 1.0, 1e-15);
}

TEST(LogStdNormalCdf, AgreesWithDirectLogForNonNegative) {
  // Beyond x ~ 3 the direct log of a number near 1 is the inaccurate side.
  for (double x = 0.0; x <= 3.0; x += 0.125) {
    const double direct = std::log(std_normal_cdf(x));
    if (direct == 0.0) continue;
    EXPECT_NEAR(log_std_normal_cdf(x) / direct, 1.0, 1e-12) << x;
  }
}

TEST(LogStdNormalCdf, ContinuousAcrossTailSwitch) {
  const double below = log_std_normal_cdf(std::nextafter(-20.0, -21.0));
  const double above = log_std_normal_cdf(std::nextafter(-20.0, 0.0));
  EXPECT_NEAR(below, above, 1e-12 * std::fabs(above));
}

TEST(LogStdNormalCdf, BoundedAndIncreasingOnNegativeAxis) {
  double prev = -std::numeric_limits<double>::infinity();
  for (double x = -1e4; x <= 0.0; x += (x < -100.0 ? 7.3 : 0.01)) {
    const double v = log_std_normal_cdf(x);
    ASSERT_TRUE(std::isfinite(v)) << x;
    ASSERT_LE(v, std::log(0.5) + 1e-16);
    ASSERT_GT(v, prev) << x;
    prev = v;
  }
}

TEST(ExpTimesCdf, Values) {
  EXPECT_DOUBLE_EQ(exp_times_cdf(0.0, 0.0), 0.5);
  EXPECT_NEAR(exp_times_cdf(700.0, -40.0) / 3.7079244178946818546e-46, 1.0, 1e-12);
  for (double a : {-30.0, 0.0, 12.5, 700.0}) EXPECT_NEAR(exp_times_cdf(a, 38.0) / std::exp(a), 1.0, 1e-15);
}

TEST(ExpTimesCdf, UnderflowIsZeroOverflowThrows) {
  EXPECT_EQ(exp_times_cdf(-800.0, -10.0), 0.0);
  EXPECT_THROW(exp_times_cdf(720.0, 5.0), overflow_error);
  EXPECT_NO_THROW(exp_times_cdf(720.0, -10.0));
}

TEST(ExpTimesCdf, MatchesNaiveProductWhereRepresentable) {
  Rng rng(11);
  for (int i = 0; i < 5000; ++i) {
    const double a = rng.uniform(-500.0, 500.0);
    const double b = rng.uniform(-30.0, 30.0);
    const double naive = std::exp(a) * std_normal_cdf(b);
    if (!(naive > 1e-300) || !std::isfinite(naive)) continue;
    EXPECT_NEAR(exp_times_cdf(a, b) / naive, 1.0, 1e-12) << a << " " << b;
  }
}

// int_a^b e^{t z} phi(z / tau) / tau dz = e^{tau^2 t^2 / 2} [Phi(b/tau - t tau) - Phi(a/tau - t tau)]
// checked with composite Gauss-Legendre quadrature.
double integrate_exp_gaussian(double a, double b, double t, double tau) {
  static const double x[] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290, -0.1834346424956498,
                             0.1834346424956498,  0.5255324099163290,  0.7966664774136267,  0.9602898564975363};
  static const double w[] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873, 0.3626837833783620,
                             0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763};
  const int panels = 400;
  const double h = (b - a) / panels;
  double sum = 0.0;
  for (int p = 0; p < panels; ++p) {
    const double mid = a + (p + 0.5) * h;
    for (int i = 0; i < 8; ++i) {
      const double z = mid + 0.5 * h * x[i];
      sum += w[i] * std::exp(t * z) * std_normal_pdf(z / tau) / tau;
    }
  }
  return 0.5 * h * sum;
}

TEST(ExpTimesCdf, HalfLineGaussianIntegralIdentity) {
  Rng rng(3);
  for (int i = 0; i < 60; ++i) {
    const double tau = rng.uniform(0.2, 3.0);
    const double t = rng.uniform(-3.0, 3.0);
    const double a = rng.uniform(-4.0, 2.0) * tau;
    const double b = a + rng.uniform(0.1, 4.0) * tau;
    const double quad = integrate_exp_gaussian(a, b, t, tau);
    const double half = 0.5 * tau * tau * t * t;
    const double lo = a / tau - t * tau;
    const double hi = b / tau - t * tau;
    // Upper-tail form when both arguments are positive avoids 1 - 1 cancellation.
    const double closed = lo > 0.0 ? exp_times_cdf(half, -lo) - exp_times_cdf(half, -hi)
                                   : exp_times_cdf(half, hi) - exp_times_cdf(half, lo);
    EXPECT_NEAR(closed / quad, 1.0, 1e-8) << a << " " << b << " " << t << " " << tau;
  }
}

TEST(Softplus, StableForms) {
  EXPECT_DOUBLE_EQ(softplus(0.0), std::log(2.0));
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
  EXPECT_NEAR(softplus(-800.0), 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(3.0) + sigmoid(-3.0), 1.0, 4e-16);
}

TEST(GaussHermite, IntegratesPolynomialsExactly) {
  for (int n : {2, 5, 64, 200}) {
    const auto& rule = gauss_hermite(n);
    EXPECT_NEAR(rule.weights.sum(), std::sqrt(M_PI), 1e-13) << n;
    // E[X^2] = 1 and E[X^4] = 3 under N(0, 1)
    if (n >= 3) {
      EXPECT_NEAR(gaussian_expectation([](double x) { return x * x * x * x; }, 0.0, 1.0, n), 3.0, 1e-12);
    }
    EXPECT_NEAR(gaussian_expectation([](double x) { return x * x; }, 0.0, 1.0, n), 1.0, 1e-12);
  }
}

TEST(Rng, FillNormalFollowsScalarStream) {
  // odd sizes and a pending cached value exercise both ends of the batch path
  for (Eigen::Index rows : {1, 2, 7, 1000, 1025}) {
    Rng a(42), b(42);
    a.normal();
    b.normal();
    Eigen::MatrixXd m(rows, 3);
    a.fill_normal(m);
    for (Eigen::Index j = 0; j < 3; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) {
        const double want = b.normal();
        EXPECT_NEAR(m(i, j), want, 1e-14 * std::max(1.0, std::fabs(want))) << rows << " " << i << " " << j;
      }
    EXPECT_EQ(a.uniform01(), b.uniform01());
  }
}

TEST(Rng, FillNormalMoments) {
  Rng rng(9);
  Eigen::MatrixXd m(1000, 200);
  rng.fill_normal(m);
  const double mean = m.mean();
  const double var = (m.array() - mean).square().mean();
  const double kurt = (m.array() - mean).pow(4).mean() / (var * var);
  // about 4 standard errors at 2e5 draws
  EXPECT_NEAR(mean, 0.0, 0.009);
  EXPECT_NEAR(var, 1.0, 0.013);
  EXPECT_NEAR(kurt, 3.0, 0.045);
}

}  // namespace
}  // namespace viper
