#include <cmath>
#include <sstream>
#include <string>

#include <Eigen/LU>
#include <gtest/gtest.h>

#include "viper/datagen.hpp"

namespace viper {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

bool same(const LabeledDataset& a, const LabeledDataset& b) {
  return a.X == b.X && a.y == b.y && a.f0.has_value() == b.f0.has_value() && (!a.f0 || *a.f0 == *b.f0);
}

MatrixXd sample_covariance(const MatrixXd& X) {
  const MatrixXd C = X.rowwise() - X.colwise().mean();
  return C.transpose() * C / static_cast<double>(X.rows() - 1);
}

TEST(GenLogistic, CoefficientSupportAndDeterminism) {
  for (int setting : {1, 2, 3}) {
    const LogisticSimSpec spec{200, 25, setting, 9};
    const auto a = gen_logistic(spec);
    const auto b = gen_logistic(spec);
    EXPECT_TRUE(same(a.data, b.data));
    EXPECT_EQ(a.beta0, b.beta0);
    EXPECT_EQ(a.data.X.rows(), 200);
    EXPECT_EQ(a.data.X.cols(), 25);
    ASSERT_TRUE(a.data.f0.has_value());
    EXPECT_LE((*a.data.f0 - a.data.X * a.beta0).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(a.beta0.cwiseAbs().minCoeff(), 0.2);
    EXPECT_LE(a.beta0.cwiseAbs().maxCoeff(), 2.0);
    EXPECT_NO_THROW(a.data.validate());
  }
  const auto c = gen_logistic({200, 25, 1, 10});
  EXPECT_NE(c.beta0, gen_logistic({200, 25, 1, 9}).beta0);
  EXPECT_THROW(gen_logistic({10, 2, 4, 0}), config_error);
  EXPECT_THROW(gen_logistic({0, 2, 1, 0}), config_error);
}

TEST(GenLogistic, BothSignsAppear) {
  const auto a = gen_logistic({10, 200, 1, 3});
  EXPECT_GT((a.beta0.array() > 0).count(), 60);
  EXPECT_GT((a.beta0.array() < 0).count(), 60);
}

TEST(GenLogistic, SettingOneIdentityCovariance) {
  const Eigen::Index n = 100000, p = 4;
  const auto a = gen_logistic({n, p, 1, 1});
  const MatrixXd S = sample_covariance(a.data.X);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j)
      EXPECT_NEAR(S(i, j), i == j ? 1.0 : 0.0, 5.0 * std::sqrt(1.0 / n) * (1.0 + (i == j))) << i << "," << j;
}

TEST(GenLogistic, SettingTwoLagOneCorrelation) {
  const Eigen::Index n = 100000, p = 6;
  const auto a = gen_logistic({n, p, 2, 2});
  const MatrixXd S = sample_covariance(a.data.X);
  for (Eigen::Index j = 0; j + 1 < p; ++j) {
    EXPECT_NEAR(S(j, j + 1) / std::sqrt(S(j, j) * S(j + 1, j + 1)), 0.3, 0.02);
  }
  EXPECT_NEAR(S(0, 2), 0.09, 0.02);
}

TEST(GenLogistic, SettingThreeSharesOneWishartDraw) {
  // Rows are iid N(0, W^{-1}) for one W: with many rows the sample covariance
  // settles on a fixed matrix, and the same seed gives the same matrix for
  // every n because W is drawn first from the design stream.
  const Eigen::Index p = 3;
  const auto big = gen_logistic({200000, p, 3, 4});
  const MatrixXd S = sample_covariance(big.data.X);
  Rng rng(derive_seed(4, 12));
  const MatrixXd A = bartlett_factor(p, static_cast<int>(p) + 3, rng);
  const MatrixXd W_inv = (A * A.transpose()).inverse();
  EXPECT_LE((S - W_inv).cwiseAbs().maxCoeff(), 0.05 * W_inv.cwiseAbs().maxCoeff());
  const auto small = gen_logistic({10, p, 3, 4});
  EXPECT_EQ(small.data.X.topRows(10), big.data.X.topRows(10));
}

TEST(GenLogistic, ResponsesDependOnlyOnLinearPredictor) {
  // y is drawn from f0 alone: identical f0 from different X gives identical y.
  const VectorXd f = gen_logistic({500, 3, 1, 6}).data.f0.value();
  EXPECT_EQ(sample_responses(f, 17), sample_responses(f, 17));
  const VectorXd y = sample_responses(VectorXd::Constant(20000, 0.0), 3);
  EXPECT_NEAR(y.mean(), 0.5, 0.015);
  EXPECT_EQ(sample_responses(VectorXd::Constant(50, 60.0), 1), VectorXd::Ones(50));
}

TEST(BartlettFactor, WishartMean) {
  // E[W] = df I.
  Rng rng(8);
  const Eigen::Index p = 3;
  MatrixXd mean = MatrixXd::Zero(p, p);
  const int reps = 20000;
  for (int r = 0; r < reps; ++r) {
    const MatrixXd A = bartlett_factor(p, 6, rng);
    mean += A * A.transpose();
  }
  mean /= reps;
  EXPECT_LE((mean - 6.0 * MatrixXd::Identity(p, p)).cwiseAbs().maxCoeff(), 0.15);
  EXPECT_THROW(bartlett_factor(4, 3, rng), config_error);
}

TEST(GenGpToy, LayoutAndLatent) {
  EXPECT_NEAR(gp_toy_latent(1.0), -4.5, 1e-15);
  EXPECT_NEAR(gp_toy_latent(0.0), 0.0, 1e-15);
  EXPECT_NEAR(gp_toy_latent(4.0), 0.0, 1e-14);
  const auto toy = gen_gp_toy({50, 50, 3});
  ASSERT_EQ(toy.train.X.rows(), 50);
  ASSERT_EQ(toy.test.X.rows(), 50);
  int left = 0;
  for (Eigen::Index i = 0; i < 50; ++i) {
    const double x = toy.train.X(i, 0);
    EXPECT_FALSE(x > 2.5 && x < 3.5) << x;
    left += x <= 2.5;
  }
  EXPECT_EQ(left, 32);  // ceil(50 * 2.5 / 4)
  EXPECT_EQ(toy.train.X(0, 0), 0.0);
  EXPECT_EQ(toy.train.X(31, 0), 2.5);
  EXPECT_EQ(toy.train.X(32, 0), 3.5);
  EXPECT_EQ(toy.train.X(49, 0), 5.0);
  EXPECT_EQ(toy.test.X(0, 0), 0.0);
  EXPECT_EQ(toy.test.X(49, 0), 5.0);
  for (Eigen::Index i = 0; i < 50; ++i) {
    EXPECT_EQ((*toy.test.f0)[i], gp_toy_latent(toy.test.X(i, 0)));
  }
  EXPECT_NO_THROW(toy.train.validate());
  EXPECT_THROW(gen_gp_toy({1, 50, 0}), config_error);
}

TEST(GenGpToy, DeterministicPerSeed) {
  const auto a = gen_gp_toy({40, 30, 5});
  const auto b = gen_gp_toy({40, 30, 5});
  EXPECT_TRUE(same(a.train, b.train));
  EXPECT_TRUE(same(a.test, b.test));
  const auto c = gen_gp_toy({40, 30, 6});
  EXPECT_NE(a.train.y, c.train.y);
}

TEST(GenGpToy, NoiseFlattensProbabilities) {
  // P(y = 1 | f) = E[s(f + e)], e ~ N(0, 1); at f = -4.5 that is about 0.024.
  int ones = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const auto toy = gen_gp_toy({50, 2, seed});
    for (Eigen::Index i = 0; i < 50; ++i) {
      if (std::fabs(toy.train.X(i, 0) - 1.0) < 0.05) {
        ones += toy.train.y[i] == 1.0;
        ++total;
      }
    }
  }
  const double rate = static_cast<double>(ones) / total;
  EXPECT_NEAR(rate, 0.0235, 0.012) << total;
}

TEST(Libsvm, ParsesExample) {
  std::istringstream in("+1 1:0.5 3:2\n");
  const auto d = parse_libsvm(in, "inline");
  ASSERT_EQ(d.X.rows(), 1);
  ASSERT_EQ(d.X.cols(), 3);
  EXPECT_EQ(d.y[0], 1.0);
  EXPECT_EQ(d.X(0, 0), 0.5);
  EXPECT_EQ(d.X(0, 1), 0.0);
  EXPECT_EQ(d.X(0, 2), 2.0);
  EXPECT_FALSE(d.f0.has_value());
}

TEST(Libsvm, LabelMappingCommentsAndBlanks) {
  std::istringstream in("# header\n-1 2:1\n\n+1 1:3 # trailing\n-1\n");
  const auto d = parse_libsvm(in, "inline");
  ASSERT_EQ(d.X.rows(), 3);
  EXPECT_EQ(d.X.cols(), 2);
  EXPECT_EQ(d.y, (VectorXd(3) << 0, 1, 0).finished());
  std::istringstream zero_one("0 1:1\n1 1:2\n");
  EXPECT_EQ(parse_libsvm(zero_one, "z").y, (VectorXd(2) << 0, 1).finished());
}

std::string error_of(const std::string& text) {
  std::istringstream in(text);
  try {
    parse_libsvm(in, "f.svm");
  } catch (const data_error& e) {
    return e.what();
  }
  return "";
}

TEST(Libsvm, Errors) {
  EXPECT_NE(error_of("").find("no data rows"), std::string::npos);
  EXPECT_NE(error_of("1 1:2\nx 1:1\n").find("f.svm:2:"), std::string::npos);
  EXPECT_NE(error_of("1 1:2\n1 3\n").find("f.svm:2:"), std::string::npos);
  EXPECT_NE(error_of("1 0:2\n").find("f.svm:1:"), std::string::npos);
  EXPECT_NE(error_of("1 2:1 1:2\n").find("increasing"), std::string::npos);
  EXPECT_NE(error_of("1 1:abc\n").find("f.svm:1:"), std::string::npos);
  const std::string labels = error_of("1 1:1\n2 1:1\n-1 1:0\n");
  EXPECT_NE(labels.find("-1, 1, 2"), std::string::npos) << labels;
  EXPECT_THROW(load_libsvm("/nonexistent/path.svm"), data_error);
  try {
    load_libsvm("/nonexistent/path.svm");
  } catch (const data_error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/path.svm"), std::string::npos);
  }
}

TEST(Libsvm, WriteReadRoundTrip) {
  Rng rng(12);
  LabeledDataset d;
  d.X.resize(30, 5);
  rng.fill_normal(d.X);
  d.X(3, 4) = 0.0;
  d.X(7, 0) = 0.0;
  d.X(29, 4) = 1e-300;  // keeps p = 5 on the last column
  d.y.resize(30);
  for (Eigen::Index i = 0; i < 30; ++i) d.y[i] = i % 3 == 0 ? 1.0 : 0.0;
  std::stringstream buf;
  write_libsvm(buf, d);
  const auto back = parse_libsvm(buf, "buf");
  ASSERT_EQ(back.X.rows(), 30);
  ASSERT_EQ(back.X.cols(), 5);
  EXPECT_LE((back.X - d.X).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(back.X, d.X);  // %.17g is exact
  EXPECT_EQ(back.y, d.y);
}

TEST(TrainTestSplit, PrefixRule) {
  auto make = [](Eigen::Index n) {
    LabeledDataset d;
    d.X = VectorXd::LinSpaced(n, 0.0, static_cast<double>(n - 1));
    d.y = VectorXd::Zero(n);
    return d;
  };
  auto [a, b] = train_test_split(make(10));
  EXPECT_EQ(a.n(), 8);
  EXPECT_EQ(b.n(), 2);
  auto [c, e] = train_test_split(make(5));
  EXPECT_EQ(c.n(), 4);
  EXPECT_EQ(e.n(), 1);
  auto [g, h] = train_test_split(make(100), 0.29);
  EXPECT_EQ(g.n(), 29);
  MatrixXd joined(10, 1);
  joined << a.X, b.X;
  EXPECT_EQ(joined, make(10).X);
  EXPECT_THROW(train_test_split(make(10), 1.0), config_error);
  EXPECT_THROW(train_test_split(make(10), 0.0), config_error);
}

}  // namespace
}  // namespace viper
