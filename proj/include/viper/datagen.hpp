#pragma once

// Simulated data for the logistic and GP studies, and LIBSVM text I/O.
//
// Random streams for a spec with seed s (each an independent Rng):
//   derive_seed(s, 11)  coefficients beta0
//   derive_seed(s, 12)  design matrix (and the Wishart draw for setting 3, first)
//   derive_seed(s, 13)  responses
//   derive_seed(s, 21), derive_seed(s, 22)  GP toy train / test responses
//
// LIBSVM grammar accepted by load_libsvm:
//   line    := label (WS index ':' value)* [WS] ['#' comment]
//   label   := real number; the label set must be a subset of {-1, +1} or {0, 1}
//   index   := integer >= 1, strictly increasing within a line
// Blank and comment-only lines are skipped. p is the largest index seen.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "viper/dataset.hpp"
#include "viper/errors.hpp"
#include "viper/linalg.hpp"
#include "viper/rng.hpp"
#include "viper/specfun.hpp"

namespace viper {

struct LogisticSimSpec {
  Eigen::Index n = 1000;
  Eigen::Index p = 25;
  int setting = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (n < 1 || p < 1) throw config_error("LogisticSimSpec: n and p must be >= 1");
    if (setting < 1 || setting > 3) throw config_error("LogisticSimSpec: setting must be 1, 2 or 3");
  }
};

struct LogisticSim {
  LabeledDataset data;
  Eigen::VectorXd beta0;
};

struct GPToySpec {
  Eigen::Index n_train = 50;
  Eigen::Index n_test = 50;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_train < 2 || n_test < 2) throw config_error("GPToySpec: n_train and n_test must be >= 2");
  }
};

struct GPToy {
  LabeledDataset train;
  LabeledDataset test;
};

/// y_i ~ Bernoulli(s(f_i)) from Rng(seed), one uniform per row in order.
inline Eigen::VectorXd sample_responses(const Eigen::VectorXd& f, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXd y(f.size());
  for (Eigen::Index i = 0; i < f.size(); ++i) y[i] = rng.uniform01() < sigmoid(f[i]) ? 1.0 : 0.0;
  return y;
}

/// Lower Bartlett factor A of W = A A^T ~ Wishart(df, I_p); df integer >= p.
inline Eigen::MatrixXd bartlett_factor(Eigen::Index p, int df, Rng& rng) {
  if (df < p) throw config_error("bartlett_factor: need df >= p");
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index i = 0; i < p; ++i) {
    double chi2 = 0.0;  // chi-square with df - i degrees of freedom
    for (Eigen::Index k = 0; k < df - i; ++k) {
      const double z = rng.normal();
      chi2 += z * z;
    }
    A(i, i) = std::sqrt(chi2);
    for (Eigen::Index j = 0; j < i; ++j) A(i, j) = rng.normal();
  }
  return A;
}

inline LogisticSim gen_logistic(const LogisticSimSpec& spec) {
  spec.validate();
  const Eigen::Index n = spec.n;
  const Eigen::Index p = spec.p;
  LogisticSim out;

  Rng beta_rng(derive_seed(spec.seed, 11));
  out.beta0.resize(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double magnitude = beta_rng.uniform(0.2, 2.0);
    out.beta0[j] = beta_rng.bernoulli(0.5) ? magnitude : -magnitude;
  }

  Rng x_rng(derive_seed(spec.seed, 12));
  Eigen::MatrixXd Zt(p, n);  // one column per row of X
  Eigen::MatrixXd X;
  switch (spec.setting) {
    case 1:
      x_rng.fill_normal(Zt);
      X = Zt.transpose();
      break;
    case 2: {
      Eigen::MatrixXd Sigma(p, p);
      for (Eigen::Index i = 0; i < p; ++i)
        for (Eigen::Index j = 0; j < p; ++j) Sigma(i, j) = std::pow(0.3, static_cast<double>(std::abs(i - j)));
      const Eigen::MatrixXd C = linalg::cholesky_lower(Sigma, "gen_logistic setting 2");
      x_rng.fill_normal(Zt);
      X = (C * Zt).transpose();
      break;
    }
    case 3: {
      // x = A^{-T} z has covariance A^{-T} A^{-1} = W^{-1}.
      const Eigen::MatrixXd A = bartlett_factor(p, static_cast<int>(p) + 3, x_rng);
      x_rng.fill_normal(Zt);
      A.transpose().triangularView<Eigen::Upper>().solveInPlace(Zt);
      X = Zt.transpose();
      break;
    }
  }
  out.data.X = std::move(X);
  const Eigen::VectorXd f0 = out.data.X * out.beta0;
  out.data.y = sample_responses(f0, derive_seed(spec.seed, 13));
  out.data.f0 = f0;
  return out;
}

/// count points evenly spaced on [lo, hi], endpoints included; a single point sits at lo.
inline Eigen::VectorXd even_grid(double lo, double hi, Eigen::Index count) {
  if (count == 1) return Eigen::VectorXd::Constant(1, lo);
  return Eigen::VectorXd::LinSpaced(count, lo, hi);
}

inline double gp_toy_latent(double x) { return -4.5 * std::sin(0.5 * std::numbers::pi * x); }

inline GPToy gen_gp_toy(const GPToySpec& spec) {
  spec.validate();
  // ceil(n * 2.5 / 4) points on [0, 2.5], the rest on [3.5, 5].
  const auto left = static_cast<Eigen::Index>(std::ceil(static_cast<double>(spec.n_train) * 0.625));
  const Eigen::Index right = spec.n_train - left;
  Eigen::VectorXd x_train(spec.n_train);
  x_train.head(left) = even_grid(0.0, 2.5, left);
  if (right > 0) x_train.tail(right) = even_grid(3.5, 5.0, right);
  const Eigen::VectorXd x_test = even_grid(0.0, 5.0, spec.n_test);

  auto build = [](const Eigen::VectorXd& x, std::uint64_t seed) {
    LabeledDataset d;
    d.X = x;
    Eigen::VectorXd f0 = x.unaryExpr([](double v) { return gp_toy_latent(v); });
    Rng rng(seed);
    Eigen::VectorXd noisy = f0;
    for (Eigen::Index i = 0; i < noisy.size(); ++i) noisy[i] += rng.normal();
    d.y = sample_responses(noisy, splitmix64(seed));
    d.f0 = std::move(f0);
    return d;
  };
  return {build(x_train, derive_seed(spec.seed, 21)), build(x_test, derive_seed(spec.seed, 22))};
}

/// Parses LIBSVM text. name is used in error messages.
inline LabeledDataset parse_libsvm(std::istream& in, const std::string& name) {
  struct Row {
    double label;
    std::vector<std::pair<Eigen::Index, double>> entries;
  };
  std::vector<Row> rows;
  std::set<double> labels;
  Eigen::Index p = 0;
  std::string line;
  long line_no = 0;
  auto fail = [&](const std::string& why) {
    throw data_error(name + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream tokens(line);
    std::string tok;
    if (!(tokens >> tok)) continue;
    Row row{};
    try {
      std::size_t used = 0;
      row.label = std::stod(tok, &used);
      if (used != tok.size()) fail("malformed label '" + tok + "'");
    } catch (const std::logic_error&) {
      fail("malformed label '" + tok + "'");
    }
    if (!std::isfinite(row.label)) fail("non-finite label");
    Eigen::Index last = 0;
    while (tokens >> tok) {
      const auto colon = tok.find(':');
      if (colon == std::string::npos || colon == 0 || colon + 1 == tok.size()) fail("malformed feature '" + tok + "'");
      long long index = 0;
      double value = 0.0;
      try {
        std::size_t used = 0;
        const std::string idx = tok.substr(0, colon);
        index = std::stoll(idx, &used);
        if (used != idx.size()) fail("malformed index in '" + tok + "'");
        const std::string val = tok.substr(colon + 1);
        value = std::stod(val, &used);
        if (used != val.size()) fail("malformed value in '" + tok + "'");
      } catch (const std::logic_error&) {
        fail("malformed feature '" + tok + "'");
      }
      if (index < 1) fail("feature index must be >= 1 in '" + tok + "'");
      if (index <= last) fail("feature indices must be strictly increasing");
      if (!std::isfinite(value)) fail("non-finite feature value");
      last = static_cast<Eigen::Index>(index);
      row.entries.emplace_back(last - 1, value);
    }
    p = std::max(p, last);
    labels.insert(row.label);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw data_error(name + ": no data rows");

  const bool plus_minus = std::all_of(labels.begin(), labels.end(), [](double v) { return v == -1.0 || v == 1.0; });
  const bool zero_one = std::all_of(labels.begin(), labels.end(), [](double v) { return v == 0.0 || v == 1.0; });
  if (!plus_minus && !zero_one) {
    std::string list;
    for (double v : labels) {
      std::ostringstream s;
      s << v;
      list += (list.empty() ? "" : ", ") + s.str();
    }
    throw data_error(name + ": labels must be {-1,+1} or {0,1}, found {" + list + "}");
  }

  LabeledDataset out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.X = Eigen::MatrixXd::Zero(n, p);
  out.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Row& r = rows[static_cast<std::size_t>(i)];
    out.y[i] = r.label > 0.0 ? 1.0 : 0.0;
    for (const auto& [j, v] : r.entries) out.X(i, j) = v;
  }
  return out;
}

inline LabeledDataset load_libsvm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error(path + ": cannot open file");
  return parse_libsvm(in, path);
}

/// Labels written as 0/1, zero features omitted, values with 17 significant digits.
inline void write_libsvm(std::ostream& out, const LabeledDataset& data) {
  char buf[64];
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    out << (data.y[i] > 0.5 ? "1" : "0");
    for (Eigen::Index j = 0; j < data.p(); ++j) {
      if (data.X(i, j) == 0.0) continue;
      std::snprintf(buf, sizeof buf, " %ld:%.17g", static_cast<long>(j + 1), data.X(i, j));
      out << buf;
    }
    out << '\n';
  }
}

inline void write_libsvm(const std::string& path, const LabeledDataset& data) {
  std::ofstream out(path);
  if (!out) throw data_error(path + ": cannot open for writing");
  write_libsvm(out, data);
  if (!out) throw data_error(path + ": write failed");
}

/// First floor(fraction * n) rows for training, the rest for testing; no shuffling.
inline std::pair<LabeledDataset, LabeledDataset> train_test_split(const LabeledDataset& data, double fraction = 0.8) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw config_error("train_test_split: fraction must lie in (0, 1)");
  // The small slack keeps products like 0.29 * 100 from landing just below an integer.
  const auto n_train = static_cast<Eigen::Index>(std::floor(fraction * static_cast<double>(data.n()) + 1e-9));
  return {data.rows(0, n_train), data.rows(n_train, data.n() - n_train)};
}

}  // namespace viper
