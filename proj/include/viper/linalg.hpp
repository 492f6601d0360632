#pragma once

#include <cmath>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "viper/errors.hpp"

namespace viper::linalg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Lower Cholesky factor; throws numerical_error naming the failing pivot.
inline MatrixXd cholesky_lower(const MatrixXd& A, const std::string& what) {
  if (A.rows() != A.cols()) throw dimension_error(what + ": matrix is not square");
  const Eigen::Index n = A.rows();
  MatrixXd L = MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = A(j, j) - L.row(j).head(j).squaredNorm();
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw numerical_error(what + ": not positive definite (pivot " + std::to_string(j) + " = " +
                            std::to_string(d) + ")");
    }
    d = std::sqrt(d);
    L(j, j) = d;
    if (j + 1 < n) {
      L.col(j).tail(n - j - 1) =
          (A.col(j).tail(n - j - 1) - L.bottomLeftCorner(n - j - 1, j) * L.row(j).head(j).transpose()) / d;
    }
  }
  return L;
}

/// log det A from its lower Cholesky factor.
inline double log_det_from_cholesky(const MatrixXd& L) { return 2.0 * L.diagonal().array().log().sum(); }

/// A^{-1} B given the lower Cholesky factor of A.
inline MatrixXd cholesky_solve(const MatrixXd& L, const MatrixXd& B) {
  MatrixXd X = L.triangularView<Eigen::Lower>().solve(B);
  L.transpose().triangularView<Eigen::Upper>().solveInPlace(X);
  return X;
}

inline VectorXd cholesky_solve(const MatrixXd& L, const VectorXd& b) {
  VectorXd x = L.triangularView<Eigen::Lower>().solve(b);
  L.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return x;
}

inline MatrixXd cholesky_inverse(const MatrixXd& L) {
  return cholesky_solve(L, MatrixXd::Identity(L.rows(), L.rows()).eval());
}

inline void require_positive_diagonal(const MatrixXd& L, const std::string& what) {
  for (Eigen::Index j = 0; j < L.rows(); ++j) {
    if (!(L(j, j) > 0.0) || !std::isfinite(L(j, j))) {
      throw numerical_error(what + ": factor diagonal entry " + std::to_string(j) + " = " +
                            std::to_string(L(j, j)) + " is not positive");
    }
  }
}

}  // namespace viper::linalg
