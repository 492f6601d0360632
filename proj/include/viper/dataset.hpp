#pragma once

#include <optional>
#include <string>

#include <Eigen/Core>

#include "viper/errors.hpp"

namespace viper {

/// Design matrix, binary responses and (for simulated data) the true latent values.
struct LabeledDataset {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::optional<Eigen::VectorXd> f0;

  Eigen::Index n() const { return X.rows(); }
  Eigen::Index p() const { return X.cols(); }

  /// Shape, finiteness and label checks. n = 0 is allowed (prior-only fits).
  void validate() const {
    if (y.size() != X.rows()) {
      throw dimension_error("LabeledDataset: X has " + std::to_string(X.rows()) + " rows but y has " +
                            std::to_string(y.size()) + " entries");
    }
    if (f0 && f0->size() != X.rows()) throw dimension_error("LabeledDataset: f0 length differs from n");
    if (!X.allFinite()) throw data_error("LabeledDataset: X contains non-finite values");
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (y[i] != 0.0 && y[i] != 1.0) {
        throw data_error("LabeledDataset: y[" + std::to_string(i) + "] = " + std::to_string(y[i]) +
                         " is not 0 or 1");
      }
    }
  }

  /// Rows [begin, begin + count).
  LabeledDataset rows(Eigen::Index begin, Eigen::Index count) const {
    LabeledDataset out;
    out.X = X.middleRows(begin, count);
    out.y = y.segment(begin, count);
    if (f0) out.f0 = f0->segment(begin, count);
    return out;
  }
};

}  // namespace viper
