#pragma once

#include "chop/ensemble.hpp"
#include "chop/observation.hpp"

#include <Eigen/Dense>

namespace testing {

// Batch with caller-chosen perturbed observations and a diagonal error covariance.
inline chop::ObservationBatch batch(const Eigen::VectorXd& observed, const Eigen::MatrixXd& perturbed,
                                    const Eigen::VectorXd& variances) {
  chop::ObservationBatch b;
  b.observed = observed;
  b.perturbed = perturbed;
  b.error_cov = variances.asDiagonal();
  b.error_inv_sqrt = variances.cwiseSqrt().cwiseInverse().asDiagonal();
  b.diagonal = true;
  return b;
}

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace testing
