#include "chop/metrics.hpp"

#include "chop/error.hpp"

#include <cmath>

namespace chop {

double rmse(const Eigen::VectorXd& estimate, const Eigen::VectorXd& reference) {
  if (estimate.size() != reference.size() || estimate.size() == 0)
    throw Error(ErrorCode::InvalidDimension, "rmse needs two non-empty vectors of equal length");
  return (estimate - reference).norm() / std::sqrt(static_cast<double>(estimate.size()));
}

double data_mismatch(const Eigen::VectorXd& predicted, const Eigen::VectorXd& observed,
                     const Eigen::MatrixXd& error_cov) {
  if (predicted.size() != observed.size() || error_cov.rows() != observed.size() ||
      error_cov.cols() != observed.size())
    throw Error(ErrorCode::InvalidDimension, "data mismatch operands disagree in size");
  const Eigen::VectorXd r = observed - predicted;
  Eigen::LLT<Eigen::MatrixXd> llt(error_cov);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorCode::Factorization, "observation error covariance is singular");
  return r.dot(llt.solve(r));
}

double ensemble_spread(const Eigen::MatrixXd& ensemble) {
  const Eigen::Index ne = ensemble.cols();
  if (ne < 2) throw Error(ErrorCode::DegenerateEnsemble, "spread needs at least 2 members");
  const Eigen::VectorXd mean = ensemble.rowwise().mean();
  // Sum of per-component variances; ||sigma||^2 / m is their average.
  const double total_var =
      (ensemble.colwise() - mean).squaredNorm() / static_cast<double>(ne - 1);
  return std::sqrt(total_var / static_cast<double>(ensemble.rows()));
}

double mean_member_rmse(const Eigen::MatrixXd& ensemble, const Eigen::VectorXd& reference) {
  double sum = 0.0;
  for (Eigen::Index j = 0; j < ensemble.cols(); ++j) sum += rmse(ensemble.col(j), reference);
  return sum / static_cast<double>(ensemble.cols());
}

}  // namespace chop
