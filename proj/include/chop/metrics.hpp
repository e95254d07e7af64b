#pragma once

#include <Eigen/Dense>

namespace chop {

/// ||estimate - reference||_2 / sqrt(m).
double rmse(const Eigen::VectorXd& estimate, const Eigen::VectorXd& reference);

/// (d_o - d_pred)^T C_d^{-1} (d_o - d_pred).
double data_mismatch(const Eigen::VectorXd& predicted, const Eigen::VectorXd& observed,
                     const Eigen::MatrixXd& error_cov);

/// ||[sigma_1 .. sigma_m]||_2 / sqrt(m) with per-component sample standard
/// deviations (N_e - 1 divisor).
double ensemble_spread(const Eigen::MatrixXd& ensemble);

/// Average over members of the per-member RMSE.
double mean_member_rmse(const Eigen::MatrixXd& ensemble, const Eigen::VectorXd& reference);

struct CycleMetrics {
  int time_index = 0;
  double rmse_of_mean = 0.0;
  double mean_rmse = 0.0;
  double data_mismatch_mean = 0.0;
  double spread = 0.0;
};

}  // namespace chop
