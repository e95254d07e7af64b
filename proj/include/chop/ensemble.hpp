#pragma once

#include "chop/random.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace chop {

/// Closed interval used for sampling ranges and clamping bounds.
struct Range {
  double lo = 0.0;
  double hi = 1.0;

  double clamp(double x) const { return x < lo ? lo : (x > hi ? hi : x); }
};

/// Ensemble mean and square-root anomalies (member - mean) / sqrt(N_e - 1).
/// Members are the columns of the ensemble matrix.
struct MeanAndAnomalies {
  Eigen::VectorXd mean;
  Eigen::MatrixXd anomalies;
};

MeanAndAnomalies mean_and_anomalies(const Eigen::MatrixXd& ensemble);

/// Leading part of a thin SVD selected by the cumulative singular-value rule.
struct TruncatedSvd {
  Eigen::MatrixXd u;                ///< d x r, orthonormal columns
  Eigen::VectorXd singular_values;  ///< r, positive, non-increasing
  Eigen::MatrixXd v;                ///< N_e x r, orthonormal columns
  double energy_kept = 0.0;         ///< sum of kept / sum of all
  double energy_next = 1.0;         ///< fraction if one more value were kept
  Eigen::Index full_rank = 0;       ///< number of singular values R before truncation

  Eigen::Index rank() const { return singular_values.size(); }
};

/// Largest r whose cumulative singular-value fraction stays <= threshold,
/// never less than 1.  `singular_values` must be sorted descending.
Eigen::Index truncation_rank(const Eigen::VectorXd& singular_values, double threshold = 0.99);

/// Thin SVD truncated with truncation_rank.  Throws DegenerateMatrix when the
/// input is all zero or non-finite.
TruncatedSvd truncated_svd(const Eigen::MatrixXd& matrix, double threshold = 0.99);

/// Gaspari-Cohn compactly supported fifth-order kernel: 1 at 0, 0 beyond 2.
double gaspari_cohn(double z);

/// Stratified samples, one per equal-width stratum per dimension.  Returns a
/// ranges.size() x n matrix whose columns are the samples.
Eigen::MatrixXd latin_hypercube(std::span<const Range> ranges, int n, std::uint64_t seed);
Eigen::MatrixXd latin_hypercube(std::span<const Range> ranges, int n, Rng& rng);

/// Draws from N(mean, covariance) through a symmetric eigendecomposition
/// square root; eigenvalues below zero are clamped to zero.
class GaussianSampler {
 public:
  GaussianSampler(Eigen::VectorXd mean, const Eigen::MatrixXd& covariance);

  Eigen::Index dimension() const { return mean_.size(); }
  Eigen::VectorXd draw(Rng& rng) const;
  Eigen::MatrixXd draw(Rng& rng, Eigen::Index count) const;

  const Eigen::MatrixXd& sqrt_covariance() const { return sqrt_; }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd sqrt_;
};

/// Symmetric square root of a positive-semidefinite matrix.  Throws
/// Factorization when an eigenvalue is negative beyond round-off.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& covariance);

/// Symmetric inverse square root of an SPD matrix (elementwise for diagonal
/// input).  Throws Factorization when the matrix is not positive definite.
Eigen::MatrixXd spd_inverse_sqrt(const Eigen::MatrixXd& covariance);

/// Sample standard deviation (N - 1 divisor) of each row.
Eigen::VectorXd row_std(const Eigen::MatrixXd& samples);

}  // namespace chop
