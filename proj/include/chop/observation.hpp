#pragma once

#include "chop/random.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace chop {

/// Linear extraction operator observing every `stride`-th ring location,
/// starting with the first.  Indices are 0-based.
class ObservationOperator {
 public:
  ObservationOperator(int n_state, int stride);

  int n_state() const { return n_state_; }
  int stride() const { return stride_; }
  Eigen::Index size() const { return static_cast<Eigen::Index>(indices_.size()); }
  const std::vector<Eigen::Index>& indices() const { return indices_; }

  /// Model index observed by the t-th observation.
  Eigen::Index location(Eigen::Index t) const { return indices_[static_cast<std::size_t>(t)]; }

  Eigen::VectorXd apply(const Eigen::VectorXd& state) const;
  /// Applies the operator column-wise.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& states) const;

  /// Dense matrix form; only meant for small reference computations.
  Eigen::MatrixXd matrix() const;

 private:
  int n_state_;
  int stride_;
  std::vector<Eigen::Index> indices_;
};

/// Real observation, its per-member perturbed copies and the error covariance.
struct ObservationBatch {
  Eigen::VectorXd observed;         ///< d
  Eigen::MatrixXd perturbed;        ///< d x N_e
  Eigen::MatrixXd error_cov;        ///< d x d, SPD
  Eigen::MatrixXd error_inv_sqrt;   ///< symmetric C_d^{-1/2}
  bool diagonal = true;             ///< error_cov is diagonal

  Eigen::Index size() const { return observed.size(); }
  Eigen::Index members() const { return perturbed.cols(); }

  /// C_d^{-1/2} x.
  Eigen::VectorXd whiten(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd whiten(const Eigen::MatrixXd& x) const;
};

/// Extracts the observed components and adds N(0, noise_std^2) noise.
Eigen::VectorXd observe(const ObservationOperator& op, const Eigen::VectorXd& state,
                        std::uint64_t noise_seed, double noise_std = 1.0);
Eigen::VectorXd observe(const ObservationOperator& op, const Eigen::VectorXd& state, Rng& rng,
                        double noise_std = 1.0);

/// d_o + eta_j, eta_j ~ N(0, C_d), one column per member.  C_d may be
/// semidefinite (a zero covariance yields exact copies).
Eigen::MatrixXd perturb_observations(const Eigen::VectorXd& observed,
                                     const Eigen::MatrixXd& error_cov, int n_members,
                                     std::uint64_t seed);
Eigen::MatrixXd perturb_observations(const Eigen::VectorXd& observed,
                                     const Eigen::MatrixXd& error_cov, int n_members, Rng& rng);

/// Bundles the real observation with freshly drawn perturbations.
ObservationBatch make_observation_batch(Eigen::VectorXd observed, Eigen::MatrixXd error_cov,
                                        int n_members, std::uint64_t seed);
ObservationBatch make_observation_batch(Eigen::VectorXd observed, Eigen::MatrixXd error_cov,
                                        int n_members, Rng& rng);

}  // namespace chop
