#pragma once

#include "chop/ensemble.hpp"
#include "chop/observation.hpp"

#include <Eigen/Dense>

#include <vector>

namespace chop {

enum class InflationMode { Single, Multiple };

/// Multiplicative covariance inflation m~ = mean + (1 + delta) o (m - mean).
/// Single mode holds one factor; multiple mode holds one factor per state
/// component.
struct InflationSpec {
  InflationMode mode = InflationMode::Single;
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(1);

  static InflationSpec single(double delta);
  static InflationSpec multiple(Eigen::VectorXd delta);

  /// Per-component factors 1 + delta, expanded to n_state entries.
  Eigen::VectorXd factors(Eigen::Index n_state) const;
  /// Throws InvalidHyperParameter / InvalidDimension.
  void validate(Eigen::Index n_state) const;
};

/// Hyper-parameters of the inflated, localized EnKF analysis.
struct HyperParams {
  InflationSpec inflation;
  double length_scale = 1.0;
};

/// Admissible hyper-parameter box (also the sampling range of the IES).
struct HyperBounds {
  Range delta{0.0, 2.0};
  Range length_scale{0.05, 1.0};
};

/// Clamps into `bounds`; returns true when any value moved.
bool clamp_hyper_params(HyperParams& theta, const HyperBounds& bounds);

/// Normalized ring distance min(|s-o|/N, 1 - |s-o|/N).  Indices are 0-based.
double ring_distance(Eigen::Index s, Eigen::Index o, Eigen::Index n_state);

/// Distance-based Gaspari-Cohn taper between state components (rows) and
/// observations (columns).
struct LocalizationField {
  double length_scale = 1.0;
  Eigen::MatrixXd taper;  ///< n_state x d
};

LocalizationField taper_matrix(double length_scale, const ObservationOperator& op);

/// Taper values indexed by the ring offset |s - o| in [0, n_state).  Equivalent
/// to taper_matrix but O(n_state) in memory.
std::vector<double> taper_by_offset(double length_scale, Eigen::Index n_state);

/// Inflates every member about the ensemble mean.
Eigen::MatrixXd inflate(const Eigen::MatrixXd& ensemble, const InflationSpec& spec);

/// The EnKF analysis with perturbed observations, inflation and localization,
/// viewed as a mapping from hyper-parameters to an analysis.  Everything that
/// depends only on the background and the observations is computed once at
/// construction; each evaluation then costs O(N_e * d * support) at most.
///
/// Single inflation follows
///   m_a = m~ + {L(lambda) o [C_m H^T (H C_m H^T + C_d/(1+delta)^2)^{-1}]} (d_j - H m~),
/// multiple inflation follows
///   m_a = m~ + {L(lambda) o [C~_m H^T (H C~_m H^T + C_d)^{-1}]} (d_j - H m~),
/// with C~_m the covariance of the inflated ensemble.  H is never formed and
/// the gain is only evaluated inside the support of the taper.
///
/// With `inflate_members` off the members keep their raw deviations and the
/// inflation acts through the gain only.
class EnkfMapping {
 public:
  EnkfMapping(const Eigen::MatrixXd& background, const ObservationBatch& obs,
              const ObservationOperator& op, bool inflate_members = true);

  Eigen::Index n_state() const { return mean_.size(); }
  Eigen::Index members() const { return deviations_.cols(); }
  Eigen::Index n_obs() const { return obs_->size(); }

  /// Analysis of member j under hyper-parameters theta.
  Eigen::VectorXd analyze_member(Eigen::Index j, const HyperParams& theta) const;

  /// Analysis of every member under one shared theta (n_state x N_e).
  Eigen::MatrixXd analyze(const HyperParams& theta) const;

  /// Analysis of the ensemble-mean member: background mean paired with the
  /// mean perturbed observation.  By linearity this equals the mean of
  /// analyze(theta).
  Eigen::VectorXd analyze_mean(const HyperParams& theta) const;

  const Eigen::VectorXd& background_mean() const { return mean_; }
  const ObservationOperator& op() const { return *op_; }
  const ObservationBatch& observations() const { return *obs_; }

 private:
  /// The gain factored as K = Z Q (Z: n_state x k, Q: k x d).
  struct GainFactors {
    Eigen::MatrixXd z;
    Eigen::MatrixXd q;
  };
  GainFactors gain_factors(const HyperParams& theta) const;
  Eigen::VectorXd update(const Eigen::VectorXd& inflated, const Eigen::VectorXd& obs,
                         const HyperParams& theta) const;
  /// (L(lambda) o Z Q) x, skipping entries outside the taper support.
  Eigen::VectorXd localized_gain_times(const GainFactors& gain, const std::vector<double>& taper,
                                       const Eigen::VectorXd& x) const;

  const ObservationBatch* obs_;
  const ObservationOperator* op_;
  bool inflate_members_ = true;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd deviations_;       ///< member - mean
  Eigen::MatrixXd anomalies_;        ///< A = deviations / sqrt(N_e - 1)
  Eigen::MatrixXd obs_anomalies_;    ///< H A
  // With B = C_d^{-1/2} H A: B^T B and B^T C_d^{-1/2}.
  Eigen::MatrixXd gram_;
  Eigen::MatrixXd btw_;
};

/// Convenience wrapper: analysis of all members under one theta.
Eigen::MatrixXd enkf_analysis(const Eigen::MatrixXd& background, const ObservationBatch& obs,
                              const ObservationOperator& op, const HyperParams& theta);

/// Reference implementation that forms H, the covariance and the gain
/// explicitly.  The innovation covariance is inverted through a Cholesky
/// factorization, falling back to an SVD pseudo-inverse if it is not
/// numerically positive definite.  Intended for small problems and testing.
Eigen::MatrixXd enkf_analysis_dense(const Eigen::MatrixXd& background,
                                    const ObservationBatch& obs, const ObservationOperator& op,
                                    const HyperParams& theta);

}  // namespace chop
