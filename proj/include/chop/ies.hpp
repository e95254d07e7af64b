#pragma once

#include "chop/enkf.hpp"
#include "chop/ensemble.hpp"
#include "chop/observation.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace chop {

/// Settings of the iterative ensemble smoother that tunes the hyper-parameters.
struct IesConfig {
  InflationMode mode = InflationMode::Single;
  HyperBounds bounds;
  int max_iterations = 10;
  int max_trials = 5;
  double relative_tolerance = 1e-4;
  double mismatch_factor = 4.0;  ///< stop when average mismatch < factor * d
  double alpha0 = 1.0;
  double alpha_shrink = 0.9;     ///< applied after an accepted first attempt
  double alpha_growth = 2.0;     ///< applied at every trial
  double svd_threshold = 0.99;
  bool localize = true;          ///< correlation-based taper on the gain
  bool inflate_members = true;   ///< EnKF members inflated, not just the gain
};

enum class StopReason { None, MaxIterations, RelativeChange, AbsoluteThreshold, Degenerate };
std::string_view to_string(StopReason reason);

/// Hyper-parameter vector layout: [delta, lambda] (single inflation) or
/// [delta_1 .. delta_N, lambda] (multiple inflation).
Eigen::Index hyper_param_count(InflationMode mode, Eigen::Index n_state);
HyperParams unpack_hyper_params(const Eigen::VectorXd& theta, InflationMode mode);
Eigen::VectorXd pack_hyper_params(const HyperParams& theta);
std::vector<Range> hyper_param_ranges(InflationMode mode, Eigen::Index n_state,
                                      const HyperBounds& bounds);

/// Clamps each row of a hyper-parameter ensemble into its range.
void clamp_rows(Eigen::MatrixXd& theta, std::span<const Range> ranges);

/// Output of the mapping for a hyper-parameter ensemble.
struct MappingOutput {
  Eigen::MatrixXd predicted;  ///< d x N_e predicted observations
  Eigen::MatrixXd states;     ///< n_state x N_e updated states (may be empty)
  int clamped = 0;            ///< members whose hyper-parameters were clamped
};

/// g(theta_j) for every member: EnKF analysis of member j under theta_j,
/// then observed.  Members outside `bounds` are clamped before evaluation.
MappingOutput predict_observations(const EnkfMapping& mapping, const Eigen::MatrixXd& theta,
                                   InflationMode mode, const HyperBounds& bounds = {});

/// Mean over members of (d_j - g_j)^T C_d^{-1} (d_j - g_j).
double average_data_mismatch(const Eigen::MatrixXd& predicted, const ObservationBatch& obs);
/// Per-member terms of average_data_mismatch.
Eigen::VectorXd member_data_mismatch(const Eigen::MatrixXd& predicted,
                                     const ObservationBatch& obs);

/// Regularization weight matching trace(Sigma^2) / r.
double gamma_from_alpha(double alpha, const TruncatedSvd& svd);

/// Correlation-based localization of the h x d gain.
struct CorrelationTaper {
  Eigen::MatrixXd taper;        ///< h x d, entries in [0, 1]
  Eigen::MatrixXd correlation;  ///< h x d sample correlations
};

/// Taper f_GC((1 - |rho|) / (1 - 3/sqrt(N_e))) built from the sample
/// correlation between each hyper-parameter row and each innovation row.
/// Rows with zero variance get rho = 0.  Requires N_e > 9.
CorrelationTaper correlation_taper(const Eigen::MatrixXd& theta,
                                   const Eigen::MatrixXd& innovations);

/// Quantities shared by every trial of one outer iteration: they depend only on
/// the previous ensemble and its predictions.
struct IesStepBasis {
  Eigen::MatrixXd theta;        ///< h x N_e previous ensemble
  Eigen::MatrixXd theta_sqrt;   ///< S_theta
  TruncatedSvd svd;             ///< of the whitened S_g
  Eigen::MatrixXd residuals;    ///< whitened d_j - g(theta_j), d x N_e
};

/// S_g is centred on `predicted_at_mean`, the mapping evaluated at the
/// ensemble-mean hyper-parameter (one shared column or one per member).
IesStepBasis prepare_ies_step(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& predicted,
                              const Eigen::MatrixXd& predicted_at_mean,
                              const ObservationBatch& obs, double svd_threshold = 0.99);

/// theta_j + (L o K) r_j with K = S_theta V S (S^2 + gamma I)^{-1} U^T.
/// An empty taper means no localization.  The result is clamped to `ranges`
/// when they are given.
Eigen::MatrixXd ies_step(const IesStepBasis& basis, double gamma, const Eigen::MatrixXd& taper,
                         std::span<const Range> ranges = {});

/// Record of one outer iteration (iteration 0 is the initial ensemble).
struct IesIteration {
  int iteration = 0;
  double alpha = 0.0;           ///< coefficient that produced this ensemble
  double gamma = 0.0;
  int trials = 0;               ///< extra doubling trials used
  bool accepted = true;         ///< false when every trial failed to improve
  double mismatch = 0.0;        ///< average data mismatch
  Eigen::VectorXd member_mismatch;
  Eigen::Index svd_rank = 0;
  Eigen::Index svd_full_rank = 0;
  double energy_kept = 0.0;
  double energy_next = 1.0;
  double taper_min = 1.0;
  double taper_max = 1.0;
  double theta_spread = 0.0;    ///< ensemble spread of the hyper-parameters
  // Only filled when the caller supplies a reference state.
  double mean_rmse = 0.0;
  double spread = 0.0;
};

struct IesDiagnostics {
  std::vector<IesIteration> iterations;
  StopReason stop = StopReason::None;
  int clamp_events = 0;
  Eigen::MatrixXd initial_theta;
  Eigen::MatrixXd final_theta;

  int outer_iterations() const { return static_cast<int>(iterations.size()) - 1; }
};

/// Mapping interface used by the generic smoother.
struct IesProblem {
  std::function<MappingOutput(const Eigen::MatrixXd& theta)> predict;
  /// Mapping at the mean hyper-parameters: one column shared by all members,
  /// or one column per member.
  std::function<Eigen::MatrixXd(const Eigen::VectorXd& theta_mean)> predict_at;
  /// Optional: called on every accepted ensemble to fill state-space metrics.
  std::function<void(IesIteration&, const MappingOutput&)> annotate;
};

struct IesResult {
  Eigen::MatrixXd theta;
  MappingOutput output;
  IesDiagnostics diagnostics;
};

/// Iterative ensemble smoother with backtracking on alpha and the three
/// stopping rules (iteration cap, relative change, absolute threshold).
/// `ranges` (one per hyper-parameter, may be empty) bound every update.
IesResult run_ies(Eigen::MatrixXd theta0, const IesProblem& problem, const ObservationBatch& obs,
                  const IesConfig& config, std::span<const Range> ranges = {});

/// Result of one hyper-parameter-tuned analysis cycle.
struct ChopCycleResult {
  Eigen::MatrixXd analysis;   ///< n_state x N_e
  Eigen::MatrixXd theta;      ///< final hyper-parameter ensemble
  IesDiagnostics diagnostics;
  bool failed = false;        ///< every member non-finite
};

/// One analysis cycle: Latin hypercube initial ensemble, smoother iterations,
/// analysis from the final hyper-parameters.  `reference` (the truth) is only
/// used for diagnostics.
ChopCycleResult run_chop_cycle(const Eigen::MatrixXd& background, const ObservationBatch& obs,
                               const ObservationOperator& op, const IesConfig& config,
                               Rng& rng,
                               const std::optional<Eigen::VectorXd>& reference = std::nullopt);

}  // namespace chop
