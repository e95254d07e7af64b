#include "chop/ies.hpp"

#include "chop/error.hpp"
#include "chop/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace chop {

std::string_view to_string(StopReason reason) {
  switch (reason) {
    case StopReason::None: return "none";
    case StopReason::MaxIterations: return "max-iter";
    case StopReason::RelativeChange: return "rel-change";
    case StopReason::AbsoluteThreshold: return "abs-threshold";
    case StopReason::Degenerate: return "degenerate";
  }
  return "unknown";
}

Eigen::Index hyper_param_count(InflationMode mode, Eigen::Index n_state) {
  return mode == InflationMode::Single ? 2 : n_state + 1;
}

HyperParams unpack_hyper_params(const Eigen::VectorXd& theta, InflationMode mode) {
  if (theta.size() < 2)
    throw Error(ErrorCode::InvalidDimension, "hyper-parameter vector needs at least 2 entries");
  const Eigen::Index h = theta.size();
  HyperParams p;
  if (mode == InflationMode::Single) {
    if (h != 2) throw Error(ErrorCode::InvalidDimension, "single inflation expects [delta, lambda]");
    p.inflation = InflationSpec::single(theta(0));
  } else {
    p.inflation = InflationSpec::multiple(theta.head(h - 1));
  }
  p.length_scale = theta(h - 1);
  return p;
}

Eigen::VectorXd pack_hyper_params(const HyperParams& theta) {
  const Eigen::Index k = theta.inflation.delta.size();
  Eigen::VectorXd out(k + 1);
  out.head(k) = theta.inflation.delta;
  out(k) = theta.length_scale;
  return out;
}

std::vector<Range> hyper_param_ranges(InflationMode mode, Eigen::Index n_state,
                                      const HyperBounds& bounds) {
  std::vector<Range> ranges(static_cast<std::size_t>(hyper_param_count(mode, n_state)),
                            bounds.delta);
  ranges.back() = bounds.length_scale;
  return ranges;
}

void clamp_rows(Eigen::MatrixXd& theta, std::span<const Range> ranges) {
  if (ranges.empty()) return;
  if (static_cast<Eigen::Index>(ranges.size()) != theta.rows())
    throw Error(ErrorCode::InvalidDimension, "one range per hyper-parameter row expected");
  for (Eigen::Index s = 0; s < theta.rows(); ++s) {
    const Range& r = ranges[static_cast<std::size_t>(s)];
    for (Eigen::Index j = 0; j < theta.cols(); ++j) theta(s, j) = r.clamp(theta(s, j));
  }
}

MappingOutput predict_observations(const EnkfMapping& mapping, const Eigen::MatrixXd& theta,
                                   InflationMode mode, const HyperBounds& bounds) {
  if (theta.cols() != mapping.members())
    throw Error(ErrorCode::InvalidDimension, "one hyper-parameter vector per member expected");
  MappingOutput out;
  out.states.resize(mapping.n_state(), theta.cols());
  for (Eigen::Index j = 0; j < theta.cols(); ++j) {
    HyperParams p = unpack_hyper_params(theta.col(j), mode);
    if (clamp_hyper_params(p, bounds)) ++out.clamped;
    out.states.col(j) = mapping.analyze_member(j, p);
  }
  out.predicted = mapping.op().apply(out.states);
  return out;
}

Eigen::VectorXd member_data_mismatch(const Eigen::MatrixXd& predicted,
                                     const ObservationBatch& obs) {
  if (predicted.rows() != obs.size() || predicted.cols() != obs.members())
    throw Error(ErrorCode::InvalidDimension, "predicted observations do not match the batch");
  return obs.whiten(Eigen::MatrixXd(obs.perturbed - predicted)).colwise().squaredNorm().transpose();
}

double average_data_mismatch(const Eigen::MatrixXd& predicted, const ObservationBatch& obs) {
  return member_data_mismatch(predicted, obs).mean();
}

double gamma_from_alpha(double alpha, const TruncatedSvd& svd) {
  if (!(alpha > 0.0)) throw Error(ErrorCode::InvalidConfig, "alpha must be positive");
  if (svd.rank() < 1) throw Error(ErrorCode::DegenerateMatrix, "empty truncated SVD");
  return alpha * svd.singular_values.squaredNorm() / static_cast<double>(svd.rank());
}

namespace {

// Rows scaled to unit norm after centring; rows without variance become zero.
Eigen::MatrixXd standardized_rows(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd z = x.colwise() - x.rowwise().mean();
  for (Eigen::Index s = 0; s < z.rows(); ++s) {
    const double norm = z.row(s).norm();
    const double scale = x.row(s).cwiseAbs().maxCoeff();
    if (!(norm > 1e-12 * scale) || norm == 0.0)
      z.row(s).setZero();
    else
      z.row(s) /= norm;
  }
  return z;
}

}  // namespace

CorrelationTaper correlation_taper(const Eigen::MatrixXd& theta,
                                   const Eigen::MatrixXd& innovations) {
  const Eigen::Index ne = theta.cols();
  if (innovations.cols() != ne)
    throw Error(ErrorCode::InvalidDimension, "theta and innovations need the same members");
  if (ne <= 9)
    throw Error(ErrorCode::UnsupportedEnsembleSize,
                "correlation taper needs more than 9 members, got " + std::to_string(ne));
  CorrelationTaper out;
  out.correlation = (standardized_rows(theta) * standardized_rows(innovations).transpose())
                        .cwiseMax(-1.0)
                        .cwiseMin(1.0);
  const double denom = 1.0 - 3.0 / std::sqrt(static_cast<double>(ne));
  out.taper = out.correlation.unaryExpr(
      [denom](double rho) { return gaspari_cohn((1.0 - std::abs(rho)) / denom); });
  return out;
}

IesStepBasis prepare_ies_step(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& predicted,
                              const Eigen::MatrixXd& predicted_at_mean,
                              const ObservationBatch& obs, double svd_threshold) {
  const Eigen::Index ne = theta.cols();
  if (predicted.cols() != ne || predicted.rows() != obs.size() ||
      predicted_at_mean.rows() != obs.size() ||
      (predicted_at_mean.cols() != 1 && predicted_at_mean.cols() != ne))
    throw Error(ErrorCode::InvalidDimension, "IES step operands disagree in size");
  IesStepBasis basis;
  basis.theta = theta;
  basis.theta_sqrt = mean_and_anomalies(theta).anomalies;
  if (basis.theta_sqrt.isZero(0.0))
    throw Error(ErrorCode::CollapsedEnsemble, "hyper-parameter ensemble has no spread");
  const Eigen::MatrixXd centred = predicted_at_mean.cols() == 1
                                     ? Eigen::MatrixXd(predicted.colwise() - predicted_at_mean.col(0))
                                     : Eigen::MatrixXd(predicted - predicted_at_mean);
  const Eigen::MatrixXd sg = centred / std::sqrt(static_cast<double>(ne - 1));
  basis.svd = truncated_svd(obs.whiten(sg), svd_threshold);
  basis.residuals = obs.whiten(Eigen::MatrixXd(obs.perturbed - predicted));
  return basis;
}

Eigen::MatrixXd ies_step(const IesStepBasis& basis, double gamma, const Eigen::MatrixXd& taper,
                         std::span<const Range> ranges) {
  if (!(gamma > 0.0)) throw Error(ErrorCode::InvalidConfig, "gamma must be positive");
  const Eigen::VectorXd& s = basis.svd.singular_values;
  const Eigen::VectorXd w = s.array() / (s.array().square() + gamma);
  Eigen::MatrixXd gain = (basis.theta_sqrt * basis.svd.v) * w.asDiagonal() *
                         basis.svd.u.transpose();
  if (taper.size() != 0) {
    if (taper.rows() != gain.rows() || taper.cols() != gain.cols())
      throw Error(ErrorCode::InvalidDimension, "taper does not match the gain");
    gain.array() *= taper.array();
  }
  Eigen::MatrixXd next = basis.theta + gain * basis.residuals;
  clamp_rows(next, ranges);
  return next;
}

namespace {

IesIteration make_record(int iteration, const Eigen::MatrixXd& theta, const MappingOutput& out,
                         const ObservationBatch& obs, const IesProblem& problem) {
  IesIteration rec;
  rec.iteration = iteration;
  rec.member_mismatch = member_data_mismatch(out.predicted, obs);
  rec.mismatch = rec.member_mismatch.mean();
  if (theta.cols() >= 2) rec.theta_spread = ensemble_spread(theta);
  if (problem.annotate) problem.annotate(rec, out);
  return rec;
}

}  // namespace

IesResult run_ies(Eigen::MatrixXd theta0, const IesProblem& problem, const ObservationBatch& obs,
                  const IesConfig& config, std::span<const Range> ranges) {
  if (!problem.predict || !problem.predict_at)
    throw Error(ErrorCode::InvalidConfig, "IES problem needs predict and predict_at");
  if (config.max_iterations < 0 || config.max_trials < 0)
    throw Error(ErrorCode::InvalidConfig, "iteration limits must be non-negative");

  IesResult result;
  IesDiagnostics& diag = result.diagnostics;
  diag.initial_theta = theta0;
  result.theta = std::move(theta0);
  result.output = problem.predict(result.theta);
  diag.clamp_events += result.output.clamped;

  const double threshold = config.mismatch_factor * static_cast<double>(obs.size());
  diag.iterations.push_back(make_record(0, result.theta, result.output, obs, problem));
  double mismatch = diag.iterations.back().mismatch;
  if (!std::isfinite(mismatch)) {
    diag.stop = StopReason::Degenerate;
  } else if (mismatch < threshold) {
    diag.stop = StopReason::AbsoluteThreshold;
  } else if (config.max_iterations == 0) {
    diag.stop = StopReason::MaxIterations;
  }

  double alpha = config.alpha0;
  for (int it = 1; diag.stop == StopReason::None; ++it) {
    IesStepBasis basis;
    Eigen::MatrixXd taper;
    try {
      const Eigen::VectorXd mean_theta = result.theta.rowwise().mean();
      basis = prepare_ies_step(result.theta, result.output.predicted,
                               problem.predict_at(mean_theta), obs, config.svd_threshold);
      if (config.localize) taper = correlation_taper(result.theta, basis.residuals).taper;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateMatrix && e.code() != ErrorCode::CollapsedEnsemble)
        throw;
      diag.stop = StopReason::Degenerate;
      break;
    }

    double a = alpha;
    double gamma = 0.0;
    int trial = 0;
    bool accepted = false;
    Eigen::MatrixXd candidate;
    MappingOutput cand_out;
    double cand_mismatch = 0.0;
    for (;;) {
      gamma = gamma_from_alpha(a, basis.svd);
      candidate = ies_step(basis, gamma, taper, ranges);
      cand_out = problem.predict(candidate);
      diag.clamp_events += cand_out.clamped;
      cand_mismatch = average_data_mismatch(cand_out.predicted, obs);
      if (cand_mismatch < mismatch) {
        accepted = true;
        break;
      }
      if (trial == config.max_trials) break;
      ++trial;
      a *= config.alpha_growth;
    }
    if (!std::isfinite(cand_mismatch)) {
      // The forced last trial broke the mapping; keep the previous ensemble.
      diag.stop = StopReason::Degenerate;
      break;
    }
    alpha = (accepted && trial == 0) ? a * config.alpha_shrink : a;

    result.theta = std::move(candidate);
    result.output = std::move(cand_out);
    IesIteration rec = make_record(it, result.theta, result.output, obs, problem);
    rec.alpha = a;
    rec.gamma = gamma;
    rec.trials = trial;
    rec.accepted = accepted;
    rec.svd_rank = basis.svd.rank();
    rec.svd_full_rank = basis.svd.full_rank;
    rec.energy_kept = basis.svd.energy_kept;
    rec.energy_next = basis.svd.energy_next;
    if (taper.size() != 0) {
      rec.taper_min = taper.minCoeff();
      rec.taper_max = taper.maxCoeff();
    }
    diag.iterations.push_back(std::move(rec));

    const double previous = mismatch;
    mismatch = cand_mismatch;
    if (mismatch < threshold)
      diag.stop = StopReason::AbsoluteThreshold;
    else if (std::abs(mismatch - previous) < config.relative_tolerance * previous)
      diag.stop = StopReason::RelativeChange;
    else if (it >= config.max_iterations)
      diag.stop = StopReason::MaxIterations;
  }
  diag.final_theta = result.theta;
  return result;
}

ChopCycleResult run_chop_cycle(const Eigen::MatrixXd& background, const ObservationBatch& obs,
                               const ObservationOperator& op, const IesConfig& config, Rng& rng,
                               const std::optional<Eigen::VectorXd>& reference) {
  const EnkfMapping mapping(background, obs, op, config.inflate_members);
  const std::vector<Range> ranges =
      hyper_param_ranges(config.mode, mapping.n_state(), config.bounds);
  Eigen::MatrixXd theta0 =
      latin_hypercube(ranges, static_cast<int>(mapping.members()), rng);

  IesProblem problem;
  problem.predict = [&](const Eigen::MatrixXd& theta) {
    return predict_observations(mapping, theta, config.mode, config.bounds);
  };
  // Every member analysed with the mean hyper-parameters, against its own
  // background and perturbed observation.
  problem.predict_at = [&](const Eigen::VectorXd& theta_mean) {
    HyperParams p = unpack_hyper_params(theta_mean, config.mode);
    clamp_hyper_params(p, config.bounds);
    return Eigen::MatrixXd(op.apply(mapping.analyze(p)));
  };
  if (reference) {
    problem.annotate = [&](IesIteration& rec, const MappingOutput& out) {
      if (!out.states.allFinite()) {
        rec.mean_rmse = rec.spread = std::numeric_limits<double>::quiet_NaN();
        return;
      }
      rec.mean_rmse = mean_member_rmse(out.states, *reference);
      rec.spread = ensemble_spread(out.states);
    };
  }

  IesResult ies = run_ies(std::move(theta0), problem, obs, config, ranges);
  ChopCycleResult out;
  out.analysis = std::move(ies.output.states);
  out.theta = std::move(ies.theta);
  out.diagnostics = std::move(ies.diagnostics);
  bool any_finite = false;
  for (Eigen::Index j = 0; j < out.analysis.cols() && !any_finite; ++j)
    any_finite = out.analysis.col(j).allFinite();
  out.failed = !any_finite;
  return out;
}

}  // namespace chop
