#include "chop/enkf.hpp"

#include "chop/error.hpp"

#include <algorithm>
#include <cmath>

namespace chop {

InflationSpec InflationSpec::single(double delta) {
  InflationSpec spec;
  spec.mode = InflationMode::Single;
  spec.delta = Eigen::VectorXd::Constant(1, delta);
  return spec;
}

InflationSpec InflationSpec::multiple(Eigen::VectorXd delta) {
  InflationSpec spec;
  spec.mode = InflationMode::Multiple;
  spec.delta = std::move(delta);
  return spec;
}

Eigen::VectorXd InflationSpec::factors(Eigen::Index n_state) const {
  if (mode == InflationMode::Single) return Eigen::VectorXd::Constant(n_state, 1.0 + delta(0));
  return delta.array() + 1.0;
}

void InflationSpec::validate(Eigen::Index n_state) const {
  const Eigen::Index expected = mode == InflationMode::Single ? 1 : n_state;
  if (delta.size() != expected)
    throw Error(ErrorCode::InvalidDimension,
                "inflation vector has " + std::to_string(delta.size()) + " entries, expected " +
                    std::to_string(expected));
  if (!delta.allFinite() || (delta.array() < 0.0).any())
    throw Error(ErrorCode::InvalidHyperParameter, "inflation factors must be finite and >= 0");
}

namespace {

void validate(const HyperParams& theta, Eigen::Index n_state) {
  theta.inflation.validate(n_state);
  if (!(theta.length_scale > 0.0) || !std::isfinite(theta.length_scale))
    throw Error(ErrorCode::InvalidHyperParameter, "length scale must be finite and > 0");
}

}  // namespace

bool clamp_hyper_params(HyperParams& theta, const HyperBounds& bounds) {
  bool moved = false;
  for (Eigen::Index i = 0; i < theta.inflation.delta.size(); ++i) {
    const double c = bounds.delta.clamp(theta.inflation.delta(i));
    moved |= c != theta.inflation.delta(i);
    theta.inflation.delta(i) = c;
  }
  const double l = bounds.length_scale.clamp(theta.length_scale);
  moved |= l != theta.length_scale;
  theta.length_scale = l;
  return moved;
}

double ring_distance(Eigen::Index s, Eigen::Index o, Eigen::Index n_state) {
  const double frac = static_cast<double>(s > o ? s - o : o - s) / static_cast<double>(n_state);
  return std::min(frac, 1.0 - frac);
}

LocalizationField taper_matrix(double length_scale, const ObservationOperator& op) {
  if (!(length_scale > 0.0))
    throw Error(ErrorCode::InvalidHyperParameter, "length scale must be > 0");
  LocalizationField field;
  field.length_scale = length_scale;
  field.taper.resize(op.n_state(), op.size());
  for (Eigen::Index t = 0; t < op.size(); ++t)
    for (Eigen::Index s = 0; s < op.n_state(); ++s)
      field.taper(s, t) = gaspari_cohn(ring_distance(s, op.location(t), op.n_state()) / length_scale);
  return field;
}

std::vector<double> taper_by_offset(double length_scale, Eigen::Index n_state) {
  if (!(length_scale > 0.0))
    throw Error(ErrorCode::InvalidHyperParameter, "length scale must be > 0");
  std::vector<double> table(static_cast<std::size_t>(n_state));
  for (Eigen::Index k = 0; k < n_state; ++k)
    table[static_cast<std::size_t>(k)] = gaspari_cohn(ring_distance(k, 0, n_state) / length_scale);
  return table;
}

Eigen::MatrixXd inflate(const Eigen::MatrixXd& ensemble, const InflationSpec& spec) {
  spec.validate(ensemble.rows());
  const Eigen::VectorXd mean = ensemble.rowwise().mean();
  const Eigen::VectorXd f = spec.factors(ensemble.rows());
  return (f.asDiagonal() * (ensemble.colwise() - mean)).colwise() + mean;
}

EnkfMapping::EnkfMapping(const Eigen::MatrixXd& background, const ObservationBatch& obs,
                         const ObservationOperator& op, bool inflate_members)
    : obs_(&obs), op_(&op), inflate_members_(inflate_members) {
  const Eigen::Index ne = background.cols();
  if (ne < 2) throw Error(ErrorCode::DegenerateEnsemble, "EnKF needs at least 2 members");
  if (background.rows() != op.n_state())
    throw Error(ErrorCode::InvalidDimension, "background rows do not match the state dimension");
  if (obs.size() != op.size() || obs.perturbed.rows() != op.size())
    throw Error(ErrorCode::InvalidDimension, "observation batch does not match the operator");
  if (obs.members() != ne)
    throw Error(ErrorCode::InvalidDimension, "one perturbed observation per member is required");

  mean_ = background.rowwise().mean();
  deviations_ = background.colwise() - mean_;
  anomalies_ = deviations_ / std::sqrt(static_cast<double>(ne - 1));
  obs_anomalies_ = op.apply(anomalies_);

  const Eigen::MatrixXd b = obs.whiten(obs_anomalies_);
  gram_.noalias() = b.transpose() * b;
  btw_ = obs.whiten(b).transpose();
}

EnkfMapping::GainFactors EnkfMapping::gain_factors(const HyperParams& theta) const {
  GainFactors g;
  if (theta.inflation.mode == InflationMode::Single) {
    // K = A B^T (B B^T + eps I)^{-1} W = A (B^T B + eps I)^{-1} B^T W, eps = (1+delta)^-2.
    const double f = 1.0 + theta.inflation.delta(0);
    Eigen::MatrixXd m = gram_;
    m.diagonal().array() += 1.0 / (f * f);
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success)
      throw Error(ErrorCode::LinearSolve, "capacitance matrix factorization failed");
    g.z = anomalies_;
    g.q = llt.solve(btw_);
    return g;
  }
  // K = A~ B^T (B B^T + I)^{-1} W with A~ = diag(1+delta) A, B = W H A~.
  const Eigen::VectorXd factors = theta.inflation.factors(n_state());
  const Eigen::MatrixXd b = obs_->whiten(Eigen::MatrixXd(op_->apply(factors).asDiagonal() * obs_anomalies_));
  g.z = factors.asDiagonal() * anomalies_;
  if (b.rows() <= b.cols()) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(b.rows(), b.rows());
    m.selfadjointView<Eigen::Lower>().rankUpdate(b);
    Eigen::LLT<Eigen::MatrixXd> llt(m.selfadjointView<Eigen::Lower>());
    if (llt.info() != Eigen::Success)
      throw Error(ErrorCode::LinearSolve, "innovation covariance factorization failed");
    g.q = obs_->whiten(Eigen::MatrixXd(llt.solve(b))).transpose();
  } else {
    // Push-through: B^T (B B^T + I)^{-1} = (I + B^T B)^{-1} B^T.
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(b.cols(), b.cols());
    m.selfadjointView<Eigen::Lower>().rankUpdate(b.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(m.selfadjointView<Eigen::Lower>());
    if (llt.info() != Eigen::Success)
      throw Error(ErrorCode::LinearSolve, "capacitance matrix factorization failed");
    g.q = llt.solve(obs_->whiten(b).transpose());
  }
  return g;
}

Eigen::VectorXd EnkfMapping::localized_gain_times(const GainFactors& gain,
                                                  const std::vector<double>& taper,
                                                  const Eigen::VectorXd& x) const {
  const Eigen::Index n = n_state();
  const Eigen::Index d = op_->size();
  Eigen::Index reach = 0;
  for (Eigen::Index k = 0; k <= n / 2; ++k)
    if (taper[static_cast<std::size_t>(k)] != 0.0) reach = k;

  Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
  if (4 * reach + 2 >= n) {
    // Wide support: one matrix product is cheaper than many banded ones.
    const Eigen::MatrixXd k = gain.z * gain.q;
    for (Eigen::Index t = 0; t < d; ++t) {
      const double xt = x(t);
      const Eigen::Index o = op_->location(t);
      for (Eigen::Index s = 0; s < n; ++s)
        y(s) += taper[static_cast<std::size_t>(s > o ? s - o : o - s)] * k(s, t) * xt;
    }
    return y;
  }

  Eigen::VectorXd qt(gain.q.rows());
  Eigen::VectorXd band;
  auto add_segment = [&](Eigen::Index lo, Eigen::Index len, Eigen::Index o) {
    band.noalias() = gain.z.middleRows(lo, len) * qt;
    for (Eigen::Index i = 0; i < len; ++i) {
      const Eigen::Index s = lo + i;
      y(s) += taper[static_cast<std::size_t>(s > o ? s - o : o - s)] * band(i);
    }
  };
  for (Eigen::Index t = 0; t < d; ++t) {
    if (x(t) == 0.0) continue;
    qt.noalias() = gain.q.col(t) * x(t);
    const Eigen::Index o = op_->location(t);
    const Eigen::Index lo = o - reach;
    const Eigen::Index hi = o + reach + 1;  // exclusive
    if (lo < 0) {
      add_segment(lo + n, -lo, o);
      add_segment(0, hi, o);
    } else if (hi > n) {
      add_segment(lo, n - lo, o);
      add_segment(0, hi - n, o);
    } else {
      add_segment(lo, hi - lo, o);
    }
  }
  return y;
}

Eigen::VectorXd EnkfMapping::update(const Eigen::VectorXd& inflated, const Eigen::VectorXd& obs,
                                    const HyperParams& theta) const {
  const Eigen::VectorXd innovation = obs - op_->apply(inflated);
  const std::vector<double> taper = taper_by_offset(theta.length_scale, n_state());
  return inflated + localized_gain_times(gain_factors(theta), taper, innovation);
}

Eigen::VectorXd EnkfMapping::analyze_member(Eigen::Index j, const HyperParams& theta) const {
  validate(theta, n_state());
  if (j < 0 || j >= members()) throw Error(ErrorCode::InvalidDimension, "member index out of range");
  const Eigen::VectorXd inflated =
      inflate_members_
          ? Eigen::VectorXd(mean_ + theta.inflation.factors(n_state()).cwiseProduct(deviations_.col(j)))
          : Eigen::VectorXd(mean_ + deviations_.col(j));
  return update(inflated, obs_->perturbed.col(j), theta);
}

Eigen::VectorXd EnkfMapping::analyze_mean(const HyperParams& theta) const {
  validate(theta, n_state());
  return update(mean_, obs_->perturbed.rowwise().mean(), theta);
}

Eigen::MatrixXd EnkfMapping::analyze(const HyperParams& theta) const {
  validate(theta, n_state());
  const Eigen::Index n = n_state();
  const Eigen::VectorXd factors = theta.inflation.factors(n);
  const Eigen::MatrixXd inflated =
      inflate_members_ ? Eigen::MatrixXd((factors.asDiagonal() * deviations_).colwise() + mean_)
                       : Eigen::MatrixXd(deviations_.colwise() + mean_);
  const Eigen::MatrixXd innovations = obs_->perturbed - op_->apply(inflated);

  // Shared theta: build the localized gain once and apply it to all members.
  const GainFactors g = gain_factors(theta);
  Eigen::MatrixXd gain = g.z * g.q;
  const std::vector<double> taper = taper_by_offset(theta.length_scale, n);
  for (Eigen::Index t = 0; t < gain.cols(); ++t) {
    const Eigen::Index o = op_->location(t);
    for (Eigen::Index s = 0; s < n; ++s)
      gain(s, t) *= taper[static_cast<std::size_t>(s > o ? s - o : o - s)];
  }
  return inflated + gain * innovations;
}

Eigen::MatrixXd enkf_analysis(const Eigen::MatrixXd& background, const ObservationBatch& obs,
                              const ObservationOperator& op, const HyperParams& theta) {
  const EnkfMapping mapping(background, obs, op);
  return mapping.analyze(theta);
}

Eigen::MatrixXd enkf_analysis_dense(const Eigen::MatrixXd& background,
                                    const ObservationBatch& obs, const ObservationOperator& op,
                                    const HyperParams& theta) {
  const Eigen::Index ne = background.cols();
  if (ne < 2) throw Error(ErrorCode::DegenerateEnsemble, "EnKF needs at least 2 members");
  validate(theta, background.rows());

  const Eigen::MatrixXd h = op.matrix();
  const Eigen::MatrixXd inflated = inflate(background, theta.inflation);
  const bool single = theta.inflation.mode == InflationMode::Single;

  // Single inflation: C_m of the raw background with C_d / (1 + delta)^2.
  // Multiple inflation: C~_m of the inflated background with C_d.
  const Eigen::MatrixXd& source = single ? background : inflated;
  const Eigen::VectorXd mean = source.rowwise().mean();
  const Eigen::MatrixXd centred = source.colwise() - mean;
  const Eigen::MatrixXd cov = centred * centred.transpose() / static_cast<double>(ne - 1);
  Eigen::MatrixXd obs_cov = obs.error_cov;
  if (single) {
    const double f = 1.0 + theta.inflation.delta(0);
    obs_cov /= f * f;
  }
  const Eigen::MatrixXd cross = cov * h.transpose();
  const Eigen::MatrixXd innov_cov = h * cross + obs_cov;

  Eigen::MatrixXd gain_t;  // gain transposed: S^{-1} H C
  Eigen::LLT<Eigen::MatrixXd> llt(innov_cov);
  if (llt.info() == Eigen::Success) {
    gain_t = llt.solve(cross.transpose());
  } else {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(innov_cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    svd.setThreshold(1e-12);
    gain_t = svd.solve(cross.transpose());
  }
  if (!gain_t.allFinite()) throw Error(ErrorCode::LinearSolve, "gain solve produced non-finite values");

  const Eigen::MatrixXd gain =
      taper_matrix(theta.length_scale, op).taper.cwiseProduct(gain_t.transpose());
  return inflated + gain * (obs.perturbed - h * inflated);
}

}  // namespace chop
