#include "chop/observation.hpp"

#include "chop/ensemble.hpp"
#include "chop/error.hpp"
#include "chop/random.hpp"

namespace chop {

ObservationOperator::ObservationOperator(int n_state, int stride)
    : n_state_(n_state), stride_(stride) {
  if (n_state < 1) throw Error(ErrorCode::InvalidDimension, "state dimension must be positive");
  if (stride < 1 || stride > n_state)
    throw Error(ErrorCode::InvalidConfig,
                "observation stride must lie in [1, n_state], got " + std::to_string(stride));
  for (int i = 0; i < n_state; i += stride) indices_.push_back(i);
}

Eigen::VectorXd ObservationOperator::apply(const Eigen::VectorXd& state) const {
  if (state.size() != n_state_)
    throw Error(ErrorCode::InvalidDimension, "state length does not match observation operator");
  return state(indices_);
}

Eigen::MatrixXd ObservationOperator::apply(const Eigen::MatrixXd& states) const {
  if (states.rows() != n_state_)
    throw Error(ErrorCode::InvalidDimension, "state length does not match observation operator");
  return states(indices_, Eigen::all);
}

Eigen::MatrixXd ObservationOperator::matrix() const {
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(size(), n_state_);
  for (Eigen::Index t = 0; t < size(); ++t) h(t, location(t)) = 1.0;
  return h;
}

Eigen::VectorXd ObservationBatch::whiten(const Eigen::VectorXd& x) const {
  if (diagonal) return error_inv_sqrt.diagonal().cwiseProduct(x);
  return error_inv_sqrt * x;
}

Eigen::MatrixXd ObservationBatch::whiten(const Eigen::MatrixXd& x) const {
  if (diagonal) return error_inv_sqrt.diagonal().asDiagonal() * x;
  return error_inv_sqrt * x;
}

Eigen::VectorXd observe(const ObservationOperator& op, const Eigen::VectorXd& state, Rng& rng,
                        double noise_std) {
  Eigen::VectorXd d = op.apply(state);
  if (noise_std != 0.0) d += noise_std * standard_normal(rng, d.size());
  return d;
}

Eigen::VectorXd observe(const ObservationOperator& op, const Eigen::VectorXd& state,
                        std::uint64_t noise_seed, double noise_std) {
  Rng rng = make_rng(noise_seed, Stream::ObservationNoise);
  return observe(op, state, rng, noise_std);
}

Eigen::MatrixXd perturb_observations(const Eigen::VectorXd& observed,
                                     const Eigen::MatrixXd& error_cov, int n_members,
                                     Rng& rng) {
  if (error_cov.rows() != observed.size() || error_cov.cols() != observed.size())
    throw Error(ErrorCode::InvalidDimension, "error covariance does not match observation");
  if (n_members < 1) throw Error(ErrorCode::InvalidConfig, "ensemble size must be positive");
  const Eigen::MatrixXd root = psd_sqrt(error_cov);
  const Eigen::MatrixXd eta = root * standard_normal(rng, observed.size(), n_members);
  return eta.colwise() + observed;
}

Eigen::MatrixXd perturb_observations(const Eigen::VectorXd& observed,
                                     const Eigen::MatrixXd& error_cov, int n_members,
                                     std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::Perturbation);
  return perturb_observations(observed, error_cov, n_members, rng);
}

ObservationBatch make_observation_batch(Eigen::VectorXd observed, Eigen::MatrixXd error_cov,
                                        int n_members, Rng& rng) {
  ObservationBatch batch;
  batch.perturbed = perturb_observations(observed, error_cov, n_members, rng);
  batch.error_inv_sqrt = spd_inverse_sqrt(error_cov);
  batch.diagonal = error_cov.isDiagonal(0.0);
  batch.observed = std::move(observed);
  batch.error_cov = std::move(error_cov);
  return batch;
}

ObservationBatch make_observation_batch(Eigen::VectorXd observed, Eigen::MatrixXd error_cov,
                                        int n_members, std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::Perturbation);
  return make_observation_batch(std::move(observed), std::move(error_cov), n_members, rng);
}

}  // namespace chop
