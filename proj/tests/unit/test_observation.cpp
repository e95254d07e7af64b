#include "doctest.h"
#include "helpers.hpp"

#include "chop/error.hpp"
#include "chop/observation.hpp"

using namespace chop;

TEST_CASE("operator observes every stride-th component from the first") {
  const ObservationOperator op(40, 4);
  CHECK(op.size() == 10);
  CHECK(op.location(0) == 0);
  CHECK(op.location(9) == 36);
  const ObservationOperator odd(10, 3);
  CHECK(odd.size() == 4);
  CHECK(odd.location(3) == 9);

  const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(10, 0.0, 9.0);
  const Eigen::VectorXd y = odd.apply(x);
  CHECK(y(0) == 0.0);
  CHECK(y(1) == 3.0);
  CHECK(y(3) == 9.0);
  CHECK(testing::max_abs_diff(odd.matrix() * x, y) == 0.0);

  Eigen::MatrixXd xs(10, 2);
  xs << x, 2.0 * x;
  CHECK(testing::max_abs_diff(odd.apply(xs), odd.matrix() * xs) == 0.0);

  CHECK_THROWS_AS(ObservationOperator(10, 0), Error);
  CHECK_THROWS_AS(ObservationOperator(10, 11), Error);
  CHECK_THROWS_AS(odd.apply(Eigen::VectorXd(Eigen::VectorXd::Zero(9))), Error);
}

TEST_CASE("observation noise has the requested scale") {
  const ObservationOperator op(2000, 1);
  const Eigen::VectorXd truth = Eigen::VectorXd::Constant(2000, 3.0);
  const Eigen::VectorXd y = observe(op, truth, 9, 1.0);
  const Eigen::VectorXd e = y - truth;
  CHECK(std::abs(e.mean()) < 0.08);
  CHECK(std::abs(e.squaredNorm() / 2000.0 - 1.0) < 0.1);
  CHECK(observe(op, truth, 9, 1.0) == y);
  CHECK(testing::max_abs_diff(observe(op, truth, 9, 0.0), truth) == 0.0);
}

TEST_CASE("perturbed observations") {
  Eigen::VectorXd d(3);
  d << 1.0, -1.0, 2.0;
  const Eigen::MatrixXd copies = perturb_observations(d, Eigen::MatrixXd::Zero(3, 3), 4, 1);
  for (int j = 0; j < 4; ++j) CHECK(copies.col(j) == d);

  Eigen::MatrixXd cov(2, 2);
  cov << 1.0, 0.5, 0.5, 2.0;
  const Eigen::MatrixXd p = perturb_observations(Eigen::VectorXd::Zero(2), cov, 50000, 2);
  const Eigen::MatrixXd sample = p * p.transpose() / 50000.0;
  CHECK(testing::max_abs_diff(sample, cov) < 0.05);
}

TEST_CASE("batch whitening") {
  Eigen::MatrixXd cov(2, 2);
  cov << 4.0, 0.0, 0.0, 0.25;
  const ObservationBatch b = make_observation_batch(Eigen::Vector2d(1.0, 2.0), cov, 5, 3);
  CHECK(b.diagonal);
  CHECK(b.members() == 5);
  const Eigen::VectorXd w = b.whiten(Eigen::VectorXd(Eigen::Vector2d(2.0, 1.0)));
  CHECK(w(0) == doctest::Approx(1.0));
  CHECK(w(1) == doctest::Approx(2.0));

  Eigen::MatrixXd full(2, 2);
  full << 2.0, 0.5, 0.5, 1.0;
  const ObservationBatch f = make_observation_batch(Eigen::Vector2d(0.0, 0.0), full, 3, 3);
  CHECK_FALSE(f.diagonal);
  const Eigen::MatrixXd m = f.whiten(Eigen::MatrixXd(full));
  // W C W = I for W = C^{-1/2}.
  CHECK(testing::max_abs_diff(f.whiten(Eigen::MatrixXd(m.transpose())), Eigen::MatrixXd::Identity(2, 2)) <= 1e-12);
}
