#include "doctest.h"
#include "helpers.hpp"
#include "common/oracles.hpp"

#include "chop/enkf.hpp"
#include "chop/error.hpp"

#include <cmath>

using namespace chop;

namespace {

struct Problem {
  Eigen::MatrixXd bg;
  ObservationBatch obs;
  ObservationOperator op;
};

Problem make_problem(int n, int stride, int ne, std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::Background);
  Problem p{standard_normal(rng, n, ne) * 2.0, {}, ObservationOperator(n, stride)};
  const Eigen::Index d = p.op.size();
  Eigen::VectorXd var = Eigen::VectorXd::LinSpaced(d, 0.5, 1.5);
  const Eigen::VectorXd observed = standard_normal(rng, d);
  p.obs = testing::batch(observed, observed.replicate(1, ne) + standard_normal(rng, d, ne), var);
  return p;
}

HyperParams single(double delta, double lambda) { return {InflationSpec::single(delta), lambda}; }

}  // namespace

TEST_CASE("scalar analysis of a two-member ensemble") {
  Eigen::MatrixXd bg(1, 2);
  bg << 0.0, 2.0;
  const ObservationOperator op(1, 1);
  const ObservationBatch obs = testing::batch(Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Ones(1, 2),
                                              Eigen::VectorXd::Ones(1));
  const Eigen::MatrixXd a = enkf_analysis(bg, obs, op, single(0.0, 1.0));
  CHECK(a(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(a(0, 1) == doctest::Approx(4.0 / 3.0).epsilon(1e-14));
  const Eigen::MatrixXd b = enkf_analysis_dense(bg, obs, op, single(0.0, 1.0));
  CHECK(testing::max_abs_diff(a, b) <= 1e-14);
}

TEST_CASE("analysis matches the dense Kalman oracle on small rings") {
  for (int n : {1, 3, 4, 5}) {
    for (int stride : {1, 2}) {
      if (stride > n) continue;
      const Problem p = make_problem(n, stride, 6, 100 + n * 10 + stride);
      for (double lambda : {0.3, 1.0}) {
        for (double delta : {0.0, 0.25, 1.5}) {
          const Eigen::VectorXd dv = Eigen::VectorXd::Constant(1, delta);
          const Eigen::MatrixXd ref = oracle::kalman_update(p.bg, p.obs.perturbed, p.obs.error_cov, stride, dv, lambda, true);
          CHECK(testing::max_abs_diff(enkf_analysis(p.bg, p.obs, p.op, single(delta, lambda)), ref) <= 1e-8);
          CHECK(testing::max_abs_diff(enkf_analysis_dense(p.bg, p.obs, p.op, single(delta, lambda)), ref) <= 1e-8);

          const EnkfMapping m(p.bg, p.obs, p.op);
          for (int j = 0; j < 6; ++j)
            CHECK(testing::max_abs_diff(m.analyze_member(j, single(delta, lambda)), ref.col(j)) <= 1e-8);

          const EnkfMapping raw(p.bg, p.obs, p.op, false);
          const Eigen::MatrixXd ref_raw =
              oracle::kalman_update(p.bg, p.obs.perturbed, p.obs.error_cov, stride, dv, lambda, false);
          CHECK(testing::max_abs_diff(raw.analyze(single(delta, lambda)), ref_raw) <= 1e-8);
          CHECK(testing::max_abs_diff(raw.analyze_member(2, single(delta, lambda)), ref_raw.col(2)) <= 1e-8);
        }
        Eigen::VectorXd dv = Eigen::VectorXd::LinSpaced(n, 0.1, 1.2);
        const HyperParams mif{InflationSpec::multiple(dv), lambda};
        const Eigen::MatrixXd ref = oracle::kalman_update(p.bg, p.obs.perturbed, p.obs.error_cov, stride, dv, lambda, true);
        CHECK(testing::max_abs_diff(enkf_analysis(p.bg, p.obs, p.op, mif), ref) <= 1e-8);
        CHECK(testing::max_abs_diff(enkf_analysis_dense(p.bg, p.obs, p.op, mif), ref) <= 1e-8);
        CHECK(testing::max_abs_diff(EnkfMapping(p.bg, p.obs, p.op).analyze_member(1, mif), ref.col(1)) <= 1e-8);
      }
    }
  }
}

TEST_CASE("single and multiple inflation agree for a uniform factor") {
  const Problem p = make_problem(12, 3, 10, 5);
  const EnkfMapping m(p.bg, p.obs, p.op);
  for (double delta : {0.0, 0.3, 2.0}) {
    const HyperParams s = single(delta, 0.4);
    const HyperParams mi{InflationSpec::multiple(Eigen::VectorXd::Constant(12, delta)), 0.4};
    CHECK(testing::max_abs_diff(m.analyze(s), m.analyze(mi)) <= 1e-10);
    CHECK(testing::max_abs_diff(m.analyze_member(4, s), m.analyze_member(4, mi)) <= 1e-10);
  }
}

TEST_CASE("banded and wide gain paths match the dense form at n = 40") {
  const Problem p = make_problem(40, 2, 30, 9);
  const EnkfMapping m(p.bg, p.obs, p.op);
  for (double lambda : {0.05, 0.2, 1.0}) {
    const HyperParams theta = single(0.3, lambda);
    const Eigen::MatrixXd dense = enkf_analysis_dense(p.bg, p.obs, p.op, theta);
    CHECK(testing::max_abs_diff(m.analyze(theta), dense) <= 1e-10);
    for (int j : {0, 13, 29}) CHECK(testing::max_abs_diff(m.analyze_member(j, theta), dense.col(j)) <= 1e-10);
    CHECK(testing::max_abs_diff(m.analyze_mean(theta), dense.rowwise().mean()) <= 1e-10);
  }
}

TEST_CASE("localization taper") {
  const ObservationOperator op(40, 4);
  const LocalizationField f = taper_matrix(0.1, op);
  CHECK(f.taper.rows() == 40);
  CHECK(f.taper.cols() == 10);
  CHECK(f.taper(0, 0) == 1.0);
  CHECK(f.taper(4, 0) > 0.0);          // distance 0.1 = lambda
  CHECK(f.taper(8, 0) == doctest::Approx(0.0));  // distance 0.2 = 2 lambda
  CHECK(f.taper(39, 0) == doctest::Approx(f.taper(1, 0)).epsilon(1e-14));
  CHECK(ring_distance(0, 30, 40) == doctest::Approx(0.25));
  const std::vector<double> t = taper_by_offset(0.1, 40);
  for (int s = 0; s < 40; ++s) CHECK(t[static_cast<std::size_t>(s)] == f.taper(s, 0));
  CHECK_THROWS_AS(taper_matrix(0.0, op), Error);
}

TEST_CASE("inflation") {
  Eigen::MatrixXd e(2, 3);
  e << 1.0, 2.0, 3.0, 0.0, 0.0, 3.0;
  const Eigen::MatrixXd a = inflate(e, InflationSpec::single(1.0));
  CHECK(a(0, 0) == doctest::Approx(0.0));
  CHECK(a(0, 2) == doctest::Approx(4.0));
  const Eigen::MatrixXd b = inflate(e, InflationSpec::multiple(Eigen::Vector2d(0.0, 1.0)));
  CHECK(b.row(0) == e.row(0));
  CHECK(b(1, 2) == doctest::Approx(5.0));
  CHECK_THROWS_AS(inflate(e, InflationSpec::single(-0.1)), Error);
  CHECK_THROWS_AS(inflate(e, InflationSpec::multiple(Eigen::Vector3d(0, 0, 0))), Error);
}

TEST_CASE("hyper-parameter clamping") {
  HyperParams theta = single(2.5, 0.01);
  CHECK(clamp_hyper_params(theta, {}));
  CHECK(theta.inflation.delta(0) == 2.0);
  CHECK(theta.length_scale == 0.05);
  CHECK_FALSE(clamp_hyper_params(theta, {}));
}

TEST_CASE("mapping rejects mismatched inputs") {
  const Problem p = make_problem(6, 2, 5, 1);
  CHECK_THROWS_AS(EnkfMapping(p.bg.leftCols(1), p.obs, p.op), Error);
  CHECK_THROWS_AS(EnkfMapping(p.bg.leftCols(4), p.obs, p.op), Error);
  CHECK_THROWS_AS(EnkfMapping(p.bg, p.obs, ObservationOperator(6, 1)), Error);
  const EnkfMapping m(p.bg, p.obs, p.op);
  CHECK_THROWS_AS(m.analyze(single(0.1, 0.0)), Error);
  CHECK_THROWS_AS(m.analyze_member(5, single(0.1, 0.5)), Error);
}
