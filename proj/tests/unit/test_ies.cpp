#include "doctest.h"
#include "helpers.hpp"

#include "chop/error.hpp"
#include "chop/ies.hpp"
#include "chop/l96.hpp"
#include "chop/metrics.hpp"

#include <cmath>
#include <vector>

using namespace chop;

namespace {

ObservationBatch unit_batch(const Eigen::VectorXd& target, int ne) {
  return testing::batch(target, target.replicate(1, ne), Eigen::VectorXd::Ones(target.size()));
}

}  // namespace

TEST_CASE("toy update moves each member halfway to the target") {
  Eigen::MatrixXd theta(1, 2);
  theta << 0.0, 2.0;
  const ObservationBatch obs = unit_batch(Eigen::VectorXd::Ones(1), 2);
  const IesStepBasis basis = prepare_ies_step(theta, theta, Eigen::MatrixXd::Ones(1, 1), obs);
  CHECK(basis.svd.rank() == 1);
  CHECK(basis.svd.singular_values(0) == doctest::Approx(std::sqrt(2.0)));
  const Eigen::MatrixXd next = ies_step(basis, 2.0, Eigen::MatrixXd());
  CHECK(next(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(next(0, 1) == doctest::Approx(1.5).epsilon(1e-14));

  // Bounds are applied after the step.
  const std::vector<Range> box{{0.6, 1.4}};
  const Eigen::MatrixXd clamped = ies_step(basis, 2.0, Eigen::MatrixXd(), box);
  CHECK(clamped(0, 0) == 0.6);
  CHECK(clamped(0, 1) == 1.4);
}

TEST_CASE("gamma scales the mean squared kept singular value") {
  TruncatedSvd svd;
  svd.singular_values = Eigen::Vector2d(2.0, 1.0);
  CHECK(gamma_from_alpha(1.0, svd) == doctest::Approx(2.5));
  CHECK(gamma_from_alpha(0.5, svd) == doctest::Approx(1.25));
  svd.singular_values = Eigen::VectorXd::Constant(1, std::sqrt(2.0));
  CHECK(gamma_from_alpha(1.0, svd) == doctest::Approx(2.0));
  CHECK_THROWS_AS(gamma_from_alpha(0.0, svd), Error);
}

TEST_CASE("sensitivity centring accepts one shared column or one per member") {
  Rng rng = make_rng(4, Stream::HyperParams);
  const Eigen::MatrixXd theta = standard_normal(rng, 2, 12);
  const Eigen::MatrixXd predicted = standard_normal(rng, 3, 12);
  const ObservationBatch obs = unit_batch(Eigen::VectorXd::Zero(3), 12);

  const Eigen::MatrixXd per_member = standard_normal(rng, 3, 12);
  const IesStepBasis a = prepare_ies_step(theta, predicted, per_member, obs, 1.0);
  const Eigen::MatrixXd sg = (predicted - per_member) / std::sqrt(11.0);
  CHECK(testing::max_abs_diff(a.svd.u * a.svd.singular_values.asDiagonal() * a.svd.v.transpose(), sg) <= 1e-12);

  const Eigen::VectorXd shared = standard_normal(rng, 3);
  const IesStepBasis b = prepare_ies_step(theta, predicted, shared, obs, 1.0);
  const Eigen::MatrixXd sg2 = (predicted.colwise() - shared) / std::sqrt(11.0);
  CHECK(testing::max_abs_diff(b.svd.u * b.svd.singular_values.asDiagonal() * b.svd.v.transpose(), sg2) <= 1e-12);
  CHECK(testing::max_abs_diff(b.residuals, -predicted) <= 1e-15);

  CHECK_THROWS_AS(prepare_ies_step(theta, predicted, per_member.leftCols(5), obs), Error);
  CHECK_THROWS_AS(prepare_ies_step(Eigen::MatrixXd::Ones(2, 12), predicted, shared, obs), Error);
}

TEST_CASE("correlation taper") {
  Rng rng = make_rng(8, Stream::HyperParams);
  const Eigen::MatrixXd theta = standard_normal(rng, 2, 100);
  Eigen::MatrixXd innov(3, 100);
  innov.row(0) = theta.row(0);                  // rho = 1
  innov.row(1) = -2.0 * theta.row(1);           // rho = -1 against row 1
  innov.row(2).setConstant(4.0);                // no variance: rho = 0
  const CorrelationTaper t = correlation_taper(theta, innov);
  CHECK(t.taper.rows() == 2);
  CHECK(t.taper.cols() == 3);
  CHECK(t.correlation(0, 0) == doctest::Approx(1.0));
  CHECK(t.correlation(1, 1) == doctest::Approx(-1.0));
  CHECK(t.taper(0, 0) == doctest::Approx(1.0));
  CHECK(t.taper(1, 1) == doctest::Approx(1.0));
  CHECK(t.correlation(0, 2) == 0.0);
  // rho = 0, N_e = 100: argument 1 / 0.7.
  CHECK(t.taper(0, 2) == doctest::Approx(gaspari_cohn(1.0 / 0.7)));
  CHECK(t.taper(0, 2) == doctest::Approx(0.0274).epsilon(0.01));
  CHECK(t.taper.minCoeff() >= 0.0);
  CHECK(t.taper.maxCoeff() <= 1.0);

  // Loop oracle for the sample correlation.
  const Eigen::VectorXd x = theta.row(0).transpose();
  const Eigen::VectorXd y = theta.row(1).transpose();
  double sx = 0, sy = 0, sxy = 0;
  for (int j = 0; j < 100; ++j) {
    sx += (x(j) - x.mean()) * (x(j) - x.mean());
    sy += (y(j) - y.mean()) * (y(j) - y.mean());
    sxy += (x(j) - x.mean()) * (y(j) - y.mean());
  }
  CHECK(std::abs(t.correlation(1, 0) - sxy / std::sqrt(sx * sy)) <= 1e-12);

  CHECK_THROWS_AS(correlation_taper(theta.leftCols(9), innov.leftCols(9)), Error);
}

TEST_CASE("hyper-parameter packing") {
  HyperParams p{InflationSpec::multiple(Eigen::Vector3d(0.1, 0.2, 0.3)), 0.4};
  const Eigen::VectorXd v = pack_hyper_params(p);
  CHECK(v.size() == 4);
  CHECK(v(3) == 0.4);
  const HyperParams back = unpack_hyper_params(v, InflationMode::Multiple);
  CHECK(back.inflation.delta == p.inflation.delta);
  CHECK(hyper_param_count(InflationMode::Single, 40) == 2);
  CHECK(hyper_param_count(InflationMode::Multiple, 40) == 41);
  CHECK_THROWS_AS(unpack_hyper_params(v, InflationMode::Single), Error);
  const auto ranges = hyper_param_ranges(InflationMode::Multiple, 3, {});
  CHECK(ranges.size() == 4);
  CHECK(ranges[0].hi == 2.0);
  CHECK(ranges[3].lo == 0.05);
}

TEST_CASE("smoother on a linear problem") {
  // g(theta) = G theta with a full-rank G; the mismatch must fall on every accepted step.
  Eigen::MatrixXd g(3, 2);
  g << 1.0, 0.5, -0.3, 2.0, 0.7, 0.1;
  const Eigen::Vector2d truth(0.4, -0.6);
  const int ne = 20;
  Rng rng = make_rng(12, Stream::Perturbation);
  const Eigen::VectorXd d = g * truth;
  ObservationBatch obs = testing::batch(d, d.replicate(1, ne) + 0.01 * standard_normal(rng, 3, ne),
                                        Eigen::VectorXd::Constant(3, 1e-4));
  IesProblem problem;
  problem.predict = [&](const Eigen::MatrixXd& theta) {
    MappingOutput out;
    out.predicted = g * theta;
    return out;
  };
  problem.predict_at = [&](const Eigen::VectorXd& m) { return Eigen::MatrixXd(g * m); };

  IesConfig config;
  config.localize = true;
  const IesResult r = run_ies(3.0 * standard_normal(rng, 2, ne), problem, obs, config);
  const auto& it = r.diagnostics.iterations;
  CHECK(r.diagnostics.outer_iterations() <= 10);
  CHECK(r.diagnostics.outer_iterations() >= 1);
  for (std::size_t k = 1; k < it.size(); ++k) {
    if (it[k].accepted) CHECK(it[k].mismatch < it[k - 1].mismatch);
    CHECK(it[k].taper_min >= 0.0);
    CHECK(it[k].taper_max <= 1.0);
    CHECK(it[k].energy_kept <= 0.99);
  }
  CHECK(it.back().mismatch < 0.01 * it.front().mismatch);
  CHECK(r.diagnostics.stop != StopReason::None);
}

TEST_CASE("smoother stop rules") {
  Eigen::MatrixXd g = Eigen::MatrixXd::Identity(2, 2);
  const int ne = 12;
  IesProblem problem;
  problem.predict = [&](const Eigen::MatrixXd& theta) { return MappingOutput{g * theta, {}, 0}; };
  problem.predict_at = [&](const Eigen::VectorXd& m) { return Eigen::MatrixXd(g * m); };
  Rng rng = make_rng(2, Stream::HyperParams);
  const Eigen::MatrixXd theta0 = 5.0 + standard_normal(rng, 2, ne).array();
  const ObservationBatch obs = unit_batch(Eigen::VectorXd::Zero(2), ne);

  IesConfig config;
  config.localize = false;
  config.mismatch_factor = 1e9;
  CHECK(run_ies(theta0, problem, obs, config).diagnostics.stop == StopReason::AbsoluteThreshold);
  CHECK(run_ies(theta0, problem, obs, config).diagnostics.outer_iterations() == 0);

  config.mismatch_factor = 0.0;
  config.max_iterations = 2;
  config.relative_tolerance = 0.0;
  const IesResult capped = run_ies(theta0, problem, obs, config);
  CHECK(capped.diagnostics.stop == StopReason::MaxIterations);
  CHECK(capped.diagnostics.outer_iterations() == 2);

  config.max_iterations = 50;
  config.relative_tolerance = 0.5;
  const IesResult rel = run_ies(theta0, problem, obs, config);
  CHECK(rel.diagnostics.stop == StopReason::RelativeChange);
  CHECK(rel.diagnostics.outer_iterations() < 50);

  // alpha shrinks after a first-try acceptance.
  const auto& it = capped.diagnostics.iterations;
  CHECK(it[1].alpha == doctest::Approx(1.0));
  if (it[1].trials == 0) CHECK(it[2].alpha == doctest::Approx(0.9));
}

TEST_CASE("one tuned analysis cycle on the 40-variable ring") {
  l96::ClimatologyOptions opt;
  opt.n_steps = 5000;
  const l96::Climatology clim = l96::simulate_climatology(40, opt);
  const l96::TwinSetup twin = l96::generate_truth_and_background(clim, 100, 4, 30, 21);
  const ObservationOperator op(40, 2);
  Rng noise = make_rng(21, Stream::ObservationNoise);
  const Eigen::VectorXd truth = twin.truth.col(4);
  Eigen::MatrixXd bg = twin.background;
  for (Eigen::Index j = 0; j < bg.cols(); ++j) {
    Eigen::VectorXd x = bg.col(j);
    l96::advance(x, 4, {});
    bg.col(j) = x;
  }
  const ObservationBatch obs = make_observation_batch(observe(op, truth, noise), Eigen::MatrixXd::Identity(20, 20), 30, 5);

  for (InflationMode mode : {InflationMode::Single, InflationMode::Multiple}) {
    IesConfig config;
    config.mode = mode;
    config.mismatch_factor = 0.0;  // force iterations
    Rng rng = make_rng(21, Stream::HyperParams);
    const ChopCycleResult r = run_chop_cycle(bg, obs, op, config, rng, truth);
    CHECK_FALSE(r.failed);
    CHECK(r.analysis.rows() == 40);
    CHECK(r.analysis.cols() == 30);
    CHECK(r.theta.rows() == hyper_param_count(mode, 40));
    const auto& it = r.diagnostics.iterations;
    CHECK(r.diagnostics.outer_iterations() <= 10);
    CHECK(ensemble_spread(r.theta) > 0.0);
    CHECK(r.theta.row(r.theta.rows() - 1).minCoeff() >= 0.05);
    CHECK(r.theta.topRows(r.theta.rows() - 1).maxCoeff() <= 2.0);
    for (std::size_t k = 1; k < it.size(); ++k) {
      if (it[k].accepted) CHECK(it[k].mismatch < it[k - 1].mismatch);
      CHECK(it[k].taper_min >= 0.0);
      CHECK(it[k].taper_max <= 1.0);
      CHECK(it[k].energy_kept <= 0.99 + 1e-12);
      CHECK((it[k].svd_rank == it[k].svd_full_rank || it[k].energy_next > 0.99));
      CHECK(std::isfinite(it[k].mean_rmse));
    }

    // The reported analysis is the mapping at the final hyper-parameters.
    const EnkfMapping mapping(bg, obs, op);
    const HyperParams p = unpack_hyper_params(r.theta.col(3), mode);
    CHECK(testing::max_abs_diff(mapping.analyze_member(3, p), r.analysis.col(3)) <= 1e-10);
  }
}
