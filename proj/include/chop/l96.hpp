#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>

namespace chop {
class GaussianSampler;
}

namespace chop::l96 {

struct ModelParams {
  double dt = 0.05;
  double forcing = 8.0;
};

/// Long-run temporal statistics of the free-running model.
struct Climatology {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;

  Eigen::Index dimension() const { return mean.size(); }
};

struct ClimatologyOptions {
  int n_steps = 100000;
  ModelParams model;
  int burn_in = 0;
  std::uint64_t seed = 0;
};

/// dx_e/dt = (x_{e+1} - x_{e-2}) x_{e-1} - x_e + F on a periodic ring.
Eigen::VectorXd tendency(const Eigen::VectorXd& state, double forcing);
void tendency(const Eigen::VectorXd& state, double forcing, Eigen::VectorXd& out);

/// One classical fourth-order Runge-Kutta step.  Throws IntegrationOverflow on
/// a non-finite result.
Eigen::VectorXd rk4_step(const Eigen::VectorXd& state, double dt, double forcing);

/// Advances `state` in place by `steps` RK4 steps.  Returns false (leaving the
/// state partially advanced) as soon as a non-finite value shows up.
bool try_advance(Eigen::VectorXd& state, int steps, const ModelParams& params);

/// Like try_advance, but throws IntegrationOverflow on divergence.
void advance(Eigen::VectorXd& state, int steps, const ModelParams& params);

/// Initial condition of the climatology run: F everywhere, +0.01 on the first
/// component.  A nonzero seed adds a further N(0, 1e-6) jitter.
Eigen::VectorXd climatology_start(int n_state, const ClimatologyOptions& options);

/// Temporal mean and covariance of every state visited over n_steps steps.
Climatology simulate_climatology(int n_state, const ClimatologyOptions& options);

/// Reference run and initial background ensemble of a twin experiment.
struct TwinSetup {
  Eigen::MatrixXd truth;       ///< n_state x (window_steps + 1); column k is step k
  Eigen::MatrixXd background;  ///< n_state x n_members
};

TwinSetup generate_truth_and_background(const Climatology& clim, int transition_steps,
                                        int window_steps, int n_members, std::uint64_t seed,
                                        const ModelParams& params = {});

/// Same as above with a pre-factorized sampler of N(mean, covariance).
TwinSetup generate_truth_and_background(const GaussianSampler& sampler, int transition_steps,
                                        int window_steps, int n_members, std::uint64_t seed,
                                        const ModelParams& params = {});

// Climatology persistence: a small binary file holding the dimension, the mean
// and the row-major covariance.
void save_climatology(const Climatology& clim, const std::filesystem::path& path);
Climatology load_climatology(const std::filesystem::path& path);

/// File name used for caching, derived from every input that affects the run.
std::string climatology_cache_name(int n_state, const ClimatologyOptions& options);

/// Loads the cached climatology from `dir` or computes and stores it.  An empty
/// `dir` disables the cache.
Climatology cached_climatology(int n_state, const ClimatologyOptions& options,
                               const std::filesystem::path& dir);

}  // namespace chop::l96
