#include "chop/l96.hpp"

#include "chop/ensemble.hpp"
#include "chop/error.hpp"
#include "chop/random.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace chop::l96 {

namespace {

void check_dimension(Eigen::Index n) {
  if (n < 4)
    throw Error(ErrorCode::InvalidDimension,
                "Lorenz-96 needs at least 4 components, got " + std::to_string(n));
}

constexpr std::uint32_t kClimatologyMagic = 0x4c393643;  // "L96C"

}  // namespace

void tendency(const Eigen::VectorXd& x, double forcing, Eigen::VectorXd& out) {
  const Eigen::Index n = x.size();
  check_dimension(n);
  out.resize(n);
  // Ring boundaries handled explicitly; the interior loop has no modulo.
  out(0) = (x(1) - x(n - 2)) * x(n - 1) - x(0) + forcing;
  out(1) = (x(2) - x(n - 1)) * x(0) - x(1) + forcing;
  for (Eigen::Index e = 2; e < n - 1; ++e)
    out(e) = (x(e + 1) - x(e - 2)) * x(e - 1) - x(e) + forcing;
  out(n - 1) = (x(0) - x(n - 3)) * x(n - 2) - x(n - 1) + forcing;
}

Eigen::VectorXd tendency(const Eigen::VectorXd& state, double forcing) {
  Eigen::VectorXd out;
  tendency(state, forcing, out);
  return out;
}

namespace {

// Scratch buffers reused across steps of one trajectory.
struct Rk4Workspace {
  Eigen::VectorXd k1, k2, k3, k4, tmp;
};

void rk4_inplace(Eigen::VectorXd& x, double dt, double forcing, Rk4Workspace& ws) {
  tendency(x, forcing, ws.k1);
  ws.tmp = x + 0.5 * dt * ws.k1;
  tendency(ws.tmp, forcing, ws.k2);
  ws.tmp = x + 0.5 * dt * ws.k2;
  tendency(ws.tmp, forcing, ws.k3);
  ws.tmp = x + dt * ws.k3;
  tendency(ws.tmp, forcing, ws.k4);
  x += (dt / 6.0) * (ws.k1 + 2.0 * ws.k2 + 2.0 * ws.k3 + ws.k4);
}

}  // namespace

Eigen::VectorXd rk4_step(const Eigen::VectorXd& state, double dt, double forcing) {
  if (!(dt > 0.0)) throw Error(ErrorCode::InvalidConfig, "integration step must be positive");
  Eigen::VectorXd x = state;
  Rk4Workspace ws;
  rk4_inplace(x, dt, forcing, ws);
  if (!x.allFinite()) throw Error(ErrorCode::IntegrationOverflow, "non-finite RK4 result");
  return x;
}

bool try_advance(Eigen::VectorXd& state, int steps, const ModelParams& params) {
  if (!(params.dt > 0.0)) throw Error(ErrorCode::InvalidConfig, "integration step must be positive");
  Rk4Workspace ws;
  for (int k = 0; k < steps; ++k) {
    rk4_inplace(state, params.dt, params.forcing, ws);
    if (!state.allFinite()) return false;
  }
  return true;
}

void advance(Eigen::VectorXd& state, int steps, const ModelParams& params) {
  if (!try_advance(state, steps, params))
    throw Error(ErrorCode::IntegrationOverflow, "trajectory diverged");
}

Eigen::VectorXd climatology_start(int n_state, const ClimatologyOptions& options) {
  check_dimension(n_state);
  Eigen::VectorXd x = Eigen::VectorXd::Constant(n_state, options.model.forcing);
  x(0) += 0.01;
  if (options.seed != 0) {
    Rng rng = make_rng(options.seed, Stream::Climatology);
    x += 1e-3 * standard_normal(rng, n_state);
  }
  return x;
}

Climatology simulate_climatology(int n_state, const ClimatologyOptions& options) {
  check_dimension(n_state);
  if (options.n_steps < 2) throw Error(ErrorCode::InvalidConfig, "climatology needs >= 2 steps");
  if (options.burn_in < 0) throw Error(ErrorCode::InvalidConfig, "negative burn-in");

  Eigen::VectorXd x = climatology_start(n_state, options);
  advance(x, options.burn_in, options.model);

  // Samples are accumulated in blocks relative to a fixed shift (the forcing)
  // so the scatter matrix can use rank-k updates without large cancellation.
  constexpr Eigen::Index kBlock = 256;
  const double shift = options.model.forcing;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(n_state);
  Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(n_state, n_state);
  Eigen::MatrixXd block(n_state, kBlock);
  Eigen::Index filled = 0;
  Rk4Workspace ws;

  auto flush = [&]() {
    if (filled == 0) return;
    auto used = block.leftCols(filled);
    sum += used.rowwise().sum();
    scatter.selfadjointView<Eigen::Lower>().rankUpdate(used);
    filled = 0;
  };

  for (int step = 0; step < options.n_steps; ++step) {
    rk4_inplace(x, options.model.dt, options.model.forcing, ws);
    if (!x.allFinite())
      throw Error(ErrorCode::IntegrationOverflow,
                  "climatology run diverged at step " + std::to_string(step));
    block.col(filled++) = x.array() - shift;
    if (filled == kBlock) flush();
  }
  flush();

  const double n = static_cast<double>(options.n_steps);
  const Eigen::VectorXd centred_mean = sum / n;
  Climatology clim;
  clim.mean = centred_mean.array() + shift;
  Eigen::MatrixXd cov = scatter.selfadjointView<Eigen::Lower>();
  cov.noalias() -= n * centred_mean * centred_mean.transpose();
  cov /= (n - 1.0);
  // Mirror the lower triangle so the result is exactly symmetric.
  clim.covariance = cov.selfadjointView<Eigen::Lower>();
  return clim;
}

TwinSetup generate_truth_and_background(const GaussianSampler& sampler, int transition_steps,
                                        int window_steps, int n_members, std::uint64_t seed,
                                        const ModelParams& params) {
  if (transition_steps <= 0 || window_steps <= 0)
    throw Error(ErrorCode::InvalidConfig, "transition and window lengths must be positive");
  if (n_members < 1) throw Error(ErrorCode::InvalidConfig, "ensemble size must be positive");

  const Eigen::Index n = sampler.dimension();
  check_dimension(n);
  TwinSetup setup;

  Rng truth_rng = make_rng(seed, Stream::Truth);
  Eigen::VectorXd x = sampler.draw(truth_rng);
  advance(x, transition_steps, params);

  setup.truth.resize(n, window_steps + 1);
  setup.truth.col(0) = x;
  Rk4Workspace ws;
  for (int k = 1; k <= window_steps; ++k) {
    rk4_inplace(x, params.dt, params.forcing, ws);
    if (!x.allFinite()) throw Error(ErrorCode::IntegrationOverflow, "reference run diverged");
    setup.truth.col(k) = x;
  }

  Rng ens_rng = make_rng(seed, Stream::Background);
  setup.background = sampler.draw(ens_rng, n_members);
  return setup;
}

TwinSetup generate_truth_and_background(const Climatology& clim, int transition_steps,
                                        int window_steps, int n_members, std::uint64_t seed,
                                        const ModelParams& params) {
  const GaussianSampler sampler(clim.mean, clim.covariance);
  return generate_truth_and_background(sampler, transition_steps, window_steps, n_members, seed,
                                       params);
}

void save_climatology(const Climatology& clim, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  const std::uint32_t magic = kClimatologyMagic;
  const std::uint64_t n = static_cast<std::uint64_t>(clim.mean.size());
  out.write(reinterpret_cast<const char*>(&magic), sizeof magic);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(clim.mean.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows =
      clim.covariance;
  out.write(reinterpret_cast<const char*>(rows.data()),
            static_cast<std::streamsize>(n * n * sizeof(double)));
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

Climatology load_climatology(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::uint32_t magic = 0;
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&magic), sizeof magic);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || magic != kClimatologyMagic || n == 0 || n > (1u << 20))
    throw Error(ErrorCode::Io, "not a climatology file: " + path.string());
  Climatology clim;
  clim.mean.resize(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(clim.mean.data()), static_cast<std::streamsize>(n * sizeof(double)));
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows(n, n);
  in.read(reinterpret_cast<char*>(rows.data()), static_cast<std::streamsize>(n * n * sizeof(double)));
  if (!in) throw Error(ErrorCode::Io, "truncated climatology file: " + path.string());
  clim.covariance = rows;
  return clim;
}

std::string climatology_cache_name(int n_state, const ClimatologyOptions& options) {
  std::ostringstream name;
  name.precision(17);
  name << "clim_n" << n_state << "_F" << options.model.forcing << "_dt" << options.model.dt
       << "_steps" << options.n_steps << "_burn" << options.burn_in << "_seed" << options.seed
       << ".bin";
  return name.str();
}

Climatology cached_climatology(int n_state, const ClimatologyOptions& options,
                               const std::filesystem::path& dir) {
  if (dir.empty()) return simulate_climatology(n_state, options);
  const auto path = dir / climatology_cache_name(n_state, options);
  if (std::filesystem::exists(path)) {
    Climatology clim = load_climatology(path);
    if (clim.dimension() == n_state) return clim;
  }
  Climatology clim = simulate_climatology(n_state, options);
  std::filesystem::create_directories(dir);
  // Write to a temporary name first so concurrent readers never see a
  // partial file.
  auto tmp = path;
  tmp += ".tmp";
  save_climatology(clim, tmp);
  std::filesystem::rename(tmp, path);
  return clim;
}

}  // namespace chop::l96
