#include "chop/experiment.hpp"

#include "chop/error.hpp"
#include "chop/observation.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace chop {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value) {
  throw Error(ErrorCode::InvalidConfig,
              "bad value '" + std::string(value) + "' for key '" + std::string(key) + "'");
}

double parse_double(std::string_view key, std::string_view text) {
  text = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) bad_value(key, text);
  return v;
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view text) {
  text = trim(text);
  Int v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) bad_value(key, text);
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  text = trim(text);
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  bad_value(key, text);
}

bool same(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

}  // namespace

std::string_view to_string(Method method) {
  switch (method) {
    case Method::Fixed: return "fixed";
    case Method::Grid: return "grid";
    case Method::ChopSif: return "chop-sif";
    case Method::ChopMif: return "chop-mif";
  }
  return "unknown";
}

Method parse_method(std::string_view text) {
  text = trim(text);
  if (text == "fixed") return Method::Fixed;
  if (text == "grid") return Method::Grid;
  if (text == "chop-sif") return Method::ChopSif;
  if (text == "chop-mif") return Method::ChopMif;
  bad_value("method", text);
}

std::string_view to_string(RmseAverage average) {
  return average == RmseAverage::AllSteps ? "all-steps" : "analysis";
}

RmseAverage parse_rmse_average(std::string_view text) {
  text = trim(text);
  if (text == "all-steps") return RmseAverage::AllSteps;
  if (text == "analysis") return RmseAverage::AnalysisOnly;
  bad_value("rmse_average", text);
}

std::vector<double> GridSpec::values() const {
  if (!(step > 0.0) || hi < lo) throw Error(ErrorCode::InvalidConfig, "bad grid " + str());
  const auto n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    // Round away the accumulated binary error so 0.1 * 3 prints as 0.3.
    out.push_back(std::round((lo + k * step) * 1e10) / 1e10);
  }
  return out;
}

std::string GridSpec::str() const {
  std::ostringstream os;
  os << lo << ':' << step << ':' << hi;
  return os.str();
}

GridSpec GridSpec::parse(std::string_view text) {
  text = trim(text);
  const auto c1 = text.find(':');
  if (c1 == std::string_view::npos) {
    const double v = parse_double("grid", text);
    return GridSpec{v, 1.0, v};
  }
  const auto c2 = text.find(':', c1 + 1);
  if (c2 == std::string_view::npos) bad_value("grid", text);
  GridSpec g{parse_double("grid", text.substr(0, c1)),
             parse_double("grid", text.substr(c1 + 1, c2 - c1 - 1)),
             parse_double("grid", text.substr(c2 + 1))};
  if (!(g.step > 0.0) || g.hi < g.lo) bad_value("grid", text);
  return g;
}

int ScenarioConfig::window_steps() const {
  return static_cast<int>(std::lround(window_units / model.dt));
}

int ScenarioConfig::transition_steps() const {
  return static_cast<int>(std::lround(transition_units / model.dt));
}

std::vector<int> ScenarioConfig::analysis_steps() const {
  std::vector<int> steps;
  for (int s = assimilate_at_t0 ? 0 : obs_interval; s <= window_steps(); s += obs_interval)
    steps.push_back(s);
  return steps;
}

IesConfig ScenarioConfig::ies_config() const {
  IesConfig c;
  c.mode = method == Method::ChopMif ? InflationMode::Multiple : InflationMode::Single;
  c.bounds = bounds;
  c.max_iterations = max_iterations;
  c.max_trials = max_trials;
  c.relative_tolerance = relative_tolerance;
  c.mismatch_factor = mismatch_factor;
  c.localize = localize;
  c.inflate_members = chop_inflate_members;
  return c;
}

l96::ClimatologyOptions ScenarioConfig::climatology_options() const {
  l96::ClimatologyOptions o;
  o.n_steps = climatology_steps;
  o.model = model;
  o.burn_in = climatology_burn_in;
  o.seed = climatology_seed;
  return o;
}

void ScenarioConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); };
  if (n_state < 4) fail("n_state must be at least 4");
  if (ensemble_size < 2) fail("ensemble_size must be at least 2");
  if (obs_stride < 1 || obs_stride > n_state) fail("obs_stride must lie in [1, n_state]");
  if (obs_interval < 1) fail("obs_interval must be positive");
  if (!(model.dt > 0.0)) fail("dt must be positive");
  for (auto [key, units] : {std::pair{"window_units", window_units},
                            std::pair{"transition_units", transition_units}}) {
    const double steps = units / model.dt;
    if (!(units > 0.0) || std::abs(steps - std::round(steps)) > 1e-9 * std::max(1.0, steps))
      fail(std::string(key) + " must be a positive multiple of dt");
  }
  if (analysis_steps().empty()) fail("window shorter than one observation interval");
  if (repetitions < 1) fail("repetitions must be positive");
  if (!(obs_noise_std > 0.0)) fail("obs_noise_std must be positive");
  if (!(divergence_threshold > 0.0)) fail("divergence_threshold must be positive");
  if (bounds.delta.lo > bounds.delta.hi || bounds.length_scale.lo > bounds.length_scale.hi ||
      bounds.delta.lo < 0.0 || !(bounds.length_scale.lo > 0.0))
    fail("hyper-parameter bounds are inconsistent");
  if (max_iterations < 0 || max_trials < 0) fail("IES limits must be non-negative");
  if ((method == Method::ChopSif || method == Method::ChopMif) && localize && ensemble_size <= 9)
    fail("correlation-based localization needs ensemble_size > 9");
  if (climatology_steps < 10 * n_state) fail("climatology_steps must be at least 10 * n_state");
  delta_grid.values();
  lambda_grid.values();
}

void apply_setting(ScenarioConfig& c, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  if (key == "name") c.name = std::string(value);
  else if (key == "n_state") c.n_state = parse_int<int>(key, value);
  else if (key == "ensemble_size") c.ensemble_size = parse_int<int>(key, value);
  else if (key == "obs_stride") c.obs_stride = parse_int<int>(key, value);
  else if (key == "obs_interval") c.obs_interval = parse_int<int>(key, value);
  else if (key == "window_units") c.window_units = parse_double(key, value);
  else if (key == "transition_units") c.transition_units = parse_double(key, value);
  else if (key == "dt") c.model.dt = parse_double(key, value);
  else if (key == "forcing") c.model.forcing = parse_double(key, value);
  else if (key == "repetitions") c.repetitions = parse_int<int>(key, value);
  else if (key == "base_seed") c.base_seed = parse_int<std::uint64_t>(key, value);
  else if (key == "method") c.method = parse_method(value);
  else if (key == "delta") c.delta = parse_double(key, value);
  else if (key == "length_scale") c.length_scale = parse_double(key, value);
  else if (key == "delta_grid") c.delta_grid = GridSpec::parse(value);
  else if (key == "lambda_grid") c.lambda_grid = GridSpec::parse(value);
  else if (key == "delta_min") c.bounds.delta.lo = parse_double(key, value);
  else if (key == "delta_max") c.bounds.delta.hi = parse_double(key, value);
  else if (key == "lambda_min") c.bounds.length_scale.lo = parse_double(key, value);
  else if (key == "lambda_max") c.bounds.length_scale.hi = parse_double(key, value);
  else if (key == "max_iterations") c.max_iterations = parse_int<int>(key, value);
  else if (key == "max_trials") c.max_trials = parse_int<int>(key, value);
  else if (key == "relative_tolerance") c.relative_tolerance = parse_double(key, value);
  else if (key == "mismatch_factor") c.mismatch_factor = parse_double(key, value);
  else if (key == "localize") c.localize = parse_bool(key, value);
  else if (key == "chop_inflate_members") c.chop_inflate_members = parse_bool(key, value);
  else if (key == "obs_noise_std") c.obs_noise_std = parse_double(key, value);
  else if (key == "assimilate_at_t0") c.assimilate_at_t0 = parse_bool(key, value);
  else if (key == "divergence_threshold") c.divergence_threshold = parse_double(key, value);
  else if (key == "rmse_average") c.rmse_average = parse_rmse_average(value);
  else if (key == "climatology_steps") c.climatology_steps = parse_int<int>(key, value);
  else if (key == "climatology_burn_in") c.climatology_burn_in = parse_int<int>(key, value);
  else if (key == "climatology_seed") c.climatology_seed = parse_int<std::uint64_t>(key, value);
  else if (key == "cache_dir") c.cache_dir = std::string(value);
  else if (key == "diagnostic_cycles") {
    c.diagnostic_cycles.clear();
    std::string_view rest = value;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string_view item = trim(rest.substr(0, comma));
      if (!item.empty()) c.diagnostic_cycles.push_back(parse_int<int>(key, item));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown key '" + std::string(key) + "'");
  }
}

ScenarioConfig parse_scenario(std::istream& in) {
  ScenarioConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos)
      view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos)
      throw Error(ErrorCode::InvalidConfig,
                  "line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(c, view.substr(0, eq), view.substr(eq + 1));
  }
  return c;
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open scenario file " + path.string());
  return parse_scenario(in);
}

std::string format_scenario(const ScenarioConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "name = " << c.name << '\n'
     << "method = " << to_string(c.method) << '\n'
     << "n_state = " << c.n_state << '\n'
     << "ensemble_size = " << c.ensemble_size << '\n'
     << "obs_stride = " << c.obs_stride << '\n'
     << "obs_interval = " << c.obs_interval << '\n'
     << "window_units = " << c.window_units << '\n'
     << "transition_units = " << c.transition_units << '\n'
     << "dt = " << c.model.dt << '\n'
     << "forcing = " << c.model.forcing << '\n'
     << "repetitions = " << c.repetitions << '\n'
     << "base_seed = " << c.base_seed << '\n'
     << "delta = " << c.delta << '\n'
     << "length_scale = " << c.length_scale << '\n'
     << "delta_grid = " << c.delta_grid.str() << '\n'
     << "lambda_grid = " << c.lambda_grid.str() << '\n'
     << "delta_min = " << c.bounds.delta.lo << '\n'
     << "delta_max = " << c.bounds.delta.hi << '\n'
     << "lambda_min = " << c.bounds.length_scale.lo << '\n'
     << "lambda_max = " << c.bounds.length_scale.hi << '\n'
     << "max_iterations = " << c.max_iterations << '\n'
     << "max_trials = " << c.max_trials << '\n'
     << "relative_tolerance = " << c.relative_tolerance << '\n'
     << "mismatch_factor = " << c.mismatch_factor << '\n'
     << "localize = " << (c.localize ? "true" : "false") << '\n'
     << "chop_inflate_members = " << (c.chop_inflate_members ? "true" : "false") << '\n'
     << "obs_noise_std = " << c.obs_noise_std << '\n'
     << "assimilate_at_t0 = " << (c.assimilate_at_t0 ? "true" : "false") << '\n'
     << "divergence_threshold = " << c.divergence_threshold << '\n'
     << "rmse_average = " << to_string(c.rmse_average) << '\n'
     << "climatology_steps = " << c.climatology_steps << '\n'
     << "climatology_burn_in = " << c.climatology_burn_in << '\n'
     << "climatology_seed = " << c.climatology_seed << '\n';
  if (!c.cache_dir.empty()) os << "cache_dir = " << c.cache_dir << '\n';
  if (!c.diagnostic_cycles.empty()) {
    os << "diagnostic_cycles = ";
    for (std::size_t i = 0; i < c.diagnostic_cycles.size(); ++i)
      os << (i ? "," : "") << c.diagnostic_cycles[i];
    os << '\n';
  }
  return os.str();
}

AnalysisChoice AnalysisChoice::fixed(double delta, double length_scale) {
  return AnalysisChoice{Method::Fixed, delta, length_scale};
}

AnalysisChoice AnalysisChoice::chop(Method method) {
  if (method != Method::ChopSif && method != Method::ChopMif)
    throw Error(ErrorCode::InvalidConfig, "not a CHOP method");
  return AnalysisChoice{method, 0.0, 0.0};
}

TwinContext::TwinContext(const ScenarioConfig& config, l96::Climatology climatology)
    : config_(config),
      climatology_(std::move(climatology)),
      sampler_(climatology_.mean, climatology_.covariance) {
  config_.validate();
  if (climatology_.dimension() != config_.n_state)
    throw Error(ErrorCode::InvalidDimension, "climatology does not match n_state");
}

std::uint64_t TwinContext::seed(int repetition) const {
  return config_.base_seed + static_cast<std::uint64_t>(repetition);
}

l96::Climatology scenario_climatology(const ScenarioConfig& config) {
  return l96::cached_climatology(config.n_state, config.climatology_options(), config.cache_dir);
}

namespace {

bool is_divergence(const Error& e) {
  switch (e.code()) {
    case ErrorCode::IntegrationOverflow:
    case ErrorCode::Factorization:
    case ErrorCode::LinearSolve:
    case ErrorCode::DegenerateMatrix:
    case ErrorCode::DegenerateEnsemble:
    case ErrorCode::CollapsedEnsemble:
      return true;
    default:
      return false;
  }
}

}  // namespace

RunRecord run_assimilation(const TwinContext& context, const AnalysisChoice& analysis,
                           int repetition) {
  const ScenarioConfig& cfg = context.config();
  const std::uint64_t seed = context.seed(repetition);
  RunRecord rec;
  rec.scenario = cfg.name;
  rec.method = analysis.method;
  rec.repetition = repetition;
  rec.seed = seed;
  rec.delta = analysis.delta;
  rec.length_scale = analysis.length_scale;

  const l96::TwinSetup twin = l96::generate_truth_and_background(
      context.sampler(), cfg.transition_steps(), cfg.window_steps(), cfg.ensemble_size, seed,
      cfg.model);
  const ObservationOperator op(cfg.n_state, cfg.obs_stride);
  const Eigen::MatrixXd error_cov =
      Eigen::MatrixXd::Identity(op.size(), op.size()) * (cfg.obs_noise_std * cfg.obs_noise_std);
  Rng noise_rng = make_rng(seed, Stream::ObservationNoise);
  Rng perturb_rng = make_rng(seed, Stream::Perturbation);
  Rng hyper_rng = make_rng(seed, Stream::HyperParams);

  const bool is_chop = analysis.method == Method::ChopSif || analysis.method == Method::ChopMif;
  ScenarioConfig chop_cfg = cfg;
  chop_cfg.method = analysis.method;
  const IesConfig ies = chop_cfg.ies_config();
  HyperParams fixed;
  fixed.inflation = InflationSpec::single(analysis.delta);
  fixed.length_scale = analysis.length_scale;

  Eigen::MatrixXd ensemble = twin.background;
  int step = 0;
  const std::vector<int> steps = cfg.analysis_steps();
  rec.cycles.reserve(steps.size());
  double forecast_sum = 0.0;  // RMSE of forecast means between analyses
  int forecast_count = 0;
  auto diverge = [&](int cycle) {
    rec.diverged = true;
    rec.diverged_cycle = cycle;
  };

  Eigen::VectorXd member(cfg.n_state);
  for (int c = 0; c < static_cast<int>(steps.size()); ++c) {
    const int t = steps[static_cast<std::size_t>(c)];
    bool ok = true;
    for (; step < t && ok; ++step) {
      for (Eigen::Index j = 0; j < ensemble.cols() && ok; ++j) {
        member = ensemble.col(j);
        ok = l96::try_advance(member, 1, cfg.model);
        ensemble.col(j) = member;
      }
      if (ok && step + 1 < t) {
        const double r = rmse(ensemble.rowwise().mean(), twin.truth.col(step + 1));
        ok = r <= cfg.divergence_threshold;
        forecast_sum += r;
        ++forecast_count;
      }
    }
    if (!ok) {
      diverge(c);
      break;
    }
    const Eigen::VectorXd truth = twin.truth.col(t);
    const Eigen::VectorXd observed = observe(op, truth, noise_rng, cfg.obs_noise_std);
    const ObservationBatch batch =
        make_observation_batch(observed, error_cov, cfg.ensemble_size, perturb_rng);

    CycleRecord cycle;
    try {
      if (is_chop) {
        const bool keep = std::find(cfg.diagnostic_cycles.begin(), cfg.diagnostic_cycles.end(),
                                    c) != cfg.diagnostic_cycles.end();
        ChopCycleResult res = run_chop_cycle(ensemble, batch, op, ies, hyper_rng,
                                             keep ? std::optional(truth) : std::nullopt);
        ensemble = std::move(res.analysis);
        cycle.ies_iterations = res.diagnostics.outer_iterations();
        cycle.stop = res.diagnostics.stop;
        cycle.clamp_events = res.diagnostics.clamp_events;
        const Eigen::Index h = res.theta.rows();
        cycle.mean_delta = res.theta.topRows(h - 1).mean();
        cycle.mean_length_scale = res.theta.row(h - 1).mean();
        if (keep) rec.diagnostics.push_back({c, std::move(res.diagnostics)});
      } else {
        ensemble = enkf_analysis(ensemble, batch, op, fixed);
        cycle.mean_delta = analysis.delta;
        cycle.mean_length_scale = analysis.length_scale;
      }
    } catch (const Error& e) {
      if (!is_divergence(e)) throw;
      diverge(c);
      break;
    }
    if (!ensemble.allFinite()) {
      diverge(c);
      break;
    }

    const Eigen::VectorXd mean = ensemble.rowwise().mean();
    CycleMetrics& m = cycle.metrics;
    m.time_index = t;
    m.rmse_of_mean = rmse(mean, truth);
    m.mean_rmse = mean_member_rmse(ensemble, truth);
    m.data_mismatch_mean = data_mismatch(op.apply(mean), observed, error_cov);
    m.spread = ensemble_spread(ensemble);
    rec.cycles.push_back(cycle);
    if (!(m.rmse_of_mean <= cfg.divergence_threshold)) {
      diverge(c);
      break;
    }
  }

  if (!rec.diverged) {
    // Forecast steps after the last analysis still belong to the window.
    for (Eigen::VectorXd m = ensemble.col(0); step < cfg.window_steps(); ++step) {
      for (Eigen::Index j = 0; j < ensemble.cols(); ++j) {
        m = ensemble.col(j);
        if (!l96::try_advance(m, 1, cfg.model)) {
          diverge(static_cast<int>(steps.size()));
          break;
        }
        ensemble.col(j) = m;
      }
      if (rec.diverged) break;
      const double r = rmse(ensemble.rowwise().mean(), twin.truth.col(step + 1));
      if (!(r <= cfg.divergence_threshold)) {
        diverge(static_cast<int>(steps.size()));
        break;
      }
      forecast_sum += r;
      ++forecast_count;
    }
  }

  if (rec.diverged) {
    rec.average_rmse = rec.analysis_rmse = rec.step_rmse = kNaN;
  } else {
    double sum = 0.0;
    for (const CycleRecord& cycle : rec.cycles) sum += cycle.metrics.rmse_of_mean;
    rec.analysis_rmse = sum / static_cast<double>(rec.cycles.size());
    rec.step_rmse = (sum + forecast_sum) / static_cast<double>(rec.cycles.size() + forecast_count);
    rec.average_rmse =
        cfg.rmse_average == RmseAverage::AllSteps ? rec.step_rmse : rec.analysis_rmse;
  }
  return rec;
}

void parallel_for(int n, int threads, const std::function<void(int)>& task) {
  if (n <= 0) return;
  threads = std::clamp(threads, 1, n);
  if (threads == 1) {
    for (int i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<int> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (int i = next++; i < n && !stop; i = next++) {
      try {
        task(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        stop = true;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int k = 0; k < threads; ++k) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

Aggregate aggregate_values(const std::vector<double>& values, int diverged) {
  Aggregate a;
  a.runs = static_cast<int>(values.size());
  a.diverged_count = diverged;
  if (diverged > 0 || values.empty()) {
    a.mean_rmse = a.std_rmse = kNaN;
    return a;
  }
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean_rmse = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean_rmse) * (v - a.mean_rmse);
  a.std_rmse = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  return a;
}

}  // namespace

Aggregate aggregate(std::span<const RunRecord> runs) {
  std::vector<double> values;
  int diverged = 0;
  for (const RunRecord& r : runs) {
    values.push_back(r.average_rmse);
    if (r.diverged) ++diverged;
  }
  return aggregate_values(values, diverged);
}

GridResult grid_search(const TwinContext& context, int threads) {
  const ScenarioConfig& cfg = context.config();
  const std::vector<double> deltas = cfg.delta_grid.values();
  const std::vector<double> lambdas = cfg.lambda_grid.values();
  GridResult grid;
  for (double d : deltas)
    for (double l : lambdas) grid.cells.push_back(GridCell{d, l, {}, {}});

  const int reps = cfg.repetitions;
  const int n_tasks = static_cast<int>(grid.cells.size()) * reps;
  std::vector<double> rmse(static_cast<std::size_t>(n_tasks), kNaN);
  std::vector<char> diverged(static_cast<std::size_t>(n_tasks), 0);
  parallel_for(n_tasks, threads, [&](int task) {
    const GridCell& cell = grid.cells[static_cast<std::size_t>(task / reps)];
    const RunRecord r = run_assimilation(
        context, AnalysisChoice::fixed(cell.delta, cell.length_scale), task % reps);
    rmse[static_cast<std::size_t>(task)] = r.average_rmse;
    diverged[static_cast<std::size_t>(task)] = r.diverged ? 1 : 0;
  });

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < grid.cells.size(); ++c) {
    GridCell& cell = grid.cells[c];
    int n_div = 0;
    for (int k = 0; k < reps; ++k) {
      const std::size_t idx = c * static_cast<std::size_t>(reps) + static_cast<std::size_t>(k);
      cell.rmse.push_back(rmse[idx]);
      n_div += diverged[idx];
    }
    cell.stats = aggregate_values(cell.rmse, n_div);
    if (std::isfinite(cell.stats.mean_rmse) && cell.stats.mean_rmse < best) {
      best = cell.stats.mean_rmse;
      grid.best = static_cast<int>(c);
    }
  }
  return grid;
}

std::vector<RunRecord> run_experiment(const TwinContext& context, const AnalysisChoice& analysis,
                                      int threads) {
  std::vector<RunRecord> runs(static_cast<std::size_t>(context.config().repetitions));
  parallel_for(static_cast<int>(runs.size()), threads, [&](int k) {
    runs[static_cast<std::size_t>(k)] = run_assimilation(context, analysis, k);
  });
  return runs;
}

bool Summary::operator==(const Summary& o) const {
  if (run_rmse.size() != o.run_rmse.size()) return false;
  for (std::size_t i = 0; i < run_rmse.size(); ++i)
    if (!same(run_rmse[i], o.run_rmse[i])) return false;
  return scenario == o.scenario && method == o.method && n_state == o.n_state &&
         ensemble_size == o.ensemble_size && obs_stride == o.obs_stride &&
         obs_interval == o.obs_interval && cycles == o.cycles && base_seed == o.base_seed &&
         repetitions == o.repetitions && same(mean_rmse, o.mean_rmse) &&
         same(std_rmse, o.std_rmse) && diverged_count == o.diverged_count &&
         has_grid == o.has_grid && same(best_delta, o.best_delta) &&
         same(best_length_scale, o.best_length_scale);
}

namespace {

Summary summary_header(const ScenarioConfig& cfg) {
  Summary s;
  s.scenario = cfg.name;
  s.method = std::string(to_string(cfg.method));
  s.n_state = cfg.n_state;
  s.ensemble_size = cfg.ensemble_size;
  s.obs_stride = cfg.obs_stride;
  s.obs_interval = cfg.obs_interval;
  s.cycles = static_cast<int>(cfg.analysis_steps().size());
  s.base_seed = cfg.base_seed;
  s.repetitions = cfg.repetitions;
  return s;
}

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

double number_from(const nlohmann::json& j) {
  return j.is_null() ? kNaN : j.get<double>();
}

}  // namespace

Summary summarize(const ScenarioConfig& config, std::span<const RunRecord> runs) {
  Summary s = summary_header(config);
  if (!runs.empty()) s.method = std::string(to_string(runs.front().method));
  const Aggregate a = aggregate(runs);
  s.repetitions = static_cast<int>(runs.size());
  s.mean_rmse = a.mean_rmse;
  s.std_rmse = a.std_rmse;
  s.diverged_count = a.diverged_count;
  for (const RunRecord& r : runs) s.run_rmse.push_back(r.average_rmse);
  return s;
}

Summary summarize(const ScenarioConfig& config, const GridResult& grid) {
  Summary s = summary_header(config);
  s.method = "grid";
  s.has_grid = true;
  if (const GridCell* best = grid.best_cell()) {
    s.mean_rmse = best->stats.mean_rmse;
    s.std_rmse = best->stats.std_rmse;
    s.diverged_count = best->stats.diverged_count;
    s.run_rmse = best->rmse;
    s.best_delta = best->delta;
    s.best_length_scale = best->length_scale;
  } else {
    s.mean_rmse = s.std_rmse = s.best_delta = s.best_length_scale = kNaN;
  }
  return s;
}

std::string summary_to_json(const Summary& s) {
  nlohmann::json j;
  j["scenario"] = s.scenario;
  j["method"] = s.method;
  j["n_state"] = s.n_state;
  j["ensemble_size"] = s.ensemble_size;
  j["obs_stride"] = s.obs_stride;
  j["obs_interval"] = s.obs_interval;
  j["cycles"] = s.cycles;
  j["base_seed"] = s.base_seed;
  j["repetitions"] = s.repetitions;
  j["mean_rmse"] = number_or_null(s.mean_rmse);
  j["std_rmse"] = number_or_null(s.std_rmse);
  j["diverged_count"] = s.diverged_count;
  nlohmann::json runs = nlohmann::json::array();
  for (double v : s.run_rmse) runs.push_back(number_or_null(v));
  j["run_rmse"] = std::move(runs);
  if (s.has_grid) {
    j["best_delta"] = number_or_null(s.best_delta);
    j["best_length_scale"] = number_or_null(s.best_length_scale);
  }
  return j.dump(2) + "\n";
}

Summary summary_from_json(std::string_view text) {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    Summary s;
    s.scenario = j.at("scenario").get<std::string>();
    s.method = j.at("method").get<std::string>();
    s.n_state = j.at("n_state").get<int>();
    s.ensemble_size = j.at("ensemble_size").get<int>();
    s.obs_stride = j.at("obs_stride").get<int>();
    s.obs_interval = j.at("obs_interval").get<int>();
    s.cycles = j.at("cycles").get<int>();
    s.base_seed = j.at("base_seed").get<std::uint64_t>();
    s.repetitions = j.at("repetitions").get<int>();
    s.mean_rmse = number_from(j.at("mean_rmse"));
    s.std_rmse = number_from(j.at("std_rmse"));
    s.diverged_count = j.at("diverged_count").get<int>();
    for (const auto& v : j.at("run_rmse")) s.run_rmse.push_back(number_from(v));
    if (j.contains("best_delta")) {
      s.has_grid = true;
      s.best_delta = number_from(j.at("best_delta"));
      s.best_length_scale = number_from(j.at("best_length_scale"));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, std::string("malformed summary: ") + e.what());
  }
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << std::setprecision(10);
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

void write_grid_csv(const GridResult& grid, const std::filesystem::path& path) {
  std::ofstream out = open_output(path);
  out << "delta,lambda,mean_rmse,std_rmse,diverged_count\n";
  for (const GridCell& c : grid.cells)
    out << c.delta << ',' << c.length_scale << ',' << c.stats.mean_rmse << ','
        << c.stats.std_rmse << ',' << c.stats.diverged_count << '\n';
  finish(out, path);
}

void write_runs_csv(std::span<const RunRecord> runs, const std::filesystem::path& path) {
  std::ofstream out = open_output(path);
  out << "repetition,cycle,time_index,rmse,mean_rmse,spread,data_mismatch,iterations,stop,"
         "mean_delta,mean_lambda\n";
  for (const RunRecord& r : runs)
    for (std::size_t c = 0; c < r.cycles.size(); ++c) {
      const CycleRecord& rec = r.cycles[c];
      const CycleMetrics& m = rec.metrics;
      out << r.repetition << ',' << c << ',' << m.time_index << ',' << m.rmse_of_mean << ','
          << m.mean_rmse << ',' << m.spread << ',' << m.data_mismatch_mean << ','
          << rec.ies_iterations << ',' << to_string(rec.stop) << ',' << rec.mean_delta << ','
          << rec.mean_length_scale << '\n';
    }
  finish(out, path);
}

void write_diagnostics_csv(std::span<const RunRecord> runs, const std::filesystem::path& path) {
  std::ofstream out = open_output(path);
  out << "repetition,cycle,iteration,alpha,gamma,trials,accepted,mismatch,mismatch_min,"
         "mismatch_q25,mismatch_median,mismatch_q75,mismatch_max,mean_rmse,spread,"
         "theta_spread,svd_rank,svd_full_rank,energy_kept,taper_min,taper_max,stop\n";
  for (const RunRecord& r : runs)
    for (const CycleDiagnostics& d : r.diagnostics)
      for (const IesIteration& it : d.ies.iterations) {
        const std::vector<double> mm(it.member_mismatch.data(),
                                     it.member_mismatch.data() + it.member_mismatch.size());
        out << r.repetition << ',' << d.cycle << ',' << it.iteration << ',' << it.alpha << ','
            << it.gamma << ',' << it.trials << ',' << (it.accepted ? 1 : 0) << ','
            << it.mismatch << ',' << quantile(mm, 0.0) << ',' << quantile(mm, 0.25) << ','
            << quantile(mm, 0.5) << ',' << quantile(mm, 0.75) << ',' << quantile(mm, 1.0)
            << ',' << it.mean_rmse << ',' << it.spread << ',' << it.theta_spread << ','
            << it.svd_rank << ',' << it.svd_full_rank << ',' << it.energy_kept << ','
            << it.taper_min << ',' << it.taper_max << ',' << to_string(d.ies.stop) << '\n';
      }
  finish(out, path);
}

void write_theta_csv(std::span<const RunRecord> runs, const std::filesystem::path& path) {
  std::ofstream out = open_output(path);
  out << "repetition,cycle,stage,member,param,value\n";
  for (const RunRecord& r : runs)
    for (const CycleDiagnostics& d : r.diagnostics)
      for (auto [stage, theta] : {std::pair{"initial", &d.ies.initial_theta},
                                  std::pair{"final", &d.ies.final_theta}})
        for (Eigen::Index j = 0; j < theta->cols(); ++j)
          for (Eigen::Index s = 0; s < theta->rows(); ++s)
            out << r.repetition << ',' << d.cycle << ',' << stage << ',' << j << ',' << s << ','
                << (*theta)(s, j) << '\n';
  finish(out, path);
}

void write_summary(const Summary& summary, const std::filesystem::path& path) {
  std::ofstream out = open_output(path);
  out << summary_to_json(summary);
  finish(out, path);
}

Summary read_summary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return summary_from_json(buf.str());
}

}  // namespace chop
