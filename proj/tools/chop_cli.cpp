// Command-line driver for the Lorenz-96 twin experiments.
#include "chop/error.hpp"
#include "chop/experiment.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace chop;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> reps;
  int threads = 1;
  std::string out_dir = "results";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("config", args.config_path, "Scenario file (key = value lines)");
  cmd->add_option("--set", args.overrides, "Override a scenario key, e.g. --set n_state=40");
  cmd->add_option("--seed", args.seed, "Base seed; repetition k uses seed + k");
  cmd->add_option("--reps", args.reps, "Number of repetitions")->check(CLI::PositiveNumber);
  cmd->add_option("--threads", args.threads, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--out-dir", args.out_dir, "Output directory");
}

ScenarioConfig load(const CommonArgs& args) {
  ScenarioConfig c = args.config_path.empty() ? ScenarioConfig{} : load_scenario(args.config_path);
  for (const std::string& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::InvalidConfig, "--set expects key=value, got '" + kv + "'");
    apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed) c.base_seed = *args.seed;
  if (args.reps) c.repetitions = *args.reps;
  c.validate();
  return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void print_summary(const Summary& s) {
  std::cout << s.scenario << " [" << s.method << "] N_L=" << s.n_state
            << " N_e=" << s.ensemble_size << " dn=" << s.obs_stride
            << " Nfreq=" << s.obs_interval << " reps=" << s.repetitions << ": "
            << std::fixed << std::setprecision(4) << s.mean_rmse << " +- " << s.std_rmse;
  if (s.has_grid) std::cout << " at (" << s.best_delta << ", " << s.best_length_scale << ")";
  if (s.diverged_count > 0) std::cout << " (" << s.diverged_count << " diverged)";
  std::cout << std::defaultfloat << '\n';
}

TwinContext make_context(const ScenarioConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  l96::Climatology clim = scenario_climatology(c);
  std::cerr << "climatology ready (" << std::setprecision(3) << seconds_since(t0) << " s)\n";
  return TwinContext(c, std::move(clim));
}

int cmd_climatology(const CommonArgs& args) {
  const ScenarioConfig c = load(args);
  const fs::path out(args.out_dir);
  fs::create_directories(out);
  const l96::Climatology clim = scenario_climatology(c);
  const fs::path bin = out / l96::climatology_cache_name(c.n_state, c.climatology_options());
  l96::save_climatology(clim, bin);
  std::ofstream csv(out / "climatology_mean.csv");
  csv << "index,mean,variance\n" << std::setprecision(12);
  for (Eigen::Index i = 0; i < clim.dimension(); ++i)
    csv << i << ',' << clim.mean(i) << ',' << clim.covariance(i, i) << '\n';
  std::cout << "wrote " << bin.string() << " (mean of means " << clim.mean.mean()
            << ", mean variance " << clim.covariance.diagonal().mean() << ")\n";
  return 0;
}

int cmd_grid(const CommonArgs& args) {
  ScenarioConfig c = load(args);
  c.method = Method::Grid;
  const TwinContext ctx = make_context(c);
  const auto t0 = std::chrono::steady_clock::now();
  const GridResult grid = grid_search(ctx, args.threads);
  const fs::path out(args.out_dir);
  write_grid_csv(grid, out / "grid.csv");
  const Summary s = summarize(c, grid);
  write_summary(s, out / "summary.json");
  print_summary(s);
  std::cerr << "grid search took " << seconds_since(t0) << " s\n";
  return 0;
}

int write_runs(const ScenarioConfig& c, const std::vector<RunRecord>& runs, const fs::path& out) {
  write_runs_csv(runs, out / "runs.csv");
  if (!c.diagnostic_cycles.empty()) {
    write_diagnostics_csv(runs, out / "diagnostics.csv");
    write_theta_csv(runs, out / "theta.csv");
  }
  const Summary s = summarize(c, runs);
  write_summary(s, out / "summary.json");
  print_summary(s);
  return 0;
}

int cmd_chop(const CommonArgs& args, const std::string& method) {
  ScenarioConfig c = load(args);
  if (!method.empty()) c.method = parse_method(method);
  if (c.method != Method::ChopSif && c.method != Method::ChopMif)
    throw Error(ErrorCode::InvalidConfig, "chop needs method chop-sif or chop-mif");
  c.validate();
  const TwinContext ctx = make_context(c);
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<RunRecord> runs =
      run_experiment(ctx, AnalysisChoice::chop(c.method), args.threads);
  std::cerr << "chop runs took " << seconds_since(t0) << " s\n";
  return write_runs(c, runs, args.out_dir);
}

int cmd_single(const CommonArgs& args, int repetition, const std::string& method) {
  ScenarioConfig c = load(args);
  if (!method.empty()) c.method = parse_method(method);
  if (c.method == Method::Grid) c.method = Method::Fixed;
  const TwinContext ctx = make_context(c);
  const AnalysisChoice choice = c.method == Method::Fixed
                                    ? AnalysisChoice::fixed(c.delta, c.length_scale)
                                    : AnalysisChoice::chop(c.method);
  const std::vector<RunRecord> runs{run_assimilation(ctx, choice, repetition)};
  return write_runs(c, runs, args.out_dir);
}

int cmd_export(const std::vector<std::string>& inputs, const std::string& output) {
  std::ofstream out(output);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + output);
  out << "scenario,method,n_state,ensemble_size,obs_stride,obs_interval,repetitions,"
         "mean_rmse,std_rmse,diverged_count,best_delta,best_lambda\n"
      << std::setprecision(10);
  for (const std::string& path : inputs) {
    const Summary s = read_summary(path);
    out << s.scenario << ',' << s.method << ',' << s.n_state << ',' << s.ensemble_size << ','
        << s.obs_stride << ',' << s.obs_interval << ',' << s.repetitions << ',' << s.mean_rmse
        << ',' << s.std_rmse << ',' << s.diverged_count << ',';
    if (s.has_grid) out << s.best_delta << ',' << s.best_length_scale;
    else out << ',';
    out << '\n';
  }
  std::cout << "wrote " << inputs.size() << " rows to " << output << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lorenz-96 twin experiments with hyper-parameter tuned EnKF"};
  app.require_subcommand(1);

  CommonArgs clim_args, grid_args, chop_args, single_args;
  auto* clim = app.add_subcommand("climatology", "Compute (or load) and store the climatology");
  add_common(clim, clim_args);

  auto* grid = app.add_subcommand("grid-search", "Fixed-parameter EnKF over a (delta, lambda) grid");
  add_common(grid, grid_args);

  std::string chop_method;
  auto* chop = app.add_subcommand("chop", "EnKF with per-cycle hyper-parameter estimation");
  add_common(chop, chop_args);
  chop->add_option("--method", chop_method, "chop-sif or chop-mif");

  int repetition = 0;
  std::string single_method;
  auto* single = app.add_subcommand("single-run", "One repetition of a fixed or CHOP scenario");
  add_common(single, single_args);
  single->add_option("--rep", repetition, "Repetition index")->check(CLI::NonNegativeNumber);
  single->add_option("--method", single_method, "fixed, chop-sif or chop-mif");

  std::vector<std::string> inputs;
  std::string output = "table.csv";
  auto* exp = app.add_subcommand("export", "Collect summary JSON files into one CSV table");
  exp->add_option("summaries", inputs, "summary.json files")->required()->check(CLI::ExistingFile);
  exp->add_option("-o,--output", output, "Output CSV");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*clim) return cmd_climatology(clim_args);
    if (*grid) return cmd_grid(grid_args);
    if (*chop) return cmd_chop(chop_args, chop_method);
    if (*single) return cmd_single(single_args, repetition, single_method);
    if (*exp) return cmd_export(inputs, output);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
