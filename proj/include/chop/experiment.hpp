#pragma once

#include "chop/enkf.hpp"
#include "chop/ensemble.hpp"
#include "chop/ies.hpp"
#include "chop/l96.hpp"
#include "chop/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace chop {

enum class Method { Fixed, Grid, ChopSif, ChopMif };
std::string_view to_string(Method method);
Method parse_method(std::string_view text);

/// Time average behind the window RMSE: every integration step of the window
/// (forecast means between analyses, analysis means at analysis times) or the
/// analysis times only.
enum class RmseAverage { AllSteps, AnalysisOnly };
std::string_view to_string(RmseAverage average);
RmseAverage parse_rmse_average(std::string_view text);

/// Inclusive arithmetic progression written lo:step:hi.
struct GridSpec {
  double lo = 0.0;
  double step = 0.1;
  double hi = 1.0;

  std::vector<double> values() const;
  std::string str() const;
  static GridSpec parse(std::string_view text);
};

/// Full description of a twin experiment.
struct ScenarioConfig {
  std::string name = "scenario";
  int n_state = 40;
  int ensemble_size = 30;
  int obs_stride = 1;        ///< observe every obs_stride-th component
  int obs_interval = 4;      ///< integration steps between observations
  double window_units = 250.0;
  double transition_units = 250.0;
  l96::ModelParams model;
  int repetitions = 20;
  std::uint64_t base_seed = 1;
  Method method = Method::ChopSif;

  // Fixed-parameter EnKF.
  double delta = 0.1;
  double length_scale = 0.2;
  // Grid search.
  GridSpec delta_grid{0.0, 0.05, 2.0};
  GridSpec lambda_grid{0.05, 0.05, 1.0};
  // CHOP.
  HyperBounds bounds;
  int max_iterations = 10;
  int max_trials = 5;
  double relative_tolerance = 1e-4;
  double mismatch_factor = 4.0;
  bool localize = true;
  bool chop_inflate_members = true;

  double obs_noise_std = 1.0;
  bool assimilate_at_t0 = false;
  double divergence_threshold = 1e3;
  RmseAverage rmse_average = RmseAverage::AllSteps;

  int climatology_steps = 100000;
  int climatology_burn_in = 0;
  std::uint64_t climatology_seed = 0;
  std::string cache_dir;               ///< empty disables the climatology cache
  std::vector<int> diagnostic_cycles;  ///< cycles whose IES record is kept

  int window_steps() const;
  int transition_steps() const;
  /// Analysis times as integration-step indices into the reference run.
  std::vector<int> analysis_steps() const;
  IesConfig ies_config() const;
  l96::ClimatologyOptions climatology_options() const;
  /// Throws InvalidConfig with the offending key.
  void validate() const;
};

/// Sets one key of a scenario from its textual value.
void apply_setting(ScenarioConfig& config, std::string_view key, std::string_view value);
/// Parses `key = value` lines; '#' starts a comment.
ScenarioConfig parse_scenario(std::istream& in);
ScenarioConfig load_scenario(const std::filesystem::path& path);
std::string format_scenario(const ScenarioConfig& config);

/// Which analysis a run uses.
struct AnalysisChoice {
  Method method = Method::Fixed;  ///< Fixed, ChopSif or ChopMif
  double delta = 0.0;
  double length_scale = 1.0;

  static AnalysisChoice fixed(double delta, double length_scale);
  static AnalysisChoice chop(Method method);
};

struct CycleRecord {
  CycleMetrics metrics;
  int ies_iterations = 0;
  StopReason stop = StopReason::None;
  int clamp_events = 0;
  double mean_delta = 0.0;         ///< averaged over members (and components)
  double mean_length_scale = 0.0;
};

/// IES record of one requested cycle.
struct CycleDiagnostics {
  int cycle = 0;
  IesDiagnostics ies;
};

struct RunRecord {
  std::string scenario;
  Method method = Method::Fixed;
  int repetition = 0;
  std::uint64_t seed = 0;
  double delta = 0.0;              ///< grid cell, fixed runs only
  double length_scale = 0.0;
  std::vector<CycleRecord> cycles;
  std::vector<CycleDiagnostics> diagnostics;
  bool diverged = false;
  int diverged_cycle = -1;
  double average_rmse = 0.0;       ///< configured window average, NaN when diverged
  double analysis_rmse = 0.0;      ///< mean over analysis times
  double step_rmse = 0.0;          ///< mean over every integration step
};

/// Shared read-only inputs of every run of one scenario.
class TwinContext {
 public:
  TwinContext(const ScenarioConfig& config, l96::Climatology climatology);

  const ScenarioConfig& config() const { return config_; }
  const l96::Climatology& climatology() const { return climatology_; }
  const GaussianSampler& sampler() const { return sampler_; }
  std::uint64_t seed(int repetition) const;

 private:
  ScenarioConfig config_;
  l96::Climatology climatology_;
  GaussianSampler sampler_;
};

/// Computes or loads the climatology of the scenario.
l96::Climatology scenario_climatology(const ScenarioConfig& config);

/// One repetition of the twin experiment: forecast, observe, analyze, score.
RunRecord run_assimilation(const TwinContext& context, const AnalysisChoice& analysis,
                           int repetition);

/// Runs tasks 0..n-1 on up to `threads` workers.  The first exception thrown
/// by a task is rethrown after all workers stop.
void parallel_for(int n, int threads, const std::function<void(int)>& task);

struct Aggregate {
  double mean_rmse = 0.0;   ///< NaN if any repetition diverged
  double std_rmse = 0.0;    ///< sample standard deviation over repetitions
  int diverged_count = 0;
  int runs = 0;
};

Aggregate aggregate(std::span<const RunRecord> runs);

struct GridCell {
  double delta = 0.0;
  double length_scale = 0.0;
  Aggregate stats;
  std::vector<double> rmse;   ///< per repetition
};

struct GridResult {
  std::vector<GridCell> cells;  ///< delta-major
  int best = -1;                ///< argmin of mean_rmse over finite cells

  const GridCell* best_cell() const { return best < 0 ? nullptr : &cells[best]; }
};

GridResult grid_search(const TwinContext& context, int threads = 1);
/// Repetitions of a fixed or CHOP analysis.
std::vector<RunRecord> run_experiment(const TwinContext& context, const AnalysisChoice& analysis,
                                      int threads = 1);

/// Table-like outcome of an experiment.
struct Summary {
  std::string scenario;
  std::string method;
  int n_state = 0;
  int ensemble_size = 0;
  int obs_stride = 0;
  int obs_interval = 0;
  int cycles = 0;
  std::uint64_t base_seed = 0;
  int repetitions = 0;
  double mean_rmse = 0.0;
  double std_rmse = 0.0;
  int diverged_count = 0;
  std::vector<double> run_rmse;
  // Grid search only.
  bool has_grid = false;
  double best_delta = 0.0;
  double best_length_scale = 0.0;

  bool operator==(const Summary& other) const;
};

Summary summarize(const ScenarioConfig& config, std::span<const RunRecord> runs);
Summary summarize(const ScenarioConfig& config, const GridResult& grid);

std::string summary_to_json(const Summary& summary);
Summary summary_from_json(std::string_view text);

// CSV/JSON writers.  Failures throw Io with the path in the message.
void write_grid_csv(const GridResult& grid, const std::filesystem::path& path);
void write_runs_csv(std::span<const RunRecord> runs, const std::filesystem::path& path);
void write_diagnostics_csv(std::span<const RunRecord> runs, const std::filesystem::path& path);
void write_theta_csv(std::span<const RunRecord> runs, const std::filesystem::path& path);
void write_summary(const Summary& summary, const std::filesystem::path& path);
Summary read_summary(const std::filesystem::path& path);

}  // namespace chop
