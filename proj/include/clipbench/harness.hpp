#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "clipbench/datastream.hpp"
#include "clipbench/diagnostics.hpp"
#include "clipbench/models.hpp"
#include "clipbench/optim.hpp"
#include "clipbench/types.hpp"

namespace clipbench::harness {

// Bad config file, bad override, bad CLI value. Maps to exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  // model.*
  std::string preset = "small";  // small | large | quad
  int binary_tasks = 4;
  int regression_tasks = 2;
  double accumulator_init = optim::kDefaultAccumulatorInit;

  // stream.* (stream.seed = 0 derives one from run.seed)
  datastream::StreamConfig stream;

  // optim.*: the rule selector plus per-rule thresholds, kept side by side
  // so one config can be swept across methods.
  optim::ClipMethod rule = optim::ClipMethod::None;
  double gc_lambda = 1e-1;
  double agc_lambda = 1e-3;
  double lambda_rel = 0.5;
  double lambda_abs = 1e-2;
  double lamb_mu = 1e-3;
  double lamb_phi_lower = 0.0;
  double lamb_phi_upper = kInf;

  // lr.*
  optim::LrSchedule lr;

  // run.*
  std::int64_t steps = 2000;
  std::int64_t eval_every = 100;
  std::int64_t eval_sample = 2048;  // holdout rows per eval row, 0 = all
  std::uint64_t seed = 42;

  // detector.*
  diagnostics::DetectorParams detector;

  // quad.*
  std::vector<double> quad_alphas = {20.0, 1.0};
  std::vector<double> quad_w0 = {1.0, 1.0};
  double quad_diverge_loss = 1e3;

  // ablate.*
  std::vector<int> drop_tasks;
  std::vector<std::pair<int, int>> drop_features;  // inclusive index ranges
};

// Builds the ClipRule the config selects (or an explicit method override).
optim::ClipRule build_rule(const ExperimentConfig& cfg);
optim::ClipRule build_rule(const ExperimentConfig& cfg, optim::ClipMethod method);

// key=value lines, # comments, unknown keys rejected. Throws UsageError.
void apply_override(ExperimentConfig& cfg, std::string_view key,
                    std::string_view value);
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig parse_config_file(const std::filesystem::path& path);
void validate_config(const ExperimentConfig& cfg);

struct TraceSchema {
  int num_tasks = 0;
  std::vector<int> auc_tasks;   // binary task indices, ascending
  std::vector<int> rmse_tasks;  // regression task indices, ascending
  std::vector<std::string> blocks;
  bool operator==(const TraceSchema&) const = default;
};

struct Trace {
  TraceSchema schema;
  std::vector<diagnostics::MetricsRow> rows;
  diagnostics::DivergenceVerdict verdict;
};

// Compares exactly what the CSV format preserves: schema, rows, and the
// verdict's state and onset.
bool operator==(const Trace& a, const Trace& b);

struct RunSummary {
  diagnostics::DivergenceVerdict verdict;
  std::int64_t steps_completed = 0;
  double wall_seconds = 0.0;
  Index param_count = 0;
  // Full-holdout metrics, absent for fully diverged runs. Aligned with the
  // trace schema's auc_tasks / rmse_tasks.
  std::vector<std::optional<double>> final_auc;
  std::vector<std::optional<double>> final_rmse;
  std::optional<double> mean_auc;   // over non-dropped binary tasks
  std::optional<double> mean_rmse;  // over non-dropped regression tasks
};

// Pre-update peek at every block of every step; step is 1-based to match
// the trace's step column.
struct StepAudit {
  std::function<void(std::int64_t step, std::size_t block_index,
                     const optim::ParamBlock& block, const Array& g,
                     const Array& r, const optim::ClipDecision& decision,
                     double eta)>
      on_block;
};

RunSummary run_experiment(const ExperimentConfig& cfg,
                          Trace* trace_out = nullptr,
                          const StepAudit& audit = {});

// run_experiment with the drop lists applied on top of cfg.
RunSummary ablation_run(const ExperimentConfig& cfg,
                        const std::vector<int>& drop_tasks,
                        const std::vector<std::pair<int, int>>& drop_features,
                        Trace* trace_out = nullptr);

void emit_csv(const Trace& trace, std::ostream& out);
void emit_csv(const Trace& trace, const std::filesystem::path& path);
Trace load_csv(std::istream& in);
Trace load_csv(const std::filesystem::path& path);

struct GridRunOutcome {
  std::uint64_t seed = 0;
  diagnostics::RunState state = diagnostics::RunState::Healthy;
  std::optional<double> mean_auc;
  std::optional<double> mean_rmse;
  std::int64_t steps_completed = 0;
  double wall_seconds = 0.0;
};

struct GridCell {
  std::string method;
  double multiplier = 1.0;
  std::vector<GridRunOutcome> runs;
  int survivors = 0;  // runs that did not fully diverge
  std::optional<double> auc_mean, auc_std;
  std::optional<double> rmse_mean, rmse_std;
  bool best_for_method = false;
};

struct GridResult {
  std::vector<std::string> methods;
  std::vector<double> multipliers;
  int seeds = 0;
  std::vector<GridCell> cells;  // method-major, multiplier-minor
};

// Every run is seeded by derive_seed(base, method, multiplier, replica).
std::uint64_t derive_seed(std::uint64_t base, std::string_view method,
                          double multiplier, int replica);

using GridRunHook = std::function<void(
    const std::string& method, double multiplier, int replica,
    const ExperimentConfig& cfg, const RunSummary& summary, const Trace& trace)>;

GridResult compare_methods(const ExperimentConfig& base,
                           const std::vector<std::string>& methods,
                           const std::vector<double>& multipliers, int seeds,
                           const GridRunHook& hook = {});

std::string text_table(const GridResult& grid);
std::string to_json(const GridResult& grid);

// Shortest decimal representation that round-trips to the same double.
std::string format_double(double v);
double parse_double(std::string_view s);  // strict, throws UsageError

}  // namespace clipbench::harness
