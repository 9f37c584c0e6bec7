#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "clipbench/harness.hpp"

namespace fs = std::filesystem;
using namespace clipbench;

namespace {

void apply_sets(harness::ExperimentConfig& cfg,
                const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw harness::UsageError("--set expects key=value, got '" + s + "'");
    harness::apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
}

void print_summary(const harness::RunSummary& summary,
                   const harness::Trace& trace, const fs::path& csv_path) {
  std::cout << "verdict: "
            << diagnostics::run_state_name(summary.verdict.state);
  if (summary.verdict.onset_step)
    std::cout << " (onset step " << *summary.verdict.onset_step << ")";
  std::cout << '\n';
  if (summary.verdict.warmup_incomplete)
    std::cout << "warning: trace shorter than the detector baseline window\n";
  std::cout << "steps_completed: " << summary.steps_completed << '\n';
  std::cout << "param_count: " << summary.param_count << '\n';
  for (std::size_t i = 0; i < trace.schema.auc_tasks.size(); ++i)
    if (i < summary.final_auc.size() && summary.final_auc[i])
      std::cout << "auc_task_" << trace.schema.auc_tasks[i] << ": "
                << harness::format_double(*summary.final_auc[i]) << '\n';
  for (std::size_t i = 0; i < trace.schema.rmse_tasks.size(); ++i)
    if (i < summary.final_rmse.size() && summary.final_rmse[i])
      std::cout << "rmse_task_" << trace.schema.rmse_tasks[i] << ": "
                << harness::format_double(*summary.final_rmse[i]) << '\n';
  if (summary.mean_auc)
    std::cout << "mean_auc: " << harness::format_double(*summary.mean_auc)
              << '\n';
  if (summary.mean_rmse)
    std::cout << "mean_rmse: " << harness::format_double(*summary.mean_rmse)
              << '\n';
  std::cout << "wall_seconds: " << harness::format_double(summary.wall_seconds)
            << '\n';
  std::cout << "csv: " << csv_path.string() << '\n';
}

int run_and_emit(const harness::ExperimentConfig& cfg, const fs::path& out_dir,
                 const std::string& csv_name) {
  harness::Trace trace;
  harness::RunSummary summary = harness::run_experiment(cfg, &trace);
  fs::create_directories(out_dir);
  fs::path csv_path = out_dir / csv_name;
  harness::emit_csv(trace, csv_path);
  print_summary(summary, trace, csv_path);
  return summary.verdict.state == diagnostics::RunState::Full ? 2 : 0;
}

std::vector<double> parse_multipliers(const std::string& s) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t pos = s.find(',', start);
    std::string part = s.substr(
        start, pos == std::string::npos ? std::string::npos : pos - start);
    if (!part.empty()) out.push_back(harness::parse_double(part));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (out.empty()) throw harness::UsageError("empty multiplier list");
  return out;
}

std::vector<std::string> parse_names(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t pos = s.find(',', start);
    std::string part = s.substr(
        start, pos == std::string::npos ? std::string::npos : pos - start);
    if (!part.empty()) out.push_back(part);
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (out.empty()) throw harness::UsageError("empty method list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adagrad clipping-rule stability workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs", csv_name = "run.csv";
  std::vector<std::string> sets;

  auto* run_cmd = app.add_subcommand("run", "run one experiment from a config");
  run_cmd->add_option("config", config_path, "config file")->required();
  run_cmd->add_option("--set", sets, "override a config key (key=value)");
  run_cmd->add_option("--out", out_dir, "output directory");
  run_cmd->add_option("--csv", csv_name, "trace file name");

  std::string methods_str = "naive,gc,agc,lamb,clippy";
  std::string multipliers_str = "1,2";
  int seeds = 3;
  auto* grid_cmd =
      app.add_subcommand("grid", "method x learning-rate survival grid");
  grid_cmd->add_option("config", config_path, "config file")->required();
  grid_cmd->add_option("--methods", methods_str, "comma list of rules");
  grid_cmd->add_option("--multipliers", multipliers_str,
                       "comma list of lr multipliers");
  grid_cmd->add_option("--seeds", seeds, "replicas per cell");
  grid_cmd->add_option("--set", sets, "override a config key (key=value)");
  grid_cmd->add_option("--out", out_dir, "output directory");

  std::string alphas = "20,1", w0 = "1,1", rule = "naive";
  double lr = 0.1, multiplier = 1.0, diverge_loss = 1e3;
  std::int64_t steps = 500, eval_every = 1;
  auto* quad_cmd =
      app.add_subcommand("quad", "gradient descent on the quadratic testbed");
  quad_cmd->add_option("--alphas", alphas, "comma list of eigenvalues");
  quad_cmd->add_option("--w0", w0, "comma list of initial weights");
  quad_cmd->add_option("--lr", lr, "learning rate");
  quad_cmd->add_option("--multiplier", multiplier, "learning-rate multiplier");
  quad_cmd->add_option("--rule", rule, "clipping rule");
  quad_cmd->add_option("--steps", steps, "number of GD steps");
  quad_cmd->add_option("--eval-every", eval_every, "trace cadence");
  quad_cmd->add_option("--diverge-loss", diverge_loss, "divergence threshold");
  quad_cmd->add_option("--set", sets, "override a config key (key=value)");
  quad_cmd->add_option("--out", out_dir, "output directory");
  quad_cmd->add_option("--csv", csv_name, "trace file name");

  std::string drop_tasks, drop_features;
  auto* ablate_cmd =
      app.add_subcommand("ablate", "run with tasks/features removed");
  ablate_cmd->add_option("config", config_path, "config file")->required();
  ablate_cmd->add_option("--drop-tasks", drop_tasks,
                         "comma list of task indices");
  ablate_cmd->add_option("--drop-features", drop_features,
                         "comma list of inclusive column ranges (e.g. 0-7)");
  ablate_cmd->add_option("--set", sets, "override a config key (key=value)");
  ablate_cmd->add_option("--out", out_dir, "output directory");
  ablate_cmd->add_option("--csv", csv_name, "trace file name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*run_cmd) {
      harness::ExperimentConfig cfg =
          harness::parse_config_file(config_path);
      apply_sets(cfg, sets);
      return run_and_emit(cfg, out_dir, csv_name);
    }
    if (*grid_cmd) {
      harness::ExperimentConfig cfg =
          harness::parse_config_file(config_path);
      apply_sets(cfg, sets);
      fs::create_directories(out_dir);
      auto hook = [&](const std::string& method, double mult, int replica,
                      const harness::ExperimentConfig&,
                      const harness::RunSummary&, const harness::Trace& trace) {
        std::string name = "run_" + method + "_" +
                           harness::format_double(mult) + "x_s" +
                           std::to_string(replica) + ".csv";
        harness::emit_csv(trace, fs::path(out_dir) / name);
      };
      harness::GridResult grid = harness::compare_methods(
          cfg, parse_names(methods_str), parse_multipliers(multipliers_str),
          seeds, hook);
      std::string table = harness::text_table(grid);
      std::ofstream(fs::path(out_dir) / "table.txt") << table;
      std::ofstream(fs::path(out_dir) / "summary.json")
          << harness::to_json(grid) << '\n';
      std::cout << table;
      std::cout << "summary: " << (fs::path(out_dir) / "summary.json").string()
                << '\n';
      return 0;
    }
    if (*quad_cmd) {
      harness::ExperimentConfig cfg;
      cfg.preset = "quad";
      harness::apply_override(cfg, "quad.alphas", alphas);
      harness::apply_override(cfg, "quad.w0", w0);
      harness::apply_override(cfg, "optim.rule", rule);
      cfg.lr.base_lr = lr;
      cfg.lr.multiplier = multiplier;
      cfg.steps = steps;
      cfg.eval_every = eval_every;
      cfg.quad_diverge_loss = diverge_loss;
      apply_sets(cfg, sets);
      if (csv_name == "run.csv") csv_name = "quad.csv";
      return run_and_emit(cfg, out_dir, csv_name);
    }
    if (*ablate_cmd) {
      harness::ExperimentConfig cfg =
          harness::parse_config_file(config_path);
      if (ablate_cmd->count("--drop-tasks"))
        harness::apply_override(cfg, "ablate.tasks", drop_tasks);
      if (ablate_cmd->count("--drop-features"))
        harness::apply_override(cfg, "ablate.features", drop_features);
      apply_sets(cfg, sets);
      return run_and_emit(cfg, out_dir, csv_name);
    }
  } catch (const harness::UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
