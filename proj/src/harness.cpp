#include "clipbench/harness.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace clipbench::harness {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
    s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
    s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename T>
T parse_int(std::string_view s) {
  s = trim(s);
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw UsageError("bad integer: '" + std::string(s) + "'");
  return v;
}

std::vector<double> parse_double_list(std::string_view s) {
  std::vector<double> out;
  for (auto part : split(s, ','))
    if (!trim(part).empty()) out.push_back(parse_double(trim(part)));
  return out;
}

std::vector<int> parse_int_list(std::string_view s) {
  s = trim(s);
  std::vector<int> out;
  if (s.empty() || s == "none") return out;
  for (auto part : split(s, ','))
    if (!trim(part).empty()) out.push_back(parse_int<int>(trim(part)));
  return out;
}

// "0-7,30-31" or single indices; ranges are inclusive.
std::vector<std::pair<int, int>> parse_ranges(std::string_view s) {
  s = trim(s);
  std::vector<std::pair<int, int>> out;
  if (s.empty() || s == "none") return out;
  for (auto part : split(s, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    std::size_t dash = part.find('-');
    if (dash == std::string_view::npos) {
      int v = parse_int<int>(part);
      out.emplace_back(v, v);
    } else {
      out.emplace_back(parse_int<int>(part.substr(0, dash)),
                       parse_int<int>(part.substr(dash + 1)));
    }
  }
  return out;
}

// "5:1.5,7:0.25"
std::vector<datastream::ShiftEvent> parse_shift_events(std::string_view s) {
  s = trim(s);
  std::vector<datastream::ShiftEvent> out;
  if (s.empty() || s == "none") return out;
  for (auto part : split(s, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    std::size_t colon = part.find(':');
    if (colon == std::string_view::npos)
      throw UsageError("bad shift event (want day:severity): '" +
                       std::string(part) + "'");
    out.push_back({parse_int<int>(part.substr(0, colon)),
                   parse_double(trim(part.substr(colon + 1)))});
  }
  return out;
}

bool is_dropped(const std::vector<int>& drops, int k) {
  return std::find(drops.begin(), drops.end(), k) != drops.end();
}

std::string format_multiplier(double m) { return format_double(m); }

}  // namespace

std::string format_double(double v) {
  std::array<char, 64> buf;
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), p);
}

double parse_double(std::string_view s) {
  s = trim(s);
  double v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw UsageError("bad number: '" + std::string(s) + "'");
  return v;
}

optim::ClipRule build_rule(const ExperimentConfig& cfg,
                           optim::ClipMethod method) {
  switch (method) {
    case optim::ClipMethod::None:
      return optim::ClipRule::none();
    case optim::ClipMethod::GC:
      return optim::ClipRule::gc(cfg.gc_lambda);
    case optim::ClipMethod::AGC:
      return optim::ClipRule::agc(cfg.agc_lambda);
    case optim::ClipMethod::LAMB:
      return optim::ClipRule::lamb(cfg.lamb_mu, cfg.lamb_phi_lower,
                                   cfg.lamb_phi_upper);
    case optim::ClipMethod::Clippy:
      return optim::ClipRule::clippy(cfg.lambda_rel, cfg.lambda_abs);
  }
  return optim::ClipRule::none();
}

optim::ClipRule build_rule(const ExperimentConfig& cfg) {
  return build_rule(cfg, cfg.rule);
}

void apply_override(ExperimentConfig& cfg, std::string_view key,
                    std::string_view value) {
  key = trim(key);
  value = trim(value);
  try {
    if (key == "model.preset") {
      std::string p(value);
      if (p != "small" && p != "large" && p != "quad")
        throw UsageError("unknown preset: '" + p + "'");
      cfg.preset = p;
    } else if (key == "model.binary_tasks") {
      cfg.binary_tasks = parse_int<int>(value);
    } else if (key == "model.regression_tasks") {
      cfg.regression_tasks = parse_int<int>(value);
    } else if (key == "model.accumulator_init") {
      cfg.accumulator_init = parse_double(value);
    } else if (key == "stream.feature_dim") {
      cfg.stream.feature_dim = parse_int<int>(value);
    } else if (key == "stream.days") {
      cfg.stream.num_days = parse_int<int>(value);
    } else if (key == "stream.examples_per_day") {
      cfg.stream.examples_per_day = parse_int<int>(value);
    } else if (key == "stream.components") {
      cfg.stream.mixture_components = parse_int<int>(value);
    } else if (key == "stream.drift_rate") {
      cfg.stream.drift_rate = parse_double(value);
    } else if (key == "stream.shift_events") {
      cfg.stream.shift_events = parse_shift_events(value);
    } else if (key == "stream.window_days") {
      cfg.stream.window_days = parse_int<int>(value);
    } else if (key == "stream.batch_size") {
      cfg.stream.batch_size = parse_int<int>(value);
    } else if (key == "stream.label_noise") {
      cfg.stream.label_noise = parse_double(value);
    } else if (key == "stream.seed") {
      cfg.stream.seed = parse_int<std::uint64_t>(value);
    } else if (key == "optim.rule") {
      auto m = optim::method_from_name(value);
      if (!m) throw UsageError("unknown rule: '" + std::string(value) + "'");
      cfg.rule = *m;
    } else if (key == "optim.gc_lambda") {
      cfg.gc_lambda = parse_double(value);
    } else if (key == "optim.agc_lambda") {
      cfg.agc_lambda = parse_double(value);
    } else if (key == "optim.lambda_rel") {
      cfg.lambda_rel = parse_double(value);
    } else if (key == "optim.lambda_abs") {
      cfg.lambda_abs = parse_double(value);
    } else if (key == "optim.lamb_mu") {
      cfg.lamb_mu = parse_double(value);
    } else if (key == "optim.lamb_phi_lower") {
      cfg.lamb_phi_lower = parse_double(value);
    } else if (key == "optim.lamb_phi_upper") {
      cfg.lamb_phi_upper = parse_double(value);
    } else if (key == "lr.base") {
      cfg.lr.base_lr = parse_double(value);
    } else if (key == "lr.warmup") {
      cfg.lr.warmup_steps = parse_int<std::int64_t>(value);
    } else if (key == "lr.multiplier") {
      cfg.lr.multiplier = parse_double(value);
    } else if (key == "run.steps") {
      cfg.steps = parse_int<std::int64_t>(value);
    } else if (key == "run.eval_every") {
      cfg.eval_every = parse_int<std::int64_t>(value);
    } else if (key == "run.eval_sample") {
      cfg.eval_sample = parse_int<std::int64_t>(value);
    } else if (key == "run.seed") {
      cfg.seed = parse_int<std::uint64_t>(value);
    } else if (key == "detector.baseline_window") {
      cfg.detector.baseline_window = parse_int<int>(value);
    } else if (key == "detector.smooth_window") {
      cfg.detector.smooth_window = parse_int<int>(value);
    } else if (key == "detector.jump_factor") {
      cfg.detector.jump_factor = parse_double(value);
    } else if (key == "detector.patience") {
      cfg.detector.patience = parse_int<std::int64_t>(value);
    } else if (key == "detector.auc_band") {
      cfg.detector.auc_band = parse_double(value);
    } else if (key == "quad.alphas") {
      cfg.quad_alphas = parse_double_list(value);
    } else if (key == "quad.w0") {
      cfg.quad_w0 = parse_double_list(value);
    } else if (key == "quad.diverge_loss") {
      cfg.quad_diverge_loss = parse_double(value);
    } else if (key == "ablate.tasks") {
      cfg.drop_tasks = parse_int_list(value);
    } else if (key == "ablate.features") {
      cfg.drop_features = parse_ranges(value);
    } else {
      throw UsageError("unknown config key: '" + std::string(key) + "'");
    }
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError("config key '" + std::string(key) + "': " + e.what());
  }
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    std::size_t eq = s.find('=');
    if (eq == std::string_view::npos)
      throw UsageError("config line " + std::to_string(lineno) +
                       ": expected key=value, got '" + std::string(s) + "'");
    apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path.string());
  return parse_config(in);
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.preset != "small" && cfg.preset != "large" && cfg.preset != "quad")
    throw UsageError("unknown preset: '" + cfg.preset + "'");
  if (cfg.steps < 0) throw UsageError("run.steps must be >= 0");
  if (cfg.eval_every < 1) throw UsageError("run.eval_every must be >= 1");
  if (cfg.eval_sample < 0) throw UsageError("run.eval_sample must be >= 0");
  if (!(cfg.lr.base_lr > 0.0) || !(cfg.lr.multiplier > 0.0) ||
      cfg.lr.warmup_steps < 0)
    throw UsageError("lr.base and lr.multiplier must be > 0, lr.warmup >= 0");
  if (!(cfg.accumulator_init > 0.0))
    throw UsageError("model.accumulator_init must be > 0");
  try {
    build_rule(cfg).validate();
    diagnostics::DivergenceDetector probe(cfg.detector);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }

  if (cfg.preset == "quad") {
    if (cfg.quad_alphas.empty())
      throw UsageError("quad.alphas must be non-empty");
    for (double a : cfg.quad_alphas)
      if (!(a > 0.0)) throw UsageError("quad.alphas must all be > 0");
    if (cfg.quad_w0.size() != cfg.quad_alphas.size())
      throw UsageError("quad.w0 must match quad.alphas in length");
    if (!(cfg.quad_diverge_loss > 0.0))
      throw UsageError("quad.diverge_loss must be > 0");
    if (!cfg.drop_tasks.empty() || !cfg.drop_features.empty())
      throw UsageError("ablation flags require a shared-bottom preset");
    return;
  }

  if (cfg.binary_tasks < 0 || cfg.regression_tasks < 0 ||
      cfg.binary_tasks + cfg.regression_tasks < 1)
    throw UsageError("need at least one task");
  const auto& sc = cfg.stream;
  if (sc.feature_dim < 1 || sc.num_days < 2 || sc.examples_per_day < 1 ||
      sc.mixture_components < 1 || sc.window_days < 1 || sc.batch_size < 1 ||
      sc.label_noise < 0.0)
    throw UsageError("invalid stream.* configuration");
  for (const auto& ev : sc.shift_events)
    if (ev.severity < 0.0) throw UsageError("shift severity must be >= 0");

  const int num_tasks = cfg.binary_tasks + cfg.regression_tasks;
  for (int k : cfg.drop_tasks)
    if (k < 0 || k >= num_tasks)
      throw UsageError("ablate.tasks index out of range: " + std::to_string(k));
  std::vector<int> unique_drops = cfg.drop_tasks;
  std::sort(unique_drops.begin(), unique_drops.end());
  unique_drops.erase(std::unique(unique_drops.begin(), unique_drops.end()),
                     unique_drops.end());
  if (static_cast<int>(unique_drops.size()) >= num_tasks)
    throw UsageError("ablation would drop every task");
  std::vector<bool> masked(static_cast<std::size_t>(sc.feature_dim), false);
  for (auto [lo, hi] : cfg.drop_features) {
    if (lo < 0 || hi < lo || hi >= sc.feature_dim)
      throw UsageError("ablate.features range out of bounds");
    for (int c = lo; c <= hi; ++c) masked[static_cast<std::size_t>(c)] = true;
  }
  if (!masked.empty() &&
      std::all_of(masked.begin(), masked.end(), [](bool b) { return b; }))
    throw UsageError("ablation would drop every feature");
}

namespace {

bool stats_equal(const diagnostics::LayerStats& a,
                 const diagnostics::LayerStats& b) {
  // ratio_g_w and clippy_measure are not CSV columns and are excluded here.
  return a.block_name == b.block_name && a.g_norm2 == b.g_norm2 &&
         a.g_norm_inf == b.g_norm_inf && a.w_norm2 == b.w_norm2 &&
         a.r_norm_inf == b.r_norm_inf && a.sigma_applied == b.sigma_applied;
}

bool rows_equal(const diagnostics::MetricsRow& a,
                const diagnostics::MetricsRow& b) {
  if (a.step != b.step || a.eta != b.eta || a.loss_total != b.loss_total ||
      a.task_losses != b.task_losses || a.aucs != b.aucs ||
      a.rmses != b.rmses || a.layers.size() != b.layers.size())
    return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (!stats_equal(a.layers[i], b.layers[i])) return false;
  return true;
}

}  // namespace

bool operator==(const Trace& a, const Trace& b) {
  if (!(a.schema == b.schema)) return false;
  if (a.verdict.state != b.verdict.state ||
      a.verdict.onset_step != b.verdict.onset_step)
    return false;
  if (a.rows.size() != b.rows.size()) return false;
  for (std::size_t i = 0; i < a.rows.size(); ++i)
    if (!rows_equal(a.rows[i], b.rows[i])) return false;
  return true;
}

namespace {

void run_quad(const ExperimentConfig& cfg, Trace& trace, RunSummary& summary,
              const StepAudit& audit) {
  const Index n = static_cast<Index>(cfg.quad_alphas.size());
  models::QuadraticModel model;
  model.alphas = Eigen::Map<const Vector>(cfg.quad_alphas.data(), n);
  Vector w = Eigen::Map<const Vector>(cfg.quad_w0.data(), n);
  optim::ClipRule rule = build_rule(cfg);
  optim::ParamBlock block =
      optim::make_block("w", {n}, cfg.accumulator_init);
  trace.schema.blocks = {"w"};
  summary.param_count = n;

  diagnostics::DivergenceVerdict verdict;
  verdict.warmup_incomplete = cfg.steps == 0;
  for (std::int64_t t = 0; t <= cfg.steps; ++t) {
    if (cfg.steps == 0) break;
    auto [loss, grad] = models::quad_loss_grad(model, w);
    if (!std::isfinite(loss)) {
      verdict.state = diagnostics::RunState::Full;
      verdict.onset_step = t;
      break;
    }
    block.w = w.array();
    Array g = grad.array();
    double eta = optim::lr_at(cfg.lr, t) * rule.lr_scale();
    optim::ClipDecision d = optim::clip_factor(rule, block, g, g, eta);
    bool record = (t % cfg.eval_every == 0) || t == cfg.steps;
    if (record) {
      diagnostics::MetricsRow row;
      row.step = t;
      row.eta = eta;
      row.loss_total = loss;
      row.layers.push_back(
          diagnostics::layer_stats(block, g, g, eta, rule, d));
      trace.rows.push_back(std::move(row));
    }
    if (loss > cfg.quad_diverge_loss) {
      verdict.state = diagnostics::RunState::Full;
      verdict.onset_step = t;
      break;
    }
    if (t == cfg.steps) break;
    if (audit.on_block) audit.on_block(t + 1, 0, block, g, g, d, eta);
    w.array() -= (eta * d.sigma) * g;
    summary.steps_completed = t + 1;
    if (!w.allFinite()) {
      verdict.state = diagnostics::RunState::Full;
      verdict.onset_step = t + 1;
      break;
    }
  }
  trace.verdict = verdict;
  summary.verdict = verdict;
}

void run_net(const ExperimentConfig& cfg, Trace& trace, RunSummary& summary,
             const StepAudit& audit) {
  auto tasks = models::default_tasks(cfg.binary_tasks, cfg.regression_tasks);
  for (int k : cfg.drop_tasks)
    tasks[static_cast<std::size_t>(k)].loss_weight = 0.0;
  const int num_tasks = static_cast<int>(tasks.size());

  datastream::StreamConfig scfg = cfg.stream;
  if (scfg.seed == 0) scfg.seed = mix64(cfg.seed, "stream");
  datastream::Stream stream(scfg, tasks);

  models::NetConfig ncfg;
  ncfg.input_dim = scfg.feature_dim;
  ncfg.hidden = models::preset_hidden(cfg.preset);
  ncfg.tasks = tasks;
  ncfg.seed = mix64(cfg.seed, "net");
  ncfg.accumulator_init = cfg.accumulator_init;
  models::SharedBottomNet net(ncfg);
  summary.param_count = net.param_count();

  optim::ClipRule rule = build_rule(cfg);
  optim::AdagradOptimizer opt(rule, cfg.lr);

  trace.schema.num_tasks = num_tasks;
  for (int k = 0; k < num_tasks; ++k) {
    if (tasks[static_cast<std::size_t>(k)].kind == models::TaskKind::Binary)
      trace.schema.auc_tasks.push_back(k);
    else
      trace.schema.rmse_tasks.push_back(k);
  }
  for (const auto& b : net.params()) trace.schema.blocks.push_back(b.name);

  std::vector<bool> masked(static_cast<std::size_t>(scfg.feature_dim), false);
  for (auto [lo, hi] : cfg.drop_features)
    for (int c = lo; c <= hi; ++c) masked[static_cast<std::size_t>(c)] = true;
  auto apply_mask = [&](Matrix& m) {
    for (std::size_t c = 0; c < masked.size(); ++c)
      if (masked[c]) m.col(static_cast<Index>(c)).setZero();
  };

  Matrix hold_x = stream.holdout().features;
  apply_mask(hold_x);
  const Index hold_n = hold_x.rows();
  const Index eval_n =
      cfg.eval_sample > 0 ? std::min<Index>(cfg.eval_sample, hold_n) : hold_n;

  diagnostics::DivergenceDetector detector(cfg.detector);

  // Holdout metrics for all tasks; detector only sees live binary tasks.
  auto eval_metrics = [&](Index n_rows, diagnostics::MetricsRow* row,
                          std::vector<std::optional<double>>* detector_aucs,
                          std::vector<std::optional<double>>* out_auc,
                          std::vector<std::optional<double>>* out_rmse) {
    models::ForwardCache cache = net.forward(hold_x.topRows(n_rows));
    if (!cache.finite) return false;
    for (int k : trace.schema.auc_tasks) {
      auto a = diagnostics::auc(
          cache.preds[static_cast<std::size_t>(k)],
          stream.holdout().labels[static_cast<std::size_t>(k)].head(n_rows));
      if (row) row->aucs.push_back(a);
      if (out_auc) out_auc->push_back(a);
      if (detector_aucs)
        detector_aucs->push_back(is_dropped(cfg.drop_tasks, k) ? std::nullopt
                                                               : a);
    }
    for (int k : trace.schema.rmse_tasks) {
      double r = diagnostics::rmse(
          cache.preds[static_cast<std::size_t>(k)],
          stream.holdout().labels[static_cast<std::size_t>(k)].head(n_rows));
      if (row) row->rmses.push_back(r);
      if (out_rmse) out_rmse->push_back(r);
    }
    return true;
  };

  const std::int64_t train_days = stream.train_days();
  const std::int64_t steps_per_day =
      cfg.steps > 0 ? (cfg.steps + train_days - 1) / train_days : 1;
  datastream::WindowSampler sampler(stream, steps_per_day, cfg.seed);

  std::vector<double> loss_sums(static_cast<std::size_t>(num_tasks), 0.0);
  std::int64_t steps_since_row = 0;

  for (std::int64_t t = 0; t < cfg.steps; ++t) {
    datastream::Batch batch = sampler.next();
    apply_mask(batch.features);
    models::ForwardCache cache = net.forward(batch.features);
    if (!cache.finite) {
      detector.flag_numeric_fault(t + 1);
      break;
    }
    auto losses = models::task_losses(cache.preds, batch.labels, tasks);
    for (int k = 0; k < num_tasks; ++k)
      loss_sums[static_cast<std::size_t>(k)] +=
          losses[static_cast<std::size_t>(k)];
    ++steps_since_row;

    optim::GradientSet grads = net.backward(cache, batch.labels);
    const bool will_record =
        ((t + 1) % cfg.eval_every == 0) || (t + 1 == cfg.steps);
    std::vector<diagnostics::LayerStats> row_layers;
    optim::BlockVisitor visitor = [&](std::size_t i,
                                      const optim::ParamBlock& block,
                                      const Array& g, const Array& r,
                                      const optim::ClipDecision& d,
                                      double eta) {
      if (audit.on_block) audit.on_block(t + 1, i, block, g, r, d, eta);
      if (will_record)
        row_layers.push_back(
            diagnostics::layer_stats(block, g, r, eta, rule, d));
    };
    optim::StepRecord rec = opt.step(net.params(), grads, t, visitor);
    if (rec.fault) {
      detector.flag_numeric_fault(t + 1);
      break;
    }
    summary.steps_completed = t + 1;

    if (will_record) {
      diagnostics::MetricsRow row;
      row.step = t + 1;
      row.eta = rec.eta;
      for (int k = 0; k < num_tasks; ++k)
        row.task_losses.push_back(loss_sums[static_cast<std::size_t>(k)] /
                                  static_cast<double>(steps_since_row));
      row.loss_total = models::total_loss(row.task_losses, tasks);
      std::vector<std::optional<double>> detector_aucs;
      if (!eval_metrics(eval_n, &row, &detector_aucs, nullptr, nullptr)) {
        detector.flag_numeric_fault(t + 1);
        break;
      }
      row.layers = std::move(row_layers);
      trace.rows.push_back(std::move(row));
      std::fill(loss_sums.begin(), loss_sums.end(), 0.0);
      steps_since_row = 0;
      detector.update(t + 1, trace.rows.back().loss_total, detector_aucs);
      if (detector.verdict().state == diagnostics::RunState::Full) break;
    }
  }

  trace.verdict = detector.verdict();
  summary.verdict = trace.verdict;
  if (summary.verdict.state != diagnostics::RunState::Full) {
    if (eval_metrics(hold_n, nullptr, nullptr, &summary.final_auc,
                     &summary.final_rmse)) {
      double auc_sum = 0.0;
      int auc_n = 0;
      for (std::size_t i = 0; i < trace.schema.auc_tasks.size(); ++i) {
        int k = trace.schema.auc_tasks[i];
        if (is_dropped(cfg.drop_tasks, k) || !summary.final_auc[i]) continue;
        auc_sum += *summary.final_auc[i];
        ++auc_n;
      }
      if (auc_n > 0) summary.mean_auc = auc_sum / auc_n;
      double rmse_sum = 0.0;
      int rmse_n = 0;
      for (std::size_t i = 0; i < trace.schema.rmse_tasks.size(); ++i) {
        int k = trace.schema.rmse_tasks[i];
        if (is_dropped(cfg.drop_tasks, k)) continue;
        rmse_sum += *summary.final_rmse[i];
        ++rmse_n;
      }
      if (rmse_n > 0) summary.mean_rmse = rmse_sum / rmse_n;
    }
  }
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, Trace* trace_out,
                          const StepAudit& audit) {
  validate_config(cfg);
  auto t0 = std::chrono::steady_clock::now();
  Trace local;
  Trace& trace = trace_out ? *trace_out : local;
  trace = Trace{};
  RunSummary summary;
  if (cfg.preset == "quad")
    run_quad(cfg, trace, summary, audit);
  else
    run_net(cfg, trace, summary, audit);
  summary.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return summary;
}

RunSummary ablation_run(const ExperimentConfig& cfg,
                        const std::vector<int>& drop_tasks,
                        const std::vector<std::pair<int, int>>& drop_features,
                        Trace* trace_out) {
  ExperimentConfig with = cfg;
  with.drop_tasks = drop_tasks;
  with.drop_features = drop_features;
  return run_experiment(with, trace_out);
}

void emit_csv(const Trace& trace, std::ostream& out) {
  out << "step,eta,loss_total";
  for (int k = 0; k < trace.schema.num_tasks; ++k) out << ",loss_task_" << k;
  for (int k : trace.schema.auc_tasks) out << ",auc_task_" << k;
  for (int k : trace.schema.rmse_tasks) out << ",rmse_task_" << k;
  for (const auto& b : trace.schema.blocks)
    out << ',' << b << "_g2," << b << "_ginf," << b << "_w2," << b << "_rinf,"
        << b << "_sigma";
  out << '\n';
  for (const auto& row : trace.rows) {
    if (row.task_losses.size() !=
            static_cast<std::size_t>(trace.schema.num_tasks) ||
        row.aucs.size() != trace.schema.auc_tasks.size() ||
        row.rmses.size() != trace.schema.rmse_tasks.size() ||
        row.layers.size() != trace.schema.blocks.size())
      throw std::logic_error("trace row does not match its schema");
    out << row.step << ',' << format_double(row.eta) << ','
        << format_double(row.loss_total);
    for (double v : row.task_losses) out << ',' << format_double(v);
    for (const auto& v : row.aucs)
      out << ',' << (v ? format_double(*v) : std::string());
    for (const auto& v : row.rmses)
      out << ',' << (v ? format_double(*v) : std::string());
    for (const auto& s : row.layers)
      out << ',' << format_double(s.g_norm2) << ','
          << format_double(s.g_norm_inf) << ',' << format_double(s.w_norm2)
          << ',' << format_double(s.r_norm_inf) << ','
          << format_double(s.sigma_applied);
    out << '\n';
  }
  out << "# verdict=" << diagnostics::run_state_name(trace.verdict.state)
      << " onset=" << trace.verdict.onset_step.value_or(-1) << '\n';
}

void emit_csv(const Trace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  emit_csv(trace, out);
  if (!out) throw std::runtime_error("failed writing: " + path.string());
}

namespace {

[[noreturn]] void csv_error(const std::string& what) {
  throw std::runtime_error("csv: " + what);
}

TraceSchema parse_header(std::string_view header) {
  auto cols = split(header, ',');
  TraceSchema schema;
  std::size_t i = 0;
  auto expect = [&](std::string_view name) {
    if (i >= cols.size() || cols[i] != name)
      csv_error("expected column '" + std::string(name) + "'");
    ++i;
  };
  expect("step");
  expect("eta");
  expect("loss_total");
  auto take_indexed = [&](std::string_view prefix, std::vector<int>* out,
                          bool contiguous) {
    int expected = 0;
    while (i < cols.size() && cols[i].starts_with(prefix)) {
      int k = parse_int<int>(cols[i].substr(prefix.size()));
      if (contiguous && k != expected) csv_error("non-contiguous task columns");
      if (out && !out->empty() && k <= out->back())
        csv_error("task columns out of order");
      if (out) out->push_back(k);
      ++expected;
      ++i;
    }
    return expected;
  };
  std::vector<int> loss_tasks;
  schema.num_tasks = take_indexed("loss_task_", &loss_tasks, true);
  take_indexed("auc_task_", &schema.auc_tasks, false);
  take_indexed("rmse_task_", &schema.rmse_tasks, false);
  while (i < cols.size()) {
    std::string_view c = cols[i];
    if (!c.ends_with("_g2")) csv_error("unexpected column '" + std::string(c) + "'");
    std::string stem(c.substr(0, c.size() - 3));
    const std::array<std::string, 5> want = {
        stem + "_g2", stem + "_ginf", stem + "_w2", stem + "_rinf",
        stem + "_sigma"};
    for (const auto& name : want) {
      if (i >= cols.size() || cols[i] != name)
        csv_error("bad block column group for '" + stem + "'");
      ++i;
    }
    schema.blocks.push_back(stem);
  }
  return schema;
}

}  // namespace

Trace load_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) csv_error("empty file");
  Trace trace;
  trace.schema = parse_header(trim(line));
  const std::size_t expected_cols = 3 +
      static_cast<std::size_t>(trace.schema.num_tasks) +
      trace.schema.auc_tasks.size() + trace.schema.rmse_tasks.size() +
      5 * trace.schema.blocks.size();
  bool saw_verdict = false;
  while (std::getline(in, line)) {
    std::string_view s = trim(line);
    if (s.empty()) continue;
    if (s.front() == '#') {
      constexpr std::string_view kPrefix = "# verdict=";
      if (!s.starts_with(kPrefix)) csv_error("unexpected comment line");
      auto rest = s.substr(kPrefix.size());
      std::size_t sp = rest.find(' ');
      if (sp == std::string_view::npos || !rest.substr(sp + 1).starts_with("onset="))
        csv_error("bad verdict line");
      auto state = diagnostics::run_state_from_name(rest.substr(0, sp));
      if (!state) csv_error("bad verdict state");
      trace.verdict.state = *state;
      std::int64_t onset = parse_int<std::int64_t>(rest.substr(sp + 7));
      if (onset >= 0) trace.verdict.onset_step = onset;
      saw_verdict = true;
      continue;
    }
    if (saw_verdict) csv_error("data after verdict line");
    auto cells = split(s, ',');
    if (cells.size() != expected_cols) csv_error("row column count mismatch");
    diagnostics::MetricsRow row;
    std::size_t i = 0;
    row.step = parse_int<std::int64_t>(cells[i++]);
    row.eta = parse_double(cells[i++]);
    row.loss_total = parse_double(cells[i++]);
    for (int k = 0; k < trace.schema.num_tasks; ++k)
      row.task_losses.push_back(parse_double(cells[i++]));
    for (std::size_t k = 0; k < trace.schema.auc_tasks.size(); ++k) {
      auto c = trim(cells[i++]);
      row.aucs.push_back(c.empty() ? std::optional<double>()
                                   : std::optional<double>(parse_double(c)));
    }
    for (std::size_t k = 0; k < trace.schema.rmse_tasks.size(); ++k) {
      auto c = trim(cells[i++]);
      row.rmses.push_back(c.empty() ? std::optional<double>()
                                    : std::optional<double>(parse_double(c)));
    }
    for (const auto& b : trace.schema.blocks) {
      diagnostics::LayerStats st;
      st.block_name = b;
      st.g_norm2 = parse_double(cells[i++]);
      st.g_norm_inf = parse_double(cells[i++]);
      st.w_norm2 = parse_double(cells[i++]);
      st.r_norm_inf = parse_double(cells[i++]);
      st.sigma_applied = parse_double(cells[i++]);
      st.ratio_g_w = st.g_norm2 / std::max(st.w_norm2, optim::kAgcWeightFloor);
      row.layers.push_back(std::move(st));
    }
    trace.rows.push_back(std::move(row));
  }
  if (!saw_verdict) csv_error("missing verdict line");
  return trace;
}

Trace load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path.string());
  return load_csv(in);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view method,
                          double multiplier, int replica) {
  std::uint64_t h = mix64(base, method);
  h = mix64(h ^ std::bit_cast<std::uint64_t>(multiplier));
  h = mix64(h ^ static_cast<std::uint64_t>(replica));
  return h;
}

GridResult compare_methods(const ExperimentConfig& base,
                           const std::vector<std::string>& methods,
                           const std::vector<double>& multipliers, int seeds,
                           const GridRunHook& hook) {
  if (methods.empty()) throw UsageError("grid needs at least one method");
  if (multipliers.empty()) throw UsageError("grid needs at least one multiplier");
  if (seeds < 1) throw UsageError("grid needs at least one seed");
  for (const auto& m : methods)
    if (!optim::method_from_name(m))
      throw UsageError("unknown method: '" + m + "'");

  GridResult grid;
  grid.methods = methods;
  grid.multipliers = multipliers;
  grid.seeds = seeds;
  for (const auto& method : methods) {
    for (double mult : multipliers) {
      GridCell cell;
      cell.method = method;
      cell.multiplier = mult;
      for (int rep = 0; rep < seeds; ++rep) {
        ExperimentConfig cfg = base;
        cfg.rule = *optim::method_from_name(method);
        cfg.lr.multiplier = mult;
        cfg.seed = derive_seed(base.seed, method, mult, rep);
        Trace trace;
        RunSummary s = run_experiment(cfg, &trace);
        if (hook) hook(method, mult, rep, cfg, s, trace);
        GridRunOutcome o;
        o.seed = cfg.seed;
        o.state = s.verdict.state;
        o.mean_auc = s.mean_auc;
        o.mean_rmse = s.mean_rmse;
        o.steps_completed = s.steps_completed;
        o.wall_seconds = s.wall_seconds;
        cell.runs.push_back(o);
      }
      double auc_sum = 0, auc_sq = 0, rmse_sum = 0, rmse_sq = 0;
      int auc_n = 0, rmse_n = 0;
      for (const auto& r : cell.runs) {
        if (r.state == diagnostics::RunState::Full) continue;
        ++cell.survivors;
        if (r.mean_auc) {
          auc_sum += *r.mean_auc;
          auc_sq += *r.mean_auc * *r.mean_auc;
          ++auc_n;
        }
        if (r.mean_rmse) {
          rmse_sum += *r.mean_rmse;
          rmse_sq += *r.mean_rmse * *r.mean_rmse;
          ++rmse_n;
        }
      }
      if (auc_n > 0) {
        cell.auc_mean = auc_sum / auc_n;
        cell.auc_std =
            std::sqrt(std::max(0.0, auc_sq / auc_n - *cell.auc_mean * *cell.auc_mean));
      }
      if (rmse_n > 0) {
        cell.rmse_mean = rmse_sum / rmse_n;
        cell.rmse_std = std::sqrt(
            std::max(0.0, rmse_sq / rmse_n - *cell.rmse_mean * *cell.rmse_mean));
      }
      grid.cells.push_back(std::move(cell));
    }
  }
  // Best multiplier per method: highest mean AUC among cells with at least
  // one survivor; falls back to lowest RMSE for regression-only setups.
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    std::size_t best = static_cast<std::size_t>(-1);
    for (std::size_t ci = 0; ci < multipliers.size(); ++ci) {
      GridCell& cell = grid.cells[mi * multipliers.size() + ci];
      if (cell.survivors == 0) continue;
      if (best == static_cast<std::size_t>(-1)) {
        best = mi * multipliers.size() + ci;
        continue;
      }
      const GridCell& cur = grid.cells[best];
      if (cell.auc_mean && cur.auc_mean) {
        if (*cell.auc_mean > *cur.auc_mean) best = mi * multipliers.size() + ci;
      } else if (cell.rmse_mean && cur.rmse_mean &&
                 *cell.rmse_mean < *cur.rmse_mean) {
        best = mi * multipliers.size() + ci;
      }
    }
    if (best != static_cast<std::size_t>(-1))
      grid.cells[best].best_for_method = true;
  }
  return grid;
}

std::string text_table(const GridResult& grid) {
  auto fmt4 = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return std::string(buf);
  };
  std::vector<std::array<std::string, 7>> rows;
  rows.push_back({"method", "mult", "survived", "auc", "auc_std", "rmse",
                  "rmse_std"});
  for (const auto& cell : grid.cells) {
    std::array<std::string, 7> r;
    r[0] = cell.method + (cell.best_for_method ? "*" : "");
    r[1] = format_multiplier(cell.multiplier) + "x";
    r[2] = std::to_string(cell.survivors) + "/" +
           std::to_string(static_cast<int>(cell.runs.size()));
    if (cell.survivors == 0) {
      r[3] = "diverged";
      r[4] = r[5] = r[6] = "-";
    } else {
      r[3] = cell.auc_mean ? fmt4(*cell.auc_mean) : "-";
      r[4] = cell.auc_std ? fmt4(*cell.auc_std) : "-";
      r[5] = cell.rmse_mean ? fmt4(*cell.rmse_mean) : "-";
      r[6] = cell.rmse_std ? fmt4(*cell.rmse_std) : "-";
    }
    rows.push_back(std::move(r));
  }
  std::array<std::size_t, 7> width{};
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c)
      width[c] = std::max(width[c], r[c].size());
  std::string out;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      out += r[c];
      if (c + 1 < r.size())
        out.append(width[c] - r[c].size() + 2, ' ');
    }
    out += '\n';
  }
  return out;
}

std::string to_json(const GridResult& grid) {
  nlohmann::json j;
  j["methods"] = grid.methods;
  j["multipliers"] = grid.multipliers;
  j["seeds"] = grid.seeds;
  j["cells"] = nlohmann::json::array();
  for (const auto& cell : grid.cells) {
    nlohmann::json c;
    c["method"] = cell.method;
    c["multiplier"] = cell.multiplier;
    c["survivors"] = cell.survivors;
    c["runs"] = nlohmann::json::array();
    for (const auto& r : cell.runs) {
      nlohmann::json rr;
      rr["seed"] = r.seed;
      rr["state"] = std::string(diagnostics::run_state_name(r.state));
      rr["mean_auc"] = r.mean_auc ? nlohmann::json(*r.mean_auc) : nullptr;
      rr["mean_rmse"] = r.mean_rmse ? nlohmann::json(*r.mean_rmse) : nullptr;
      rr["steps_completed"] = r.steps_completed;
      rr["wall_seconds"] = r.wall_seconds;
      c["runs"].push_back(std::move(rr));
    }
    c["auc_mean"] = cell.auc_mean ? nlohmann::json(*cell.auc_mean) : nullptr;
    c["auc_std"] = cell.auc_std ? nlohmann::json(*cell.auc_std) : nullptr;
    c["rmse_mean"] = cell.rmse_mean ? nlohmann::json(*cell.rmse_mean) : nullptr;
    c["rmse_std"] = cell.rmse_std ? nlohmann::json(*cell.rmse_std) : nullptr;
    c["diverged"] = cell.survivors == 0;
    c["best_for_method"] = cell.best_for_method;
    j["cells"].push_back(std::move(c));
  }
  return j.dump(2);
}

}  // namespace clipbench::harness
