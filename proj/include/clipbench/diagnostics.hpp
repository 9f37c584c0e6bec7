#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "clipbench/optim.hpp"
#include "clipbench/types.hpp"

namespace clipbench::diagnostics {

// Snapshot of one block at one step, taken before the update is applied.
struct LayerStats {
  std::string block_name;
  double g_norm2 = 0.0;
  double g_norm_inf = 0.0;
  double w_norm2 = 0.0;
  double r_norm_inf = 0.0;
  double ratio_g_w = 0.0;       // g_norm2 / max(w_norm2, floor)
  double clippy_measure = 0.0;  // max_i eta*|r_i| / (rel*|w_i| + abs)
  double sigma_applied = 1.0;
};

LayerStats layer_stats(const optim::ParamBlock& block, const Array& g,
                       const Array& r, double eta_t,
                       const optim::ClipRule& rule,
                       const optim::ClipDecision& decision);

// Mann-Whitney AUC with tie averaging. Needs both classes present.
std::optional<double> auc(const Vector& scores, const Array& labels);

double rmse(const Vector& predictions, const Array& labels);

enum class RunState { Healthy, Micro, Full };

std::string_view run_state_name(RunState s);
std::optional<RunState> run_state_from_name(std::string_view name);

struct DivergenceVerdict {
  RunState state = RunState::Healthy;
  std::optional<std::int64_t> onset_step;
  std::optional<std::int64_t> recovered_step;  // micro only
  bool warmup_incomplete = false;  // trace shorter than the baseline window
};

struct DetectorParams {
  int baseline_window = 200;  // eval rows in the rolling baseline median
  int smooth_window = 3;      // eval rows in the loss-smoothing median
  double jump_factor = 3.0;
  std::int64_t patience = 500;  // steps, not eval rows
  double auc_band = 0.02;
  // The flat-AUC rule only fires after the task's AUC has once left the
  // band, so a model that has not learned yet is not declared dead.
  bool require_learned_auc = true;
};

// Feed one eval row at a time. Loss jumps against a pre-onset baseline
// median classify micro (recovers within patience) vs full (does not);
// an AUC pinned at 0.5 for a whole patience window is also full. Full is
// terminal: once declared, later rows change nothing.
class DivergenceDetector {
 public:
  explicit DivergenceDetector(DetectorParams params = {});

  void update(std::int64_t step, double loss,
              const std::vector<std::optional<double>>& binary_aucs);
  // Marks the run fully diverged right away (non-finite loss or update).
  void flag_numeric_fault(std::int64_t step);

  DivergenceVerdict verdict() const;
  double baseline() const;  // current baseline median, NaN before warmup

 private:
  struct AucTrack {
    bool left_band = false;
    std::optional<std::int64_t> pin_start;
  };

  DetectorParams params_;
  std::deque<double> smooth_;
  std::deque<double> baseline_;
  bool in_event_ = false;
  std::int64_t event_onset_ = 0;
  double frozen_baseline_ = 0.0;
  std::vector<AucTrack> auc_tracks_;
  DivergenceVerdict verdict_;
};

struct MetricsRow {
  std::int64_t step = 0;
  double eta = 0.0;
  double loss_total = 0.0;
  std::vector<double> task_losses;
  std::vector<std::optional<double>> aucs;   // one per binary task
  std::vector<std::optional<double>> rmses;  // one per regression task
  std::vector<LayerStats> layers;
};

}  // namespace clipbench::diagnostics
