#pragma once

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

#include "clipbench/optim.hpp"
#include "clipbench/types.hpp"

namespace clipbench::models {

// ---------------------------------------------------------------------------
// Quadratic testbed: L(w) = 1/2 sum_i alpha_i w_i^2, gradient alpha_i w_i.
// Plain gradient descent on it is stable iff eta < 2 / max(alpha).
// ---------------------------------------------------------------------------

struct QuadraticModel {
  Vector alphas;
};

std::pair<double, Vector> quad_loss_grad(const QuadraticModel& m,
                                         const Vector& w);

struct QuadRun {
  std::vector<double> losses;  // loss at each visited iterate, pre-update
  bool diverged = false;
  std::int64_t onset = -1;  // first step whose loss crossed the threshold
  Vector final_w;
};

// Plain GD (no Adagrad) with an optional clipping rule applied to the raw
// gradient. Stops early once loss exceeds diverge_loss or goes non-finite.
QuadRun quad_run_gd(const QuadraticModel& m, Vector w0, double eta,
                    const optim::ClipRule& rule, std::int64_t steps,
                    double diverge_loss = 1e3);

// Bisection on eta between a stable lo and an unstable hi.
double quad_stability_boundary(const QuadraticModel& m, const Vector& w0,
                               double lo, double hi, std::int64_t steps = 200,
                               double diverge_loss = 1e3, int iters = 50);

// ---------------------------------------------------------------------------
// Shared-bottom multitask net: ReLU trunk, one linear head per task.
// Binary heads read through a sigmoid and train with cross-entropy; the
// probability is clamped to [1e-7, 1 - 1e-7] and the gradient is masked to
// zero wherever the clamp is active, so the analytic gradient is exactly the
// gradient of the clamped loss.
// ---------------------------------------------------------------------------

inline constexpr double kProbClampLo = 1e-7;
inline constexpr double kProbClampHi = 1.0 - 1e-7;

enum class TaskKind { Binary, Regression };

struct TaskHead {
  TaskKind kind = TaskKind::Binary;
  double loss_weight = 1.0;
};

// Four binary heads followed by two regression heads, all weight 1.
std::vector<TaskHead> default_tasks(int binary = 4, int regression = 2);

// "small" -> {64, 64}, "large" -> {256, 256, 256, 256}.
std::vector<int> preset_hidden(std::string_view preset);

struct NetConfig {
  int input_dim = 32;
  std::vector<int> hidden = {64, 64};
  std::vector<TaskHead> tasks = default_tasks();
  std::uint64_t seed = 0;
  double accumulator_init = optim::kDefaultAccumulatorInit;
};

struct ForwardCache {
  const Matrix* input = nullptr;
  std::vector<Matrix> pre;   // trunk pre-activations, one per hidden layer
  std::vector<Matrix> act;   // trunk post-ReLU activations
  std::vector<Vector> logits;
  std::vector<Vector> preds;  // sigmoid(logit) for binary, logit as-is else
  bool finite = true;
};

class SharedBottomNet {
 public:
  explicit SharedBottomNet(NetConfig cfg);

  const NetConfig& config() const { return cfg_; }
  optim::ParamSet& params() { return params_; }
  const optim::ParamSet& params() const { return params_; }
  Index param_count() const;

  // Blocks are laid out trunk-first: trunk0_w, trunk0_b, trunk1_w, ...,
  // then head<k>_w, head<k>_b per task.
  std::size_t trunk_weight_index(int layer) const;
  std::size_t trunk_bias_index(int layer) const;
  std::size_t head_weight_index(int task) const;
  std::size_t head_bias_index(int task) const;

  Matrix trunk_weight(int layer) const;
  Vector trunk_bias(int layer) const;
  Vector head_weight(int task) const;
  double head_bias(int task) const;

  void set_trunk_weight(int layer, const Matrix& W);
  void set_trunk_bias(int layer, const Vector& b);
  void set_head_weight(int task, const Vector& v);
  void set_head_bias(int task, double b);

  ForwardCache forward(const Matrix& features) const;
  optim::GradientSet backward(const ForwardCache& cache,
                              const std::vector<Array>& labels) const;

 private:
  NetConfig cfg_;
  optim::ParamSet params_;
};

// Per-task mean losses on one batch (cross-entropy of the clamped
// probability for binary heads, mean squared error for regression heads).
// Loss weights do not enter here; total_loss applies them.
std::vector<double> task_losses(const std::vector<Vector>& preds,
                                const std::vector<Array>& labels,
                                const std::vector<TaskHead>& tasks);

double total_loss(const std::vector<double>& per_task,
                  const std::vector<TaskHead>& tasks);

}  // namespace clipbench::models
