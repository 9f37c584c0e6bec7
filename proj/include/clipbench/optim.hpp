#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "clipbench/types.hpp"

namespace clipbench::optim {

inline constexpr double kDefaultAccumulatorInit = 0.1;
inline constexpr double kAgcWeightFloor = 1e-6;

// One named parameter block (a layer's weight matrix or bias vector) plus
// its Adagrad accumulator. Blocks are the unit of local clipping.
struct ParamBlock {
  std::string name;
  std::vector<Index> shape;
  Array w;
  Array G;

  Index size() const { return w.size(); }
};

using ParamSet = std::vector<ParamBlock>;
using GradientSet = std::vector<Array>;

// Zero-initialized weights, accumulator filled with g_init.
ParamBlock make_block(std::string name, std::vector<Index> shape,
                      double g_init = kDefaultAccumulatorInit);

enum class ClipMethod { None, GC, AGC, LAMB, Clippy };

std::string_view method_name(ClipMethod m);
std::optional<ClipMethod> method_from_name(std::string_view name);

struct ClipRule {
  ClipMethod method = ClipMethod::None;
  double lambda = 0.1;       // GC / AGC threshold
  double lambda_rel = 0.5;   // Clippy relative threshold
  double lambda_abs = 1e-2;  // Clippy absolute threshold
  double mu = 1e-3;          // LAMB learning-rate scale
  double phi_lower = 0.0;    // LAMB weight-norm clamp
  double phi_upper = kInf;

  static ClipRule none();
  static ClipRule gc(double lambda = 1e-1);
  static ClipRule agc(double lambda = 1e-3);
  static ClipRule lamb(double mu = 1e-3, double phi_lower = 0.0,
                       double phi_upper = kInf);
  static ClipRule clippy(double rel = 0.5, double abs = 1e-2);

  // LAMB folds an extra factor into the learning rate; every other rule
  // leaves it alone.
  double lr_scale() const { return method == ClipMethod::LAMB ? mu : 1.0; }

  // Throws std::invalid_argument on out-of-range thresholds.
  void validate() const;
};

// The scalar a rule picked for one block at one step. For LAMB the scalar
// replaces the update magnitude instead of shrinking it, which is why the
// factor is not bounded by 1.
struct ClipDecision {
  double sigma = 1.0;
  double measurement = 0.0;
  std::optional<Index> binding_coordinate;
  bool replaces_magnitude = false;
};

struct LrSchedule {
  double base_lr = 0.05;
  std::int64_t warmup_steps = 0;
  double multiplier = 1.0;
};

double lr_at(const LrSchedule& s, std::int64_t t);

// G += g^2 elementwise, then returns r = g / sqrt(G). Returns nullopt and
// leaves the block untouched when g (or g^2) is not finite.
std::optional<Array> adagrad_accumulate(ParamBlock& block, const Array& g);

ClipDecision clip_factor_gc(double g_norm2, double lambda);
ClipDecision clip_factor_agc(double g_norm2, double w_norm2, double lambda);
ClipDecision clip_factor_lamb(double r_norm2, double w_norm2,
                              const ClipRule& rule);
ClipDecision clip_factor_clippy(const Array& w, const Array& r, double eta_t,
                                double lambda_rel, double lambda_abs);

// Dispatch on rule.method. r is the Adagrad-normalized update direction for
// this step; eta_t is the effective learning rate (schedule times lr_scale).
ClipDecision clip_factor(const ClipRule& rule, const ParamBlock& block,
                         const Array& g, const Array& r, double eta_t);

// w -= eta_t * sigma * r. Returns false and leaves the block untouched when
// the result would be non-finite.
bool apply_update(ParamBlock& block, const Array& r, double eta_t,
                  const ClipDecision& decision);

// Called once per block per step, before the update is applied, so `block`
// still holds the pre-update weights.
using BlockVisitor =
    std::function<void(std::size_t block_index, const ParamBlock& block,
                       const Array& g, const Array& r,
                       const ClipDecision& decision, double eta_t)>;

struct StepRecord {
  std::vector<ClipDecision> decisions;
  double eta = 0.0;
  bool fault = false;  // non-finite gradient or update; state left untouched
};

class AdagradOptimizer {
 public:
  AdagradOptimizer(ClipRule rule, LrSchedule schedule);

  const ClipRule& rule() const { return rule_; }
  const LrSchedule& schedule() const { return schedule_; }
  double effective_lr(std::int64_t t) const;

  // One optimizer step over all blocks. Gradients are validated up front;
  // a non-finite gradient faults the step with no state change anywhere.
  StepRecord step(ParamSet& params, const GradientSet& grads, std::int64_t t,
                  const BlockVisitor& visitor = {});

 private:
  ClipRule rule_;
  LrSchedule schedule_;
};

}  // namespace clipbench::optim
