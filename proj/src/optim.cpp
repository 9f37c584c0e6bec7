#include "clipbench/optim.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace clipbench::optim {

ParamBlock make_block(std::string name, std::vector<Index> shape,
                      double g_init) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw std::invalid_argument("block dimension must be positive");
    n *= d;
  }
  ParamBlock b;
  b.name = std::move(name);
  b.shape = std::move(shape);
  b.w = Array::Zero(n);
  b.G = Array::Constant(n, g_init);
  return b;
}

std::string_view method_name(ClipMethod m) {
  switch (m) {
    case ClipMethod::None: return "naive";
    case ClipMethod::GC: return "gc";
    case ClipMethod::AGC: return "agc";
    case ClipMethod::LAMB: return "lamb";
    case ClipMethod::Clippy: return "clippy";
  }
  return "naive";
}

std::optional<ClipMethod> method_from_name(std::string_view name) {
  if (name == "naive" || name == "none") return ClipMethod::None;
  if (name == "gc") return ClipMethod::GC;
  if (name == "agc") return ClipMethod::AGC;
  if (name == "lamb") return ClipMethod::LAMB;
  if (name == "clippy") return ClipMethod::Clippy;
  return std::nullopt;
}

ClipRule ClipRule::none() { return {}; }

ClipRule ClipRule::gc(double lambda) {
  ClipRule r;
  r.method = ClipMethod::GC;
  r.lambda = lambda;
  return r;
}

ClipRule ClipRule::agc(double lambda) {
  ClipRule r;
  r.method = ClipMethod::AGC;
  r.lambda = lambda;
  return r;
}

ClipRule ClipRule::lamb(double mu, double phi_lower, double phi_upper) {
  ClipRule r;
  r.method = ClipMethod::LAMB;
  r.mu = mu;
  r.phi_lower = phi_lower;
  r.phi_upper = phi_upper;
  return r;
}

ClipRule ClipRule::clippy(double rel, double abs) {
  ClipRule r;
  r.method = ClipMethod::Clippy;
  r.lambda_rel = rel;
  r.lambda_abs = abs;
  return r;
}

void ClipRule::validate() const {
  switch (method) {
    case ClipMethod::None:
      break;
    case ClipMethod::GC:
    case ClipMethod::AGC:
      if (!(lambda > 0.0))
        throw std::invalid_argument("clip threshold lambda must be > 0");
      break;
    case ClipMethod::LAMB:
      if (!(mu > 0.0)) throw std::invalid_argument("lamb mu must be > 0");
      if (!(phi_lower >= 0.0) || !(phi_upper >= phi_lower))
        throw std::invalid_argument("lamb clamp bounds must satisfy 0 <= lower <= upper");
      break;
    case ClipMethod::Clippy:
      if (!(lambda_rel >= 0.0) || !(lambda_abs > 0.0))
        throw std::invalid_argument(
            "clippy thresholds must satisfy lambda_rel >= 0, lambda_abs > 0");
      break;
  }
}

double lr_at(const LrSchedule& s, std::int64_t t) {
  double lr = s.base_lr * s.multiplier;
  if (s.warmup_steps > 0 && t + 1 < s.warmup_steps)
    lr *= static_cast<double>(t + 1) / static_cast<double>(s.warmup_steps);
  return lr;
}

std::optional<Array> adagrad_accumulate(ParamBlock& block, const Array& g) {
  if (g.size() != block.size())
    throw std::invalid_argument("gradient size does not match block");
  Array g2 = g.square();
  if (!g.allFinite() || !g2.allFinite()) return std::nullopt;
  block.G += g2;
  return Array(g / block.G.sqrt());
}

ClipDecision clip_factor_gc(double g_norm2, double lambda) {
  ClipDecision d;
  d.measurement = g_norm2;
  d.sigma = (g_norm2 <= lambda) ? 1.0 : lambda / g_norm2;
  return d;
}

ClipDecision clip_factor_agc(double g_norm2, double w_norm2, double lambda) {
  ClipDecision d;
  double w = std::max(w_norm2, kAgcWeightFloor);
  d.measurement = g_norm2 / w;
  d.sigma = (g_norm2 <= lambda * w) ? 1.0 : lambda * w / g_norm2;
  return d;
}

ClipDecision clip_factor_lamb(double r_norm2, double w_norm2,
                              const ClipRule& rule) {
  ClipDecision d;
  d.replaces_magnitude = true;
  d.measurement = r_norm2;
  double phi = std::min(std::max(w_norm2, rule.phi_lower), rule.phi_upper);
  d.sigma = (r_norm2 > 0.0) ? phi / r_norm2 : 0.0;
  return d;
}

ClipDecision clip_factor_clippy(const Array& w, const Array& r, double eta_t,
                                double lambda_rel, double lambda_abs) {
  ClipDecision d;
  // measurement = max_i eta*|r_i| / (lambda_rel*|w_i| + lambda_abs) over
  // coordinates with r_i != 0; sigma caps every coordinate's step at its
  // allowance, so sigma == 1 exactly when measurement <= 1.
  double worst = 0.0;
  Index binding = -1;
  for (Index i = 0; i < r.size(); ++i) {
    if (r[i] == 0.0) continue;
    double m = eta_t * std::abs(r[i]) / (lambda_rel * std::abs(w[i]) + lambda_abs);
    if (m > worst) {
      worst = m;
      binding = i;
    }
  }
  d.measurement = worst;
  if (binding >= 0 && worst > 1.0) {
    d.binding_coordinate = binding;
    d.sigma = (lambda_rel * std::abs(w[binding]) + lambda_abs) /
              (eta_t * std::abs(r[binding]));
  } else {
    d.sigma = 1.0;
    if (binding >= 0) d.binding_coordinate = binding;
  }
  return d;
}

ClipDecision clip_factor(const ClipRule& rule, const ParamBlock& block,
                         const Array& g, const Array& r, double eta_t) {
  switch (rule.method) {
    case ClipMethod::None: {
      ClipDecision d;
      d.sigma = 1.0;
      d.measurement = g.matrix().norm();
      return d;
    }
    case ClipMethod::GC:
      return clip_factor_gc(g.matrix().norm(), rule.lambda);
    case ClipMethod::AGC:
      return clip_factor_agc(g.matrix().norm(), block.w.matrix().norm(),
                             rule.lambda);
    case ClipMethod::LAMB:
      return clip_factor_lamb(r.matrix().norm(), block.w.matrix().norm(), rule);
    case ClipMethod::Clippy:
      return clip_factor_clippy(block.w, r, eta_t, rule.lambda_rel,
                                rule.lambda_abs);
  }
  return {};
}

bool apply_update(ParamBlock& block, const Array& r, double eta_t,
                  const ClipDecision& decision) {
  Array next = block.w - (eta_t * decision.sigma) * r;
  if (!next.allFinite()) return false;
  block.w = std::move(next);
  return true;
}

AdagradOptimizer::AdagradOptimizer(ClipRule rule, LrSchedule schedule)
    : rule_(rule), schedule_(schedule) {
  rule_.validate();
}

double AdagradOptimizer::effective_lr(std::int64_t t) const {
  return lr_at(schedule_, t) * rule_.lr_scale();
}

StepRecord AdagradOptimizer::step(ParamSet& params, const GradientSet& grads,
                                  std::int64_t t, const BlockVisitor& visitor) {
  if (grads.size() != params.size())
    throw std::invalid_argument("gradient set does not match parameter set");
  StepRecord rec;
  rec.eta = effective_lr(t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Array& g = grads[i];
    if (g.size() != params[i].size() || !g.allFinite() ||
        !g.square().allFinite()) {
      rec.fault = true;
      rec.decisions.clear();
      return rec;
    }
  }
  rec.decisions.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    ParamBlock& block = params[i];
    auto r = adagrad_accumulate(block, grads[i]);
    if (!r) {
      rec.fault = true;
      return rec;
    }
    ClipDecision d = clip_factor(rule_, block, grads[i], *r, rec.eta);
    if (visitor) visitor(i, block, grads[i], *r, d, rec.eta);
    if (!apply_update(block, *r, rec.eta, d)) {
      rec.decisions.push_back(d);
      rec.fault = true;
      return rec;
    }
    rec.decisions.push_back(d);
  }
  return rec;
}

}  // namespace clipbench::optim
