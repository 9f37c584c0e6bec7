#include "clipbench/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace clipbench::diagnostics {

LayerStats layer_stats(const optim::ParamBlock& block, const Array& g,
                       const Array& r, double eta_t,
                       const optim::ClipRule& rule,
                       const optim::ClipDecision& decision) {
  LayerStats s;
  s.block_name = block.name;
  s.g_norm2 = g.matrix().norm();
  s.g_norm_inf = g.size() > 0 ? g.abs().maxCoeff() : 0.0;
  s.w_norm2 = block.w.matrix().norm();
  s.r_norm_inf = r.size() > 0 ? r.abs().maxCoeff() : 0.0;
  s.ratio_g_w = s.g_norm2 / std::max(s.w_norm2, optim::kAgcWeightFloor);
  double rel = rule.lambda_rel, abs = rule.lambda_abs;
  if (rule.method != optim::ClipMethod::Clippy) {
    rel = 0.5;
    abs = 1e-2;
  }
  optim::ClipDecision probe =
      optim::clip_factor_clippy(block.w, r, eta_t, rel, abs);
  s.clippy_measure = probe.measurement;
  s.sigma_applied = decision.sigma;
  return s;
}

std::optional<double> auc(const Vector& scores, const Array& labels) {
  const Index n = scores.size();
  if (labels.size() != n) throw std::invalid_argument("auc input size mismatch");
  Index pos = 0;
  for (Index i = 0; i < n; ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0)
      throw std::invalid_argument("auc labels must be 0 or 1");
    if (labels[i] == 1.0) ++pos;
  }
  const Index neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(),
            [&](Index a, Index b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() &&
           scores[order[j + 1]] == scores[order[i]])
      ++j;
    double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1.0) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  double p = static_cast<double>(pos);
  double q = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

double rmse(const Vector& predictions, const Array& labels) {
  if (labels.size() != predictions.size())
    throw std::invalid_argument("rmse input size mismatch");
  if (predictions.size() == 0) throw std::invalid_argument("rmse of empty set");
  return std::sqrt((predictions.array() - labels).square().mean());
}

std::string_view run_state_name(RunState s) {
  switch (s) {
    case RunState::Healthy: return "healthy";
    case RunState::Micro: return "micro";
    case RunState::Full: return "full";
  }
  return "healthy";
}

std::optional<RunState> run_state_from_name(std::string_view name) {
  if (name == "healthy") return RunState::Healthy;
  if (name == "micro") return RunState::Micro;
  if (name == "full") return RunState::Full;
  return std::nullopt;
}

namespace {

double median_of(const std::deque<double>& v) {
  std::vector<double> tmp(v.begin(), v.end());
  std::size_t mid = tmp.size() / 2;
  std::nth_element(tmp.begin(), tmp.begin() + mid, tmp.end());
  double hi = tmp[mid];
  if (tmp.size() % 2 == 1) return hi;
  double lo = *std::max_element(tmp.begin(), tmp.begin() + mid);
  return 0.5 * (lo + hi);
}

}  // namespace

DivergenceDetector::DivergenceDetector(DetectorParams params)
    : params_(params) {
  if (params_.baseline_window < 1 || params_.smooth_window < 1 ||
      params_.jump_factor <= 1.0 || params_.patience < 1 ||
      params_.auc_band < 0.0)
    throw std::invalid_argument("invalid detector parameters");
  verdict_.warmup_incomplete = true;
}

double DivergenceDetector::baseline() const {
  if (in_event_) return frozen_baseline_;
  if (baseline_.size() < static_cast<std::size_t>(params_.baseline_window))
    return std::numeric_limits<double>::quiet_NaN();
  return median_of(baseline_);
}

void DivergenceDetector::flag_numeric_fault(std::int64_t step) {
  if (verdict_.state == RunState::Full) return;
  verdict_.state = RunState::Full;
  verdict_.onset_step = step;
  verdict_.recovered_step.reset();
}

void DivergenceDetector::update(
    std::int64_t step, double loss,
    const std::vector<std::optional<double>>& binary_aucs) {
  if (verdict_.state == RunState::Full) return;
  if (!std::isfinite(loss)) {
    flag_numeric_fault(step);
    return;
  }

  smooth_.push_back(loss);
  if (smooth_.size() > static_cast<std::size_t>(params_.smooth_window))
    smooth_.pop_front();
  double smoothed = median_of(smooth_);

  bool warm =
      baseline_.size() >= static_cast<std::size_t>(params_.baseline_window);
  if (warm) {
    verdict_.warmup_incomplete = false;
    if (!in_event_) {
      double base = median_of(baseline_);
      if (smoothed > base * params_.jump_factor) {
        in_event_ = true;
        event_onset_ = step;
        frozen_baseline_ = base;
      }
    }
    if (in_event_) {
      bool recovered = smoothed <= frozen_baseline_ * params_.jump_factor;
      if (step - event_onset_ > params_.patience && !recovered) {
        verdict_.state = RunState::Full;
        verdict_.onset_step = event_onset_;
        verdict_.recovered_step.reset();
        return;
      }
      if (recovered) {
        if (step - event_onset_ <= params_.patience) {
          if (verdict_.state == RunState::Healthy) {
            verdict_.state = RunState::Micro;
            verdict_.onset_step = event_onset_;
            verdict_.recovered_step = step;
          }
        } else {
          verdict_.state = RunState::Full;
          verdict_.onset_step = event_onset_;
          verdict_.recovered_step.reset();
          return;
        }
        in_event_ = false;
      }
    }
  }
  if (!in_event_) {
    baseline_.push_back(loss);
    if (baseline_.size() > static_cast<std::size_t>(params_.baseline_window))
      baseline_.pop_front();
  }

  if (auc_tracks_.size() < binary_aucs.size())
    auc_tracks_.resize(binary_aucs.size());
  if (!warm) return;
  for (std::size_t t = 0; t < binary_aucs.size(); ++t) {
    if (!binary_aucs[t]) continue;
    AucTrack& track = auc_tracks_[t];
    bool in_band = std::abs(*binary_aucs[t] - 0.5) <= params_.auc_band;
    if (!in_band) {
      track.left_band = true;
      track.pin_start.reset();
      continue;
    }
    if (!track.pin_start) track.pin_start = step;
    bool armed = track.left_band || !params_.require_learned_auc;
    if (armed && step - *track.pin_start >= params_.patience) {
      verdict_.state = RunState::Full;
      verdict_.onset_step = *track.pin_start;
      verdict_.recovered_step.reset();
      return;
    }
  }
}

DivergenceVerdict DivergenceDetector::verdict() const { return verdict_; }

}  // namespace clipbench::diagnostics
