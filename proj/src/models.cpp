#include "clipbench/models.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace clipbench::models {

std::pair<double, Vector> quad_loss_grad(const QuadraticModel& m,
                                         const Vector& w) {
  if (w.size() != m.alphas.size())
    throw std::invalid_argument("quadratic model dimension mismatch");
  double loss = 0.5 * (m.alphas.array() * w.array().square()).sum();
  Vector grad = m.alphas.array() * w.array();
  return {loss, std::move(grad)};
}

QuadRun quad_run_gd(const QuadraticModel& m, Vector w0, double eta,
                    const optim::ClipRule& rule, std::int64_t steps,
                    double diverge_loss) {
  QuadRun run;
  run.losses.reserve(static_cast<std::size_t>(steps));
  Vector w = std::move(w0);
  optim::ParamBlock block = optim::make_block("w", {w.size()}, 0.0);
  for (std::int64_t t = 0; t < steps; ++t) {
    auto [loss, grad] = quad_loss_grad(m, w);
    run.losses.push_back(loss);
    if (!std::isfinite(loss) || loss > diverge_loss) {
      run.diverged = true;
      run.onset = t;
      break;
    }
    block.w = w.array();
    Array g = grad.array();
    optim::ClipDecision d = optim::clip_factor(rule, block, g, g, eta);
    w.array() -= (eta * rule.lr_scale() * d.sigma) * g;
    if (!w.allFinite()) {
      run.diverged = true;
      run.onset = t + 1;
      break;
    }
  }
  run.final_w = std::move(w);
  return run;
}

double quad_stability_boundary(const QuadraticModel& m, const Vector& w0,
                               double lo, double hi, std::int64_t steps,
                               double diverge_loss, int iters) {
  auto diverges = [&](double eta) {
    return quad_run_gd(m, w0, eta, optim::ClipRule::none(), steps,
                       diverge_loss)
        .diverged;
  };
  if (diverges(lo) || !diverges(hi))
    throw std::invalid_argument("bisection bracket does not straddle the boundary");
  for (int i = 0; i < iters; ++i) {
    double mid = 0.5 * (lo + hi);
    (diverges(mid) ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<TaskHead> default_tasks(int binary, int regression) {
  std::vector<TaskHead> tasks;
  for (int i = 0; i < binary; ++i)
    tasks.push_back({TaskKind::Binary, 1.0});
  for (int i = 0; i < regression; ++i)
    tasks.push_back({TaskKind::Regression, 1.0});
  return tasks;
}

std::vector<int> preset_hidden(std::string_view preset) {
  if (preset == "small") return {64, 64};
  if (preset == "large") return {256, 256, 256, 256};
  throw std::invalid_argument("unknown model preset: " + std::string(preset));
}

namespace {

// He-uniform fan-in init, one rng stream per block so layouts are stable.
void fill_he_uniform(Array& w, Index fan_in, std::uint64_t seed) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Index i = 0; i < w.size(); ++i) w[i] = dist(rng);
}

Eigen::Map<const Matrix> as_matrix(const optim::ParamBlock& b) {
  return {b.w.data(), b.shape[0], b.shape[1]};
}

}  // namespace

SharedBottomNet::SharedBottomNet(NetConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.input_dim <= 0) throw std::invalid_argument("input_dim must be positive");
  if (cfg_.hidden.empty()) throw std::invalid_argument("at least one hidden layer required");
  if (cfg_.tasks.empty()) throw std::invalid_argument("at least one task required");
  int in = cfg_.input_dim;
  for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
    int out = cfg_.hidden[l];
    if (out <= 0) throw std::invalid_argument("hidden width must be positive");
    auto wb = optim::make_block("trunk" + std::to_string(l) + "_w", {out, in},
                                cfg_.accumulator_init);
    fill_he_uniform(wb.w, in, mix64(cfg_.seed, "trunk_w_" + std::to_string(l)));
    params_.push_back(std::move(wb));
    params_.push_back(optim::make_block("trunk" + std::to_string(l) + "_b",
                                        {out}, cfg_.accumulator_init));
    in = out;
  }
  for (std::size_t k = 0; k < cfg_.tasks.size(); ++k) {
    auto wb = optim::make_block("head" + std::to_string(k) + "_w", {1, in},
                                cfg_.accumulator_init);
    fill_he_uniform(wb.w, in, mix64(cfg_.seed, "head_w_" + std::to_string(k)));
    params_.push_back(std::move(wb));
    params_.push_back(optim::make_block("head" + std::to_string(k) + "_b", {1},
                                        cfg_.accumulator_init));
  }
}

Index SharedBottomNet::param_count() const {
  Index n = 0;
  for (const auto& b : params_) n += b.size();
  return n;
}

std::size_t SharedBottomNet::trunk_weight_index(int layer) const {
  return 2 * static_cast<std::size_t>(layer);
}
std::size_t SharedBottomNet::trunk_bias_index(int layer) const {
  return 2 * static_cast<std::size_t>(layer) + 1;
}
std::size_t SharedBottomNet::head_weight_index(int task) const {
  return 2 * cfg_.hidden.size() + 2 * static_cast<std::size_t>(task);
}
std::size_t SharedBottomNet::head_bias_index(int task) const {
  return head_weight_index(task) + 1;
}

Matrix SharedBottomNet::trunk_weight(int layer) const {
  return as_matrix(params_[trunk_weight_index(layer)]);
}
Vector SharedBottomNet::trunk_bias(int layer) const {
  return params_[trunk_bias_index(layer)].w.matrix();
}
Vector SharedBottomNet::head_weight(int task) const {
  const auto& b = params_[head_weight_index(task)];
  return b.w.matrix();
}
double SharedBottomNet::head_bias(int task) const {
  return params_[head_bias_index(task)].w[0];
}

void SharedBottomNet::set_trunk_weight(int layer, const Matrix& W) {
  auto& b = params_[trunk_weight_index(layer)];
  if (W.rows() != b.shape[0] || W.cols() != b.shape[1])
    throw std::invalid_argument("trunk weight shape mismatch");
  Eigen::Map<Matrix>(b.w.data(), W.rows(), W.cols()) = W;
}
void SharedBottomNet::set_trunk_bias(int layer, const Vector& v) {
  auto& b = params_[trunk_bias_index(layer)];
  if (v.size() != b.size()) throw std::invalid_argument("trunk bias shape mismatch");
  b.w = v.array();
}
void SharedBottomNet::set_head_weight(int task, const Vector& v) {
  auto& b = params_[head_weight_index(task)];
  if (v.size() != b.size()) throw std::invalid_argument("head weight shape mismatch");
  b.w = v.array();
}
void SharedBottomNet::set_head_bias(int task, double v) {
  params_[head_bias_index(task)].w[0] = v;
}

ForwardCache SharedBottomNet::forward(const Matrix& features) const {
  if (features.cols() != cfg_.input_dim)
    throw std::invalid_argument("feature dimension mismatch");
  ForwardCache cache;
  cache.input = &features;
  const Matrix* x = &features;
  for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
    const auto& wb = params_[trunk_weight_index(static_cast<int>(l))];
    const auto& bb = params_[trunk_bias_index(static_cast<int>(l))];
    Eigen::Map<const Matrix> W(wb.w.data(), wb.shape[0], wb.shape[1]);
    Matrix pre = (*x) * W.transpose();
    pre.rowwise() += bb.w.matrix().transpose();
    cache.act.push_back(pre.cwiseMax(0.0));
    cache.pre.push_back(std::move(pre));
    x = &cache.act.back();
  }
  const Matrix& top = cache.act.back();
  for (std::size_t k = 0; k < cfg_.tasks.size(); ++k) {
    const auto& wb = params_[head_weight_index(static_cast<int>(k))];
    double bias = params_[head_bias_index(static_cast<int>(k))].w[0];
    Vector logit = top * wb.w.matrix();
    logit.array() += bias;
    if (!logit.allFinite()) cache.finite = false;
    if (cfg_.tasks[k].kind == TaskKind::Binary) {
      Vector p = (1.0 / (1.0 + (-logit.array()).exp())).matrix();
      if (!p.allFinite()) cache.finite = false;
      cache.preds.push_back(std::move(p));
    } else {
      cache.preds.push_back(logit);
    }
    cache.logits.push_back(std::move(logit));
  }
  return cache;
}

optim::GradientSet SharedBottomNet::backward(
    const ForwardCache& cache, const std::vector<Array>& labels) const {
  if (labels.size() != cfg_.tasks.size())
    throw std::invalid_argument("label set does not match task list");
  const Index B = cache.input->rows();
  const std::size_t L = cfg_.hidden.size();
  optim::GradientSet grads(params_.size());

  // dL/dlogit per task, averaged over the batch and loss-weighted.
  Matrix trunk_delta = Matrix::Zero(B, cfg_.hidden.back());
  for (std::size_t k = 0; k < cfg_.tasks.size(); ++k) {
    const TaskHead& task = cfg_.tasks[k];
    const Vector& pred = cache.preds[k];
    if (labels[k].size() != B)
      throw std::invalid_argument("label batch size mismatch");
    Vector delta(B);
    if (task.kind == TaskKind::Binary) {
      for (Index i = 0; i < B; ++i) {
        double p = pred[i];
        bool live = p > kProbClampLo && p < kProbClampHi;
        delta[i] = live ? (p - labels[k][i]) : 0.0;
      }
    } else {
      delta = 2.0 * (pred.array() - labels[k]).matrix();
    }
    delta *= task.loss_weight / static_cast<double>(B);
    const auto& wb = params_[head_weight_index(static_cast<int>(k))];
    grads[head_weight_index(static_cast<int>(k))] =
        (cache.act.back().transpose() * delta).array();
    grads[head_bias_index(static_cast<int>(k))] = Array::Constant(1, delta.sum());
    trunk_delta.noalias() += delta * wb.w.matrix().transpose();
  }

  for (std::size_t l = L; l-- > 0;) {
    trunk_delta.array() *= (cache.pre[l].array() > 0.0).cast<double>();
    const Matrix& below =
        (l == 0) ? *cache.input : cache.act[l - 1];
    Matrix gw = trunk_delta.transpose() * below;
    grads[trunk_weight_index(static_cast<int>(l))] =
        Eigen::Map<const Array>(gw.data(), gw.size());
    grads[trunk_bias_index(static_cast<int>(l))] =
        trunk_delta.colwise().sum().transpose().array();
    if (l > 0) {
      const auto& wb = params_[trunk_weight_index(static_cast<int>(l))];
      Eigen::Map<const Matrix> W(wb.w.data(), wb.shape[0], wb.shape[1]);
      trunk_delta = trunk_delta * W;
    }
  }
  return grads;
}

std::vector<double> task_losses(const std::vector<Vector>& preds,
                                const std::vector<Array>& labels,
                                const std::vector<TaskHead>& tasks) {
  if (preds.size() != tasks.size() || labels.size() != tasks.size())
    throw std::invalid_argument("prediction/label/task arity mismatch");
  std::vector<double> out(tasks.size());
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const Index B = preds[k].size();
    if (labels[k].size() != B)
      throw std::invalid_argument("label batch size mismatch");
    double sum = 0.0;
    if (tasks[k].kind == TaskKind::Binary) {
      for (Index i = 0; i < B; ++i) {
        double p = std::min(std::max(preds[k][i], kProbClampLo), kProbClampHi);
        double y = labels[k][i];
        sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
      }
    } else {
      sum = (preds[k].array() - labels[k]).square().sum();
    }
    out[k] = sum / static_cast<double>(B);
  }
  return out;
}

double total_loss(const std::vector<double>& per_task,
                  const std::vector<TaskHead>& tasks) {
  double total = 0.0;
  for (std::size_t k = 0; k < tasks.size(); ++k)
    total += tasks[k].loss_weight * per_task[k];
  return total;
}

}  // namespace clipbench::models
