#include <doctest.h>

#include <cmath>
#include <random>

#include "clipbench/models.hpp"

using namespace clipbench;
using namespace clipbench::models;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Index rows, Index cols, double lo,
                     double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

std::vector<Array> random_labels(std::mt19937_64& rng,
                                 const std::vector<TaskHead>& tasks, Index b) {
  std::uniform_real_distribution<double> real(-2.0, 2.0);
  std::bernoulli_distribution coin(0.5);
  std::vector<Array> labels;
  for (const auto& task : tasks) {
    Array y(b);
    for (Index i = 0; i < b; ++i)
      y[i] = task.kind == TaskKind::Binary ? (coin(rng) ? 1.0 : 0.0)
                                           : real(rng);
    labels.push_back(std::move(y));
  }
  return labels;
}

double net_loss(SharedBottomNet& net, const Matrix& x,
                const std::vector<Array>& labels) {
  ForwardCache cache = net.forward(x);
  return total_loss(task_losses(cache.preds, labels, net.config().tasks),
                    net.config().tasks);
}

}  // namespace

TEST_CASE("quadratic loss and gradient oracles") {
  QuadraticModel m;
  m.alphas = Vector(2);
  m.alphas << 20.0, 1.0;
  Vector w(2);
  w << 1.0, 1.0;
  auto [loss, grad] = quad_loss_grad(m, w);
  CHECK(loss == doctest::Approx(10.5).epsilon(1e-15));
  CHECK(grad[0] == doctest::Approx(20.0).epsilon(1e-15));
  CHECK(grad[1] == doctest::Approx(1.0).epsilon(1e-15));
  auto [l0, g0] = quad_loss_grad(m, Vector::Zero(2));
  CHECK(l0 == 0.0);
  CHECK(g0.norm() == 0.0);
}

TEST_CASE("plain gd matches the closed-form iterate") {
  QuadraticModel m;
  m.alphas = Vector(2);
  m.alphas << 20.0, 1.0;
  Vector w0(2);
  w0 << 1.0, 1.0;
  const double eta = 0.09;
  QuadRun run = quad_run_gd(m, w0, eta, optim::ClipRule::none(), 50);
  CHECK_FALSE(run.diverged);
  for (std::size_t t = 0; t < run.losses.size(); ++t) {
    double expected = 0.0;
    for (Index i = 0; i < 2; ++i) {
      double wi = std::pow(1.0 - eta * m.alphas[i], static_cast<double>(t)) *
                  w0[i];
      expected += 0.5 * m.alphas[i] * wi * wi;
    }
    CHECK(run.losses[t] == doctest::Approx(expected).epsilon(1e-12));
  }
  for (Index i = 0; i < 2; ++i)
    CHECK(run.final_w[i] ==
          doctest::Approx(std::pow(1.0 - eta * m.alphas[i], 50.0) * w0[i])
              .epsilon(1e-12));
}

TEST_CASE("stability boundary at 2 over max alpha") {
  QuadraticModel m;
  m.alphas = Vector(2);
  m.alphas << 20.0, 1.0;
  Vector w0(2);
  w0 << 1.0, 1.0;
  QuadRun conv = quad_run_gd(m, w0, 0.09, optim::ClipRule::none(), 500);
  CHECK_FALSE(conv.diverged);
  CHECK(conv.losses.back() < 1e-6);
  QuadRun div = quad_run_gd(m, w0, 0.11, optim::ClipRule::none(), 200);
  CHECK(div.diverged);
  CHECK(div.onset >= 0);
  // 5% margin on each side of 2/20.
  CHECK_FALSE(quad_run_gd(m, w0, 0.095, optim::ClipRule::none(), 200).diverged);
  CHECK(quad_run_gd(m, w0, 0.105, optim::ClipRule::none(), 200).diverged);
  double boundary = quad_stability_boundary(m, w0, 0.05, 0.2);
  CHECK(boundary == doctest::Approx(0.1).epsilon(0.05));
  CHECK_THROWS(quad_stability_boundary(m, w0, 0.11, 0.2));
}

TEST_CASE("gradient clipping stabilizes the unstable quadratic") {
  QuadraticModel m;
  m.alphas = Vector(2);
  m.alphas << 20.0, 1.0;
  Vector w0(2);
  w0 << 1.0, 1.0;
  QuadRun gc = quad_run_gd(m, w0, 0.11, optim::ClipRule::gc(0.1), 200);
  CHECK_FALSE(gc.diverged);
  QuadRun clippy = quad_run_gd(m, w0, 0.11, optim::ClipRule::clippy(), 200);
  CHECK_FALSE(clippy.diverged);
}

TEST_CASE("presets and default task mix") {
  CHECK(preset_hidden("small") == std::vector<int>{64, 64});
  CHECK(preset_hidden("large") == std::vector<int>{256, 256, 256, 256});
  CHECK_THROWS(preset_hidden("huge"));
  auto tasks = default_tasks();
  REQUIRE(tasks.size() == 6);
  for (int k = 0; k < 4; ++k) CHECK(tasks[k].kind == TaskKind::Binary);
  for (int k = 4; k < 6; ++k) CHECK(tasks[k].kind == TaskKind::Regression);
  for (const auto& t : tasks) CHECK(t.loss_weight == 1.0);
}

TEST_CASE("zero net predicts one half on binary heads") {
  NetConfig cfg;
  cfg.input_dim = 3;
  cfg.hidden = {4};
  cfg.tasks = default_tasks(2, 1);
  cfg.seed = 1;
  SharedBottomNet net(cfg);
  for (auto& block : net.params()) block.w.setZero();
  std::mt19937_64 rng(2);
  Matrix x = random_matrix(rng, 5, 3, -1.0, 1.0);
  ForwardCache cache = net.forward(x);
  CHECK(cache.finite);
  CHECK((cache.preds[0].array() == 0.5).all());
  CHECK((cache.preds[1].array() == 0.5).all());
  CHECK((cache.preds[2].array() == 0.0).all());
}

TEST_CASE("identity trunk with a selector head passes the input through") {
  NetConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden = {4};
  cfg.tasks = {{TaskKind::Regression, 1.0}};
  cfg.seed = 3;
  SharedBottomNet net(cfg);
  net.set_trunk_weight(0, Matrix::Identity(4, 4));
  net.set_trunk_bias(0, Vector::Zero(4));
  Vector sel = Vector::Zero(4);
  sel[0] = 1.0;
  net.set_head_weight(0, sel);
  net.set_head_bias(0, 0.0);
  std::mt19937_64 rng(4);
  Matrix x = random_matrix(rng, 6, 4, 0.1, 2.0);  // positive: ReLU inactive
  ForwardCache cache = net.forward(x);
  CHECK((cache.preds[0].array() == x.col(0).array()).all());
}

TEST_CASE("forward replay is bit-identical") {
  NetConfig cfg;
  cfg.input_dim = 7;
  cfg.hidden = {16, 16};
  cfg.seed = 99;
  SharedBottomNet net_a(cfg);
  SharedBottomNet net_b(cfg);
  std::mt19937_64 rng(5);
  Matrix x = random_matrix(rng, 9, 7, -2.0, 2.0);
  ForwardCache ca = net_a.forward(x);
  ForwardCache cb = net_b.forward(x);
  ForwardCache ca2 = net_a.forward(x);
  for (std::size_t k = 0; k < ca.preds.size(); ++k) {
    CHECK((ca.preds[k].array() == cb.preds[k].array()).all());
    CHECK((ca.preds[k].array() == ca2.preds[k].array()).all());
  }
}

TEST_CASE("non-finite activations are flagged") {
  NetConfig cfg;
  cfg.input_dim = 2;
  cfg.hidden = {2};
  cfg.tasks = {{TaskKind::Regression, 1.0}};
  cfg.seed = 6;
  SharedBottomNet net(cfg);
  net.params()[0].w = Array::Constant(4, 1e308);
  Matrix x = Matrix::Constant(1, 2, 1e10);
  CHECK_FALSE(net.forward(x).finite);
}

TEST_CASE("task loss oracles") {
  std::vector<TaskHead> tasks = {{TaskKind::Binary, 1.0},
                                 {TaskKind::Regression, 1.0}};
  std::vector<Vector> preds(2);
  preds[0] = Vector::Constant(1, 0.5);
  preds[1] = Vector::Constant(3, 2.0);
  std::vector<Array> labels(2);
  labels[0] = Array::Constant(1, 1.0);
  labels[1] = Array::Constant(3, 2.0);
  auto losses = task_losses(preds, labels, tasks);
  CHECK(losses[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(losses[1] == 0.0);
  CHECK(total_loss(losses, tasks) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));

  preds[0] = Vector(2);
  preds[0] << 0.9, 0.1;
  labels[0] = Array(2);
  labels[0] << 1.0, 0.0;
  losses = task_losses(preds, labels, tasks);
  CHECK(losses[0] == doctest::Approx(0.10536051565782628).epsilon(1e-12));
}

TEST_CASE("backward matches central finite differences") {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    NetConfig cfg;
    cfg.input_dim = 5;
    cfg.hidden = {8, 8};
    cfg.tasks = default_tasks(2, 1);
    cfg.seed = seed;
    SharedBottomNet net(cfg);
    std::mt19937_64 rng(seed + 100);
    Matrix x = random_matrix(rng, 7, 5, -1.5, 1.5);
    auto labels = random_labels(rng, cfg.tasks, 7);

    ForwardCache cache = net.forward(x);
    optim::GradientSet grads = net.backward(cache, labels);

    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t b = 0; b < net.params().size(); ++b) {
      for (Index i = 0; i < net.params()[b].size(); ++i) {
        double saved = net.params()[b].w[i];
        net.params()[b].w[i] = saved + h;
        double up = net_loss(net, x, labels);
        net.params()[b].w[i] = saved - h;
        double down = net_loss(net, x, labels);
        net.params()[b].w[i] = saved;
        double fd = (up - down) / (2.0 * h);
        double g = grads[b][i];
        worst = std::max(worst,
                         std::abs(g - fd) / (std::abs(g) + std::abs(fd) + 1e-12));
      }
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("single example bias gradient equals p minus y") {
  NetConfig cfg;
  cfg.input_dim = 3;
  cfg.hidden = {4};
  cfg.tasks = {{TaskKind::Binary, 1.0}};
  cfg.seed = 21;
  SharedBottomNet net(cfg);
  std::mt19937_64 rng(22);
  Matrix x = random_matrix(rng, 1, 3, -1.0, 1.0);
  ForwardCache cache = net.forward(x);
  double p = cache.preds[0][0];
  for (double y : {0.0, 1.0}) {
    auto grads = net.backward(cache, {Array::Constant(1, y)});
    CHECK(grads[net.head_bias_index(0)][0] ==
          doctest::Approx(p - y).epsilon(1e-14));
  }
}

TEST_CASE("zero-weight task contributes nothing to gradients") {
  NetConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden = {6};
  cfg.tasks = default_tasks(2, 1);
  cfg.tasks[1].loss_weight = 0.0;
  cfg.seed = 31;
  SharedBottomNet net(cfg);
  std::mt19937_64 rng(32);
  Matrix x = random_matrix(rng, 5, 4, -1.0, 1.0);
  auto labels = random_labels(rng, cfg.tasks, 5);
  ForwardCache cache = net.forward(x);
  auto grads = net.backward(cache, labels);
  CHECK((grads[net.head_weight_index(1)] == 0.0).all());
  CHECK((grads[net.head_bias_index(1)] == 0.0).all());

  // Changing the dropped task's labels changes nothing anywhere.
  auto labels2 = labels;
  labels2[1] = 1.0 - labels2[1];
  auto grads2 = net.backward(cache, labels2);
  for (std::size_t b = 0; b < grads.size(); ++b)
    CHECK((grads[b] == grads2[b]).all());
}

TEST_CASE("adversarial labels on one task raise the shared gradient norm") {
  NetConfig cfg;
  cfg.input_dim = 6;
  cfg.hidden = {8, 8};
  cfg.tasks = default_tasks(2, 1);
  cfg.seed = 41;
  SharedBottomNet net(cfg);
  std::mt19937_64 rng(42);
  Matrix x = random_matrix(rng, 16, 6, -1.0, 1.0);
  ForwardCache cache = net.forward(x);
  std::vector<Array> labels;
  labels.push_back((cache.preds[0].array() > 0.5).cast<double>());
  labels.push_back((cache.preds[1].array() > 0.5).cast<double>());
  labels.push_back(cache.preds[2].array());  // regression labels = predictions
  auto clean = net.backward(cache, labels);
  auto corrupted_labels = labels;
  corrupted_labels[2] = Array::Constant(16, 100.0);
  auto corrupted = net.backward(cache, corrupted_labels);
  std::size_t top_w = net.trunk_weight_index(1);
  CHECK(corrupted[top_w].matrix().norm() > clean[top_w].matrix().norm());
}
