#include <doctest.h>

#include <cmath>

#include "stg/nnet.hpp"

using namespace stg;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.obs_dim = 2;
  cfg.hidden = {8, 8};
  cfg.action_dims = 2;
  cfg.action_bins = 5;
  cfg.steps_bins = 7;
  return cfg;
}

}  // namespace

TEST_CASE("feature layout") {
  CHECK(feature_dim(2) == 11);
  VectorXd obs(2), goal(2);
  obs << 0.5, 0.0;
  goal << 0.5, 1.0;
  VectorXd f = features(obs, goal, Objective::bc);
  REQUIRE(f.size() == 11);
  CHECK(f[0] == 0.5);       // obs
  CHECK(f[2] == 0.5);       // goal
  CHECK(f[4] == 0.0);       // diff x
  CHECK(f[5] == 1.0);       // diff y
  CHECK(f[6] == 1.0);       // |diff|
  CHECK(f[7] == 0.0);       // unit x
  CHECK(f[8] == 1.0);       // unit y
  CHECK(f[9] == 1.0);       // bc tag
  CHECK(f[10] == 0.0);      // stg tag
  VectorXd g = features(obs, goal, Objective::stg);
  CHECK(g[9] == 0.0);
  CHECK(g[10] == 1.0);
}

TEST_CASE("features at zero offset have a zero unit vector") {
  VectorXd p(2);
  p << 0.3, -0.2;
  VectorXd f = features(p, p, Objective::bc);
  CHECK(f[6] == 0.0);
  CHECK(f[7] == 0.0);
  CHECK(f[8] == 0.0);
}

TEST_CASE("make_net shapes and determinism") {
  auto cfg = tiny_config();
  DenseNet a = make_net(cfg, 5);
  DenseNet b = make_net(cfg, 5);
  DenseNet c = make_net(cfg, 6);
  REQUIRE(a.trunk.size() == 2);
  CHECK(a.trunk[0].W.rows() == 8);
  CHECK(a.trunk[0].W.cols() == feature_dim(2));
  CHECK(a.action_head.W.rows() == 2 * 5);
  CHECK(a.steps_head.W.rows() == 7);
  CHECK(a.trunk[0].W == b.trunk[0].W);
  CHECK(a.trunk[0].W != c.trunk[0].W);
  CHECK(param_hash(a) == param_hash(b));
  CHECK(param_hash(a) != param_hash(c));
}

TEST_CASE("batched forward matches single-sample forward") {
  auto cfg = tiny_config();
  DenseNet net = make_net(cfg, 1);
  Rng rng(3);
  MatrixXd X(net.input_dim, 4);
  for (int c = 0; c < 4; ++c)
    for (int r = 0; r < net.input_dim; ++r) X(r, c) = rng.uniform(-1, 1);
  MatrixXd H = trunk_forward(net, X);
  MatrixXd A = head_logits(net.action_head, H);
  for (int c = 0; c < 4; ++c) {
    VectorXd single = forward(net, VectorXd(X.col(c)), Head::action);
    for (int r = 0; r < A.rows(); ++r) CHECK(A(r, c) == doctest::Approx(single[r]).epsilon(1e-14));
  }
}

TEST_CASE("cross entropy of uniform logits is log K") {
  VectorXd z = VectorXd::Zero(21);
  auto [loss, grad] = cross_entropy(z, 4);
  CHECK(loss == doctest::Approx(std::log(21.0)).epsilon(1e-12));
  CHECK(grad.sum() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(grad[4] < 0.0);
}

TEST_CASE("head gradients match central finite differences") {
  auto cfg = tiny_config();
  cfg.hidden = {6};
  DenseNet net = make_net(cfg, 9);
  Rng rng(4);
  MatrixXd X(net.input_dim, 3);
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < net.input_dim; ++r) X(r, c) = rng.uniform(-1, 1);
  int targets[3] = {1, 3, 0};

  auto loss_fn = [&](const DenseNet& n) {
    ForwardCache cache;
    MatrixXd H = trunk_forward(n, X, nullptr);
    MatrixXd Z = head_logits(n.steps_head, H);
    double total = 0;
    for (int c = 0; c < 3; ++c) total += cross_entropy(VectorXd(Z.col(c)), targets[c]).first;
    return total / 3.0;
  };

  // Analytic gradients.
  ForwardCache cache;
  MatrixXd H = trunk_forward(net, X, &cache);
  MatrixXd Z = head_logits(net.steps_head, H);
  MatrixXd dZ(Z.rows(), Z.cols());
  for (int c = 0; c < 3; ++c) dZ.col(c) = cross_entropy(VectorXd(Z.col(c)), targets[c]).second / 3.0;
  Gradients g = zeros_like(net);
  backward_from_head(net, Head::steps, cache, dZ, g);

  DenseNet probe = net;
  auto views = tensor_views(probe);
  auto gviews = tensor_views(g);
  const double h = 1e-6;
  double max_rel = 0;
  for (std::size_t ti = 0; ti < views.size(); ++ti) {
    for (long i = 0; i < views[ti].size(); i += 7) {  // probe a spread of entries
      double saved = views[ti].data[i];
      views[ti].data[i] = saved + h;
      double up = loss_fn(probe);
      views[ti].data[i] = saved - h;
      double dn = loss_fn(probe);
      views[ti].data[i] = saved;
      double fd = (up - dn) / (2 * h);
      double an = gviews[ti].data[i];
      double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("adamw single step matches hand computation") {
  NetConfig cfg = tiny_config();
  cfg.hidden = {3};
  DenseNet net = make_net(cfg, 2);
  double p0 = net.trunk[0].W(0, 0);
  Gradients g = zeros_like(net);
  g.trunk[0].W(0, 0) = 0.5;

  AdamWConfig acfg;
  acfg.lr = 1e-3;
  acfg.weight_decay = 1e-2;
  AdamWState st = make_adamw(net, acfg);
  adamw_step(net, g, st);

  // Step 1: m_hat = grad, v_hat = grad^2; decay applied before the moment update.
  double expect = p0 - acfg.lr * acfg.weight_decay * p0;
  expect -= acfg.lr * 0.5 / (std::sqrt(0.25) + acfg.eps);
  CHECK(net.trunk[0].W(0, 0) == doctest::Approx(expect).epsilon(1e-12));
  // Untouched parameter only sees decay.
  CHECK(st.step == 1);
}

TEST_CASE("round_trip_f32 is idempotent") {
  DenseNet net = make_net(tiny_config(), 8);
  round_trip_f32(net);
  auto h1 = param_hash(net);
  round_trip_f32(net);
  CHECK(param_hash(net) == h1);
}

TEST_CASE("all_finite flags poisoned parameters") {
  DenseNet net = make_net(tiny_config(), 8);
  CHECK(all_finite(net));
  net.steps_head.b[0] = std::nan("");
  CHECK(!all_finite(net));
}
