#include <doctest.h>

#include <atomic>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "stg/config.hpp"
#include "stg/selfimprove.hpp"

using namespace stg;

namespace {

std::vector<double> random_d_values(Rng& rng, int len, double scale = 50.0) {
  std::vector<double> d(static_cast<std::size_t>(len));
  for (auto& x : d) x = rng.next_double() * scale;
  return d;
}

std::vector<double> rewards_from_d(const std::vector<double>& d, double beta = 0.0) {
  std::vector<double> r;
  for (std::size_t i = 0; i + 1 < d.size(); ++i)
    r.push_back(reward(d[i], d[i + 1], false, beta));
  return r;
}

DenseNet tiny_net(std::uint64_t seed, int bins = 7) {
  NetConfig nc;
  nc.obs_dim = 2;
  nc.action_dims = 2;
  nc.hidden = {8};
  nc.action_bins = bins;
  nc.steps_bins = 10;
  return make_net(nc, seed);
}

ReplayItem random_item(Rng& rng, double ret_scale = 1.0) {
  ReplayItem it;
  it.obs = VectorXd::Zero(2);
  it.goal = VectorXd::Zero(2);
  it.action = VectorXd::Zero(2);
  for (int k = 0; k < 2; ++k) {
    it.obs(k) = rng.next_double() * 10 - 5;
    it.goal(k) = rng.next_double() * 10 - 5;
    it.action(k) = rng.next_double() * 2 - 1;
  }
  it.ret = (rng.next_double() * 2 - 1) * ret_scale;
  return it;
}

}  // namespace

TEST_CASE("expected steps-to-go is the probability-weighted bin midpoint") {
  Binning b{100.0, 10};  // width 10, midpoints 5, 15, ..., 95
  StepsToGoDistribution dist;
  dist.binning = b;
  dist.probs.assign(10, 0.0);
  dist.probs[0] = 1.0;
  CHECK(expected_steps_to_go(dist) == doctest::Approx(5.0).epsilon(1e-12));
  dist.probs.assign(10, 0.1);
  CHECK(expected_steps_to_go(dist) == doctest::Approx(50.0).epsilon(1e-12));
  dist.probs.assign(10, 0.0);
  dist.probs[3] = 0.5;
  dist.probs[7] = 0.5;
  CHECK(expected_steps_to_go(dist) == doctest::Approx(55.0).epsilon(1e-12));
}

TEST_CASE("expected steps-to-go validates the distribution") {
  StepsToGoDistribution dist;
  dist.binning = Binning{100.0, 4};
  dist.probs = {0.5, 0.6, -0.1, 0.0};
  CHECK_THROWS_AS(expected_steps_to_go(dist), NumericError);
  dist.probs = {0.5, 0.2, 0.1, 0.1};  // sums to 0.9
  CHECK_THROWS_AS(expected_steps_to_go(dist), NumericError);
}

TEST_CASE("reward is the one-step drop in steps-to-go plus the success bonus") {
  CHECK(reward(10.0, 7.5, false, 2.0) == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(reward(10.0, 7.5, true, 2.0) == doctest::Approx(4.5).epsilon(1e-15));
  CHECK(reward(3.0, 5.0, false, 0.0) == doctest::Approx(-2.0).epsilon(1e-15));
}

TEST_CASE("detector fires exactly at the threshold boundary") {
  CHECK(detect_success(3.999, 4.0));
  CHECK(detect_success(4.0, 4.0));
  CHECK_FALSE(detect_success(4.001, 4.0));
  // narrower thresholds only shrink the accepted set
  for (double d : {0.2, 0.74, 0.76, 1.3}) {
    if (detect_success(d, 0.75)) CHECK(detect_success(d, 1.0));
  }
}

TEST_CASE("monte carlo returns match the backward recursion") {
  const std::vector<double> r{1.0, 1.0, 1.0};
  const auto R = monte_carlo_returns(r, 0.5);
  REQUIRE(R.size() == 3);
  CHECK(R[2] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(R[1] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(R[0] == doctest::Approx(1.75).epsilon(1e-15));
  CHECK(monte_carlo_returns({}, 0.9).empty());

  Rng rng(71);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> rw;
    const int T = 1 + static_cast<int>(rng.next_below(30));
    for (int t = 0; t < T; ++t) rw.push_back(rng.next_double() * 4 - 2);
    const double gamma = rng.next_double() * 0.99;
    const auto Rs = monte_carlo_returns(rw, gamma);
    for (int t = 0; t < T - 1; ++t)
      CHECK(std::abs(Rs[t] - (rw[t] + gamma * Rs[t + 1])) < 1e-12);
    CHECK(std::abs(Rs[T - 1] - rw[T - 1]) < 1e-12);
  }
}

TEST_CASE("difference rewards decompose into the dense and potential terms") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = 2 + static_cast<int>(rng.next_below(40));
    const auto d = random_d_values(rng, T + 1);
    const double gamma = rng.next_double() * 0.999;
    CHECK(shaping_decomposition_check(d, gamma) < 1e-12);
  }
}

TEST_CASE("undiscounted returns telescope to the endpoint difference") {
  Rng rng(14);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = 2 + static_cast<int>(rng.next_below(40));
    const auto d = random_d_values(rng, T + 1);
    const auto R = monte_carlo_returns(rewards_from_d(d), 1.0);
    CHECK(std::abs(R[0] - (d[0] - d.back())) < 1e-9);
  }
}

TEST_CASE("closed-form return matches the monte carlo sum") {
  Rng rng(15);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = 2 + static_cast<int>(rng.next_below(30));
    const auto d = random_d_values(rng, T + 1);
    const double gamma = rng.next_double() * 0.99;
    const auto R = monte_carlo_returns(rewards_from_d(d), gamma);
    for (int t = 0; t < T; ++t)
      CHECK(std::abs(R[static_cast<std::size_t>(t)] - closed_form_return(d, t, gamma)) < 1e-9);
  }
}

TEST_CASE("c heuristic reproduces the published constant") {
  // (1 - 0.9) / 2 evaluates exactly in binary floating point, but the 0.9
  // input already carries representation error, so the result sits exactly
  // two ulps below the 0.05 literal. No faithful evaluation can land closer;
  // pin that, not a loose tolerance.
  const double c = c_heuristic(0.9, 2);
  CHECK(std::nextafter(std::nextafter(c, 1.0), 1.0) == 0.05);
  CHECK(c == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(c_heuristic(0.0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c_heuristic(0.95, 10) == doctest::Approx(0.005).epsilon(1e-15));
  CHECK_THROWS_AS(c_heuristic(1.0, 2), ConfigError);
  CHECK_THROWS_AS(c_heuristic(-0.1, 2), ConfigError);
  CHECK_THROWS_AS(c_heuristic(0.9, 0), ConfigError);
}

TEST_CASE("replay buffer serves each item exactly once per phase") {
  ReplayBuffer buf;
  Rng rng(5);
  std::vector<ReplayItem> ep;
  for (int i = 0; i < 3; ++i) {
    ep.clear();
    for (int j = 0; j < 8; ++j) ep.push_back(random_item(rng));
    buf.append_episode(ep);
  }
  CHECK(buf.size() == 24);
  buf.begin_phase(Rng(99));
  std::set<std::uint64_t> seen;
  for (int b = 0; b < 4; ++b) {
    auto batch = buf.sample_batch(6);
    REQUIRE(batch.size() == 6);
    for (const auto& it : batch) CHECK(seen.insert(it.id).second);
  }
  CHECK(seen.size() == 24);
  CHECK(buf.consumed() == 24);
  CHECK_THROWS_AS(buf.sample_batch(1), ProtocolError);  // nothing left
  buf.clear();
  CHECK(buf.size() == 0);
}

TEST_CASE("replay buffer rejects sampling outside an open phase") {
  ReplayBuffer buf;
  Rng rng(6);
  std::vector<ReplayItem> ep;
  for (int j = 0; j < 4; ++j) ep.push_back(random_item(rng));
  buf.append_episode(ep);
  CHECK_THROWS_AS(buf.sample_batch(2), ProtocolError);
  buf.begin_phase(Rng(1));
  CHECK_THROWS_AS(buf.sample_batch(5), ProtocolError);  // more than available
  auto batch = buf.sample_batch(4);
  CHECK(batch.size() == 4);
  buf.clear();
  CHECK_THROWS_AS(buf.sample_batch(1), ProtocolError);  // phase closed by clear
}

TEST_CASE("replay ids are assigned sequentially across episodes") {
  ReplayBuffer buf;
  Rng rng(7);
  for (int e = 0; e < 3; ++e) {
    std::vector<ReplayItem> ep;
    for (int j = 0; j < 2; ++j) ep.push_back(random_item(rng));
    buf.append_episode(ep);
  }
  buf.begin_phase(Rng(2));
  auto batch = buf.sample_batch(6);
  std::set<std::uint64_t> ids;
  for (const auto& it : batch) ids.insert(it.id);
  CHECK(*ids.begin() == 0);
  CHECK(*ids.rbegin() == 5);
}

TEST_CASE("reward source round trips to f32 and validates its inputs") {
  DenseNet net = tiny_net(3);
  Binning b{200.0, 10};
  CHECK_THROWS_AS(RewardSource(net, b, 0.0, 0.0), ConfigError);   // s must be positive
  CHECK_THROWS_AS(RewardSource(net, b, 4.0, -1.0), ConfigError);  // beta must be >= 0
  CHECK_THROWS_AS(RewardSource(net, Binning{200.0, 11}, 4.0, 0.0), ConfigError);  // bin mismatch
  RewardSource rs(net, b, 4.0, 0.0);
  const std::uint64_t h = rs.params_hash();
  VectorXd o = VectorXd::Zero(2), g = VectorXd::Ones(2);
  const auto dist = rs.distribution(o, g);
  double sum = 0;
  for (double p : dist.probs) {
    CHECK(p >= 0.0);
    sum += p;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(rs.d(o, g) == doctest::Approx(expected_steps_to_go(dist)).epsilon(1e-12));
  CHECK(rs.success(o, g) == detect_success(rs.d(o, g), 4.0));
  CHECK(rs.params_hash() == h);  // queries never mutate the model
}

TEST_CASE("collect_episode stops on the detector with the bonus applied") {
  DenseNet policy = tiny_net(11, 21);
  EnvConfig env_cfg;
  Environment env(env_cfg);
  RewardSource rs(tiny_net(12, 21), Binning{200.0, 10}, 1e9, 2.0);  // always-on detector
  SelfImproveConfig cfg;
  cfg.success_threshold = 1e9;
  cfg.bonus_beta = 2.0;
  Rng rng(100);
  CollectResult res = collect_episode(policy, env, rs, cfg, rng);
  CHECK(res.detector_success);
  CHECK(res.env_steps == 1);
  CHECK(res.episode.reason == TerminationReason::detector_success);
  REQUIRE(res.items.size() == 1);
  const double d0 = rs.d(res.episode.observations[0], res.episode.goal);
  const double d1 = rs.d(res.episode.observations[1], res.episode.goal);
  CHECK(res.items[0].ret == doctest::Approx(d0 - d1 + 2.0).epsilon(1e-12));
}

TEST_CASE("collect_episode hits the cap when the detector never fires") {
  DenseNet policy = tiny_net(11, 21);
  EnvConfig env_cfg;
  Environment env(env_cfg);
  RewardSource rs(tiny_net(12, 21), Binning{200.0, 10}, 1e-9, 0.0);
  SelfImproveConfig cfg;
  cfg.success_threshold = 1e-9;
  cfg.max_episode_length = 7;
  Rng rng(101);
  CollectResult res = collect_episode(policy, env, rs, cfg, rng);
  CHECK_FALSE(res.detector_success);
  CHECK(res.env_steps == 7);
  CHECK(res.episode.reason == TerminationReason::max_length);
  CHECK(res.items.size() == 7);
  // returns obey the recursion over the recorded rewards
  const double g = cfg.gamma;
  for (std::size_t t = 0; t + 1 < res.items.size(); ++t) {
    const double r_t = res.items[t].ret - g * res.items[t + 1].ret;
    const double d_t = rs.d(res.episode.observations[t], res.episode.goal);
    const double d_n = rs.d(res.episode.observations[t + 1], res.episode.goal);
    CHECK(r_t == doctest::Approx(d_t - d_n).epsilon(1e-9));
  }
}

TEST_CASE("collect_episode honors the abort hook") {
  DenseNet policy = tiny_net(11, 21);
  EnvConfig env_cfg;
  Environment env(env_cfg);
  RewardSource rs(tiny_net(12, 21), Binning{200.0, 10}, 4.0, 0.0);
  SelfImproveConfig cfg;
  std::atomic<bool> abort_flag{true};
  Rng rng(102);
  CollectResult res = collect_episode(policy, env, rs, cfg, rng, &abort_flag);
  CHECK(res.episode.reason == TerminationReason::operator_abort);
  CHECK(res.items.empty());
  CHECK_FALSE(res.detector_success);
}

TEST_CASE("reinforce gradient matches finite differences") {
  DenseNet net = tiny_net(21);
  ActionBinning ab{1.0, net.heads.action_bins};
  SelfImproveConfig cfg;
  Rng rng(55);
  std::vector<ReplayItem> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(random_item(rng, 10.0));
  Gradients grads = zeros_like(net);
  reinforce_loss(net, batch, cfg, ab, &grads);
  auto views = tensor_views(net);
  auto gviews = tensor_views(grads);
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t v = 0; v < views.size(); ++v) {
    for (long i = 0; i < views[v].size; ++i) {
      double* p = views[v].data + i;
      const double saved = *p;
      *p = saved + h;
      const double up = reinforce_loss(net, batch, cfg, ab);
      *p = saved - h;
      const double down = reinforce_loss(net, batch, cfg, ab);
      *p = saved;
      const double fd = (up - down) / (2 * h);
      const double an = gviews[v].data[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("reinforce with all-zero returns leaves parameters unchanged") {
  DenseNet net = tiny_net(22);
  ActionBinning ab{1.0, net.heads.action_bins};
  SelfImproveConfig cfg;
  cfg.opt.weight_decay = 0.0;
  AdamWState opt = make_adamw(net, cfg.opt);
  Rng rng(56);
  std::vector<ReplayItem> batch;
  for (int i = 0; i < 8; ++i) {
    batch.push_back(random_item(rng));
    batch.back().ret = 0.0;
  }
  const std::uint64_t before = param_hash(net);
  const double loss = reinforce_update(net, batch, cfg, opt, ab);
  CHECK(loss == 0.0);
  CHECK(param_hash(net) == before);
}

TEST_CASE("reinforce restores state when a return is non-finite") {
  DenseNet net = tiny_net(23);
  ActionBinning ab{1.0, net.heads.action_bins};
  SelfImproveConfig cfg;
  AdamWState opt = make_adamw(net, cfg.opt);
  Rng rng(57);
  std::vector<ReplayItem> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_item(rng));
  batch[2].ret = std::numeric_limits<double>::infinity();
  const std::uint64_t before = param_hash(net);
  const long step_before = opt.step;
  CHECK_THROWS_AS(reinforce_update(net, batch, cfg, opt, ab), NumericError);
  CHECK(param_hash(net) == before);
  CHECK(opt.step == step_before);
}

TEST_CASE("degenerate loop with single-item batches runs to the iteration cap") {
  DenseNet policy = tiny_net(31, 21);
  RewardSource rs(tiny_net(32, 21), Binning{200.0, 10}, 1e-6, 0.0);
  EnvConfig env_cfg;
  SelfImproveConfig cfg;
  cfg.n_updates = 1;
  cfg.batch_size = 1;
  cfg.max_episode_length = 5;
  cfg.success_threshold = 1e-6;
  cfg.stop.max_iterations = 2;
  cfg.eval_interval = 0;  // never evaluate
  cfg.seed = 77;
  SelfImproveResult res = self_improve_loop(policy, rs, env_cfg, cfg);
  CHECK(res.iterations == 2);
  CHECK(res.stop_reason == "max_iterations");
  CHECK(res.total_env_steps >= 2);
  CHECK(res.reward_hash_before == res.reward_hash_after);
  CHECK(res.records.size() == 2);
  CHECK(res.records[0].episodes >= 1);
}

TEST_CASE("loop stops on the env step budget without overshooting") {
  DenseNet policy = tiny_net(33, 21);
  RewardSource rs(tiny_net(34, 21), Binning{200.0, 10}, 1e-6, 0.0);
  EnvConfig env_cfg;
  SelfImproveConfig cfg;
  cfg.n_updates = 1;
  cfg.batch_size = 1;
  cfg.max_episode_length = 5;
  cfg.success_threshold = 1e-6;
  cfg.stop.max_iterations = 1000;
  cfg.stop.max_env_steps = 12;
  cfg.eval_interval = 0;
  cfg.seed = 78;
  SelfImproveResult res = self_improve_loop(policy, rs, env_cfg, cfg);
  CHECK(res.stop_reason == "env_step_budget");
  CHECK(res.total_env_steps <= 12);
}

TEST_CASE("loop metrics serialize one json object per iteration") {
  DenseNet policy = tiny_net(35, 21);
  RewardSource rs(tiny_net(36, 21), Binning{200.0, 10}, 1e-6, 0.0);
  EnvConfig env_cfg;
  SelfImproveConfig cfg;
  cfg.n_updates = 1;
  cfg.batch_size = 1;
  cfg.max_episode_length = 5;
  cfg.success_threshold = 1e-6;
  cfg.stop.max_iterations = 3;
  cfg.eval_interval = 0;
  cfg.seed = 79;
  SelfImproveResult res = self_improve_loop(policy, rs, env_cfg, cfg);
  std::istringstream in(res.metrics_jsonl());
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    const Json j = Json::parse(line);
    CHECK(j.at("iteration").get<long>() == rows);
    CHECK(j.contains("mean_return"));
    ++rows;
  }
  CHECK(rows == 3);
}
