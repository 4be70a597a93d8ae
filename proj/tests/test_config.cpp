#include <doctest.h>

#include "stg/config.hpp"
#include "stg/distributed.hpp"

using namespace stg;

TEST_CASE("adamw config round trips through json") {
  AdamWConfig c;
  c.lr = 2e-4;
  c.weight_decay = 0.0;
  AdamWConfig back;
  from_json(to_json(c), back);
  CHECK(back.lr == c.lr);
  CHECK(back.beta1 == c.beta1);
  CHECK(back.beta2 == c.beta2);
  CHECK(back.eps == c.eps);
  CHECK(back.weight_decay == c.weight_decay);
}

TEST_CASE("adamw rejects out-of-range parameters") {
  Json j = to_json(AdamWConfig{});
  j["beta1"] = 1.0;
  AdamWConfig c;
  CHECK_THROWS_AS(from_json(j, c), ConfigError);
  j = to_json(AdamWConfig{});
  j["eps"] = 0.0;
  CHECK_THROWS_AS(from_json(j, c), ConfigError);
}

TEST_CASE("sft config round trips and rejects unknown keys") {
  SftConfig c;
  c.batch_size = 64;
  c.total_steps = 1234;
  c.val_interval = 17;
  c.seed = 9;
  c.net.obs_dim = 2;
  c.net.action_dims = 2;
  SftConfig back;
  from_json(to_json(c), back);
  CHECK(back.batch_size == 64);
  CHECK(back.total_steps == 1234);
  CHECK(back.val_interval == 17);
  CHECK(back.seed == 9);
  CHECK(back.net.obs_dim == 2);

  Json j = to_json(c);
  j["learning_rate"] = 0.1;  // typo for opt.lr
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
}

TEST_CASE("selfimprove config round trips and validates") {
  SelfImproveConfig c;
  c.gamma = 0.95;
  c.c = 0.02;
  c.n_updates = 4;
  c.batch_size = 8;
  c.stop.max_iterations = 7;
  c.stop.max_env_steps = 999;
  c.stop.plateau_stop = true;
  SelfImproveConfig back;
  from_json(to_json(c), back);
  CHECK(back.gamma == c.gamma);
  CHECK(back.c == c.c);
  CHECK(back.n_updates == 4);
  CHECK(back.batch_size == 8);
  CHECK(back.stop.max_iterations == 7);
  CHECK(back.stop.max_env_steps == 999);
  CHECK(back.stop.plateau_stop);

  Json j = to_json(c);
  j["gamma"] = 1.0;  // discount must stay below 1
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
  j = to_json(c);
  j["c"] = 0.0;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
  j = to_json(c);
  j["n_updates"] = 0;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
  j = to_json(c);
  j["betta"] = 1.0;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
}

TEST_CASE("distributed config round trips endpoints and flags") {
  DistributedConfig c;
  c.topology = Topology::v1;
  c.coordinator = {"127.0.0.1", 7001};
  c.replay = {"127.0.0.1", 7002};
  c.reward = {"127.0.0.1", 7003};
  c.action = {"127.0.0.1", 7004};
  c.n_actors = 4;
  c.max_iterations = 10;
  c.success_lag = 2;
  c.abort_in_flight = false;
  c.policy_ckpt = "p.ckpt";
  c.reward_ckpt = "r.ckpt";
  DistributedConfig back;
  from_json(to_json(c), back);
  CHECK(back.topology == Topology::v1);
  CHECK(back.coordinator.port == 7001);
  CHECK(back.replay.port == 7002);
  CHECK(back.reward.port == 7003);
  CHECK(back.action.port == 7004);
  CHECK(back.n_actors == 4);
  CHECK(back.max_iterations == 10);
  CHECK(back.success_lag == 2);
  CHECK_FALSE(back.abort_in_flight);
  CHECK(back.policy_ckpt == "p.ckpt");
  CHECK(back.reward_ckpt == "r.ckpt");

  Json j = to_json(c);
  j["replay"]["hostname"] = "x";
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
  j = to_json(c);
  j["topology"] = "v3";
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
  j = to_json(c);
  j["n_actors"] = 0;
  CHECK_THROWS_AS(from_json(j, back), ConfigError);
}

TEST_CASE("config hash ignores key insertion order") {
  Json a;
  a["x"] = 1;
  a["y"] = 2;
  Json b;
  b["y"] = 2;
  b["x"] = 1;
  CHECK(config_hash(a) == config_hash(b));
  b["x"] = 3;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("phase and topology names round trip") {
  CHECK(phase_from_string(to_string(Phase::collecting)) == Phase::collecting);
  CHECK(phase_from_string(to_string(Phase::learning)) == Phase::learning);
  CHECK(phase_from_string(to_string(Phase::done)) == Phase::done);
  CHECK_THROWS_AS(phase_from_string("paused"), ProtocolError);
  CHECK(topology_from_string("v1") == Topology::v1);
  CHECK(topology_from_string("v2") == Topology::v2);
  CHECK_THROWS_AS(topology_from_string(""), ConfigError);
}
