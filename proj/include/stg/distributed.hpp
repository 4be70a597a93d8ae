#pragma once

// Multi-process collect/learn deployment: a coordinator driving phase
// transitions, a replay-buffer server, a frozen steps-to-go (reward) server,
// actors owning environments, and a learner. Version 1 serves actions from
// the learner's published snapshot; Version 2 ships weights to the actors.

#include <atomic>
#include <cstdint>
#include <string>

#include "stg/config.hpp"
#include "stg/selfimprove.hpp"
#include "stg/wire.hpp"

namespace stg {

enum class Topology { v1, v2 };
Topology topology_from_string(const std::string& s);
std::string to_string(Topology t);

enum class Phase { collecting, learning, done };
const char* to_string(Phase p);
Phase phase_from_string(const std::string& s);

struct Endpoint {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;  // 0 picks an ephemeral port at bind time
};

struct DistributedConfig {
    Topology topology = Topology::v2;
    Endpoint coordinator;
    Endpoint replay;
    Endpoint reward;
    Endpoint action;  // learner's action-serving port, used by v1
    int n_actors = 1;
    int poll_ms = 20;
    long max_iterations = 3;
    // 0: success checks block every step. k > 0: checks run against the most
    // recent answered observation, so detector termination may lag up to k
    // steps behind the first success state.
    int success_lag = 0;
    bool abort_in_flight = true;
    std::string policy_ckpt;
    std::string reward_ckpt;
    std::string out_dir;
    EnvConfig env;
    SelfImproveConfig si;
};

Json to_json(const DistributedConfig& c);
void from_json(const Json& j, DistributedConfig& c);

// Shared lifecycle handle: the CLI wires `stop` to signals, tests flip it
// directly. Servers publish their bound port and readiness through it.
struct RoleHandle {
    std::atomic<bool> stop{false};
    std::atomic<bool> ready{false};
    std::atomic<std::uint16_t> port{0};
    // replay server: requests that violated the phase/epoch contract
    std::atomic<long> violations{0};
    // actor counters
    std::atomic<long> episodes{0};
    std::atomic<long> discarded{0};
    std::atomic<long> env_steps{0};
    // coordinator: completed collect->learn->collect cycles
    std::atomic<long> iterations{0};
};

void run_replay_server(const DistributedConfig& cfg, RoleHandle& h);
void run_reward_server(const DistributedConfig& cfg, RoleHandle& h);
void run_coordinator(const DistributedConfig& cfg, RoleHandle& h);
void run_learner(const DistributedConfig& cfg, RoleHandle& h);
void run_actor(const DistributedConfig& cfg, const std::string& name, RoleHandle& h);

}  // namespace stg
