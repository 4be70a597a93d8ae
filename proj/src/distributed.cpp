#include "stg/distributed.hpp"

#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

#include "stg/checkpoint.hpp"
#include "stg/log.hpp"

namespace stg {

namespace {

using Clock = std::chrono::steady_clock;

void sleep_ms(int ms) { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); }

// Polls `pred` until it holds or timeout_ms passes.
template <typename Pred>
bool wait_for(Pred pred, int timeout_ms) {
    const auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms);
    while (!pred()) {
        if (Clock::now() >= deadline) return false;
        sleep_ms(1);
    }
    return true;
}

std::string hash_hex(std::uint64_t h) {
    std::ostringstream ss;
    ss << std::hex << h;
    return ss.str();
}

}  // namespace

Topology topology_from_string(const std::string& s) {
    if (s == "v1") return Topology::v1;
    if (s == "v2") return Topology::v2;
    throw ConfigError("unknown topology: " + s);
}

std::string to_string(Topology t) { return t == Topology::v1 ? "v1" : "v2"; }

const char* to_string(Phase p) {
    switch (p) {
        case Phase::collecting: return "collecting";
        case Phase::learning: return "learning";
        case Phase::done: return "done";
    }
    return "?";
}

Phase phase_from_string(const std::string& s) {
    if (s == "collecting") return Phase::collecting;
    if (s == "learning") return Phase::learning;
    if (s == "done") return Phase::done;
    throw ProtocolError("unknown phase: " + s);
}

namespace {

Json endpoint_to_json(const Endpoint& e) { return Json{{"host", e.host}, {"port", e.port}}; }

void endpoint_from_json(const Json& j, Endpoint& e) {
    check_keys(j, {"host", "port"}, "endpoint");
    if (j.contains("host")) e.host = j.at("host").get<std::string>();
    if (j.contains("port")) e.port = j.at("port").get<std::uint16_t>();
}

}  // namespace

Json to_json(const DistributedConfig& c) {
    return Json{{"topology", to_string(c.topology)},
                {"coordinator", endpoint_to_json(c.coordinator)},
                {"replay", endpoint_to_json(c.replay)},
                {"reward", endpoint_to_json(c.reward)},
                {"action", endpoint_to_json(c.action)},
                {"n_actors", c.n_actors},
                {"poll_ms", c.poll_ms},
                {"max_iterations", c.max_iterations},
                {"success_lag", c.success_lag},
                {"abort_in_flight", c.abort_in_flight},
                {"policy_ckpt", c.policy_ckpt},
                {"reward_ckpt", c.reward_ckpt},
                {"out_dir", c.out_dir},
                {"env", to_json(c.env)},
                {"selfimprove", to_json(c.si)}};
}

void from_json(const Json& j, DistributedConfig& c) {
    check_keys(j,
               {"topology", "coordinator", "replay", "reward", "action", "n_actors", "poll_ms",
                "max_iterations", "success_lag", "abort_in_flight", "policy_ckpt", "reward_ckpt",
                "out_dir", "env", "selfimprove"},
               "distributed");
    if (j.contains("topology")) c.topology = topology_from_string(j.at("topology").get<std::string>());
    if (j.contains("coordinator")) endpoint_from_json(j.at("coordinator"), c.coordinator);
    if (j.contains("replay")) endpoint_from_json(j.at("replay"), c.replay);
    if (j.contains("reward")) endpoint_from_json(j.at("reward"), c.reward);
    if (j.contains("action")) endpoint_from_json(j.at("action"), c.action);
    if (j.contains("n_actors")) c.n_actors = j.at("n_actors").get<int>();
    if (j.contains("poll_ms")) c.poll_ms = j.at("poll_ms").get<int>();
    if (j.contains("max_iterations")) c.max_iterations = j.at("max_iterations").get<long>();
    if (j.contains("success_lag")) c.success_lag = j.at("success_lag").get<int>();
    if (j.contains("abort_in_flight")) c.abort_in_flight = j.at("abort_in_flight").get<bool>();
    if (j.contains("policy_ckpt")) c.policy_ckpt = j.at("policy_ckpt").get<std::string>();
    if (j.contains("reward_ckpt")) c.reward_ckpt = j.at("reward_ckpt").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("env")) from_json(j.at("env"), c.env);
    if (j.contains("selfimprove")) from_json(j.at("selfimprove"), c.si);
    if (c.n_actors < 1) throw ConfigError("distributed: n_actors must be at least 1");
}

namespace {

// Request-reply client with capped-exponential-backoff reconnects.
class Client {
  public:
    explicit Client(Endpoint ep) : ep_(std::move(ep)) {}

    Json rpc(const Json& req, int timeout_ms = 30000) {
        int backoff = 50;
        const auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms);
        for (;;) {
            try {
                if (!sock_.valid()) sock_ = connect_local(ep_.host, ep_.port);
                return request(sock_, req, timeout_ms);
            } catch (const ProtocolError&) {
                sock_.close();
                if (Clock::now() + std::chrono::milliseconds(backoff) >= deadline) throw;
                sleep_ms(backoff);
                backoff = std::min(backoff * 2, 1000);
            }
        }
    }

    // Connects (with backoff) if needed and hands out the socket for callers
    // that manage their own request/reply pairing.
    Socket& raw(int timeout_ms = 15000) {
        int backoff = 50;
        const auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms);
        while (!sock_.valid()) {
            try {
                sock_ = connect_local(ep_.host, ep_.port);
            } catch (const ProtocolError&) {
                if (Clock::now() + std::chrono::milliseconds(backoff) >= deadline) throw;
                sleep_ms(backoff);
                backoff = std::min(backoff * 2, 1000);
            }
        }
        return sock_;
    }

    void reset() { sock_.close(); }

  private:
    Endpoint ep_;
    Socket sock_;
};

Json replay_item_to_json(const ReplayItem& it) {
    return Json{{"obs", vec_to_json(it.obs)},
                {"action", vec_to_json(it.action)},
                {"goal", vec_to_json(it.goal)},
                {"ret", it.ret}};
}

ReplayItem replay_item_from_json(const Json& j) {
    ReplayItem it;
    it.obs = vec_from_json(j.at("obs"));
    it.action = vec_from_json(j.at("action"));
    it.goal = vec_from_json(j.at("goal"));
    it.ret = j.at("ret").get<double>();
    if (j.contains("id")) it.id = j.at("id").get<std::uint64_t>();
    return it;
}

}  // namespace

// ---------------------------------------------------------------------------
// Replay buffer server

namespace {

struct ReplayState {
    std::mutex mu;
    ReplayBuffer buf;
    Phase phase = Phase::collecting;
    long epoch = 0;
    long learn_phases = 0;
    std::uint64_t seed = 0;
};

void replay_handle(Socket sock, std::shared_ptr<ReplayState> st, RoleHandle& h, int poll_ms) {
    for (;;) {
        Json m;
        RecvStatus rs;
        try {
            rs = recv_message(sock, m, poll_ms);
        } catch (const ProtocolError& e) {
            try {
                send_message(sock, error_reply("protocol", e.what()));
                continue;
            } catch (const ProtocolError&) {
                return;
            }
        }
        if (rs == RecvStatus::closed) return;
        if (rs == RecvStatus::timeout) {
            if (h.stop.load()) return;
            continue;
        }
        const std::string type = m["type"].get<std::string>();
        Json reply;
        try {
            std::lock_guard<std::mutex> lock(st->mu);
            if (type == "append_items") {
                const long e = m.value("epoch", -1l);
                if (st->phase != Phase::collecting || e != st->epoch) {
                    ++h.violations;
                    reply = error_reply("phase", "append outside the collecting phase");
                } else {
                    std::vector<ReplayItem> items;
                    for (const auto& ij : m.at("items")) items.push_back(replay_item_from_json(ij));
                    st->buf.append_episode(std::move(items));
                    reply = make_msg("append_reply");
                    reply["n"] = st->buf.size();
                }
            } else if (type == "buffer_size") {
                reply = make_msg("buffer_size_reply");
                reply["n"] = st->buf.size();
            } else if (type == "sample_batch") {
                const long e = m.value("epoch", -1l);
                if (st->phase != Phase::learning || e != st->epoch) {
                    ++h.violations;
                    reply = error_reply("phase", "sample outside the learning phase");
                } else {
                    const int b = m.at("b").get<int>();
                    auto batch = st->buf.sample_batch(b);
                    Json items = Json::array(), ids = Json::array();
                    for (const auto& it : batch) {
                        Json ij = replay_item_to_json(it);
                        ij["id"] = it.id;
                        items.push_back(std::move(ij));
                        ids.push_back(it.id);
                    }
                    reply = make_msg("batch_reply");
                    reply["items"] = std::move(items);
                    reply["ids"] = std::move(ids);
                }
            } else if (type == "clear") {
                st->buf.clear();
                reply = make_msg("ack");
                reply["epoch"] = st->epoch;
            } else if (type == "phase_change") {
                st->epoch = m.at("epoch").get<long>();
                st->phase = phase_from_string(m.at("phase").get<std::string>());
                if (st->phase == Phase::learning)
                    st->buf.begin_phase(derive_stream(st->seed, "replay.shuffle",
                                                     static_cast<std::uint64_t>(st->learn_phases++)));
                if (st->phase == Phase::done) h.stop.store(true);
                reply = make_msg("ack");
                reply["epoch"] = st->epoch;
            } else if (type == "status") {
                reply = make_msg("status_reply");
                reply["phase"] = to_string(st->phase);
                reply["epoch"] = st->epoch;
                reply["n"] = st->buf.size();
                reply["violations"] = h.violations.load();
            } else {
                reply = error_reply("unknown_type", "unhandled message type: " + type);
            }
        } catch (const ProtocolError& e) {
            reply = error_reply("protocol", e.what());
        } catch (const std::exception& e) {
            reply = error_reply("bad_request", e.what());
        }
        try {
            send_message(sock, reply);
        } catch (const ProtocolError&) {
            return;
        }
    }
}

}  // namespace

void run_replay_server(const DistributedConfig& cfg, RoleHandle& h) {
    Listener lis = Listener::bind_local(cfg.replay.port);
    h.port.store(lis.port());
    auto st = std::make_shared<ReplayState>();
    st->seed = cfg.si.seed;
    h.ready.store(true);
    std::vector<std::thread> conns;
    while (!h.stop.load()) {
        auto s = lis.accept(cfg.poll_ms);
        if (!s) continue;
        conns.emplace_back(replay_handle, std::move(*s), st, std::ref(h), cfg.poll_ms);
    }
    for (auto& t : conns) t.join();
}

// ---------------------------------------------------------------------------
// Steps-to-go (reward) inference server

namespace {

void reward_handle(Socket sock, std::shared_ptr<const RewardSource> rs, RoleHandle& h,
                   int poll_ms) {
    for (;;) {
        Json m;
        RecvStatus st;
        try {
            st = recv_message(sock, m, poll_ms);
        } catch (const ProtocolError& e) {
            try {
                send_message(sock, error_reply("protocol", e.what()));
                continue;
            } catch (const ProtocolError&) {
                return;
            }
        }
        if (st == RecvStatus::closed) return;
        if (st == RecvStatus::timeout) {
            if (h.stop.load()) return;
            continue;
        }
        const std::string type = m["type"].get<std::string>();
        Json reply;
        try {
            if (type == "steps_to_go") {
                const VectorXd obs = vec_from_json(m.at("obs"));
                const VectorXd goal = vec_from_json(m.at("goal"));
                if (obs.size() == 0 || obs.size() != goal.size())
                    throw ProtocolError("observation/goal shape mismatch");
                const StepsToGoDistribution dist = rs->distribution(obs, goal);
                reply = make_msg("steps_to_go_reply");
                reply["probs"] = vec_to_json(dist.probs);
                reply["d"] = expected_steps_to_go(dist);
                if (m.contains("tag")) reply["tag"] = m["tag"];
            } else if (type == "status") {
                reply = make_msg("status_reply");
                reply["params_hash"] = hash_hex(rs->params_hash());
            } else {
                reply = error_reply("unknown_type", "unhandled message type: " + type);
            }
        } catch (const ProtocolError& e) {
            reply = error_reply("bad_request", e.what());
        } catch (const std::exception& e) {
            reply = error_reply("bad_request", e.what());
        }
        try {
            send_message(sock, reply);
        } catch (const ProtocolError&) {
            return;
        }
    }
}

}  // namespace

void run_reward_server(const DistributedConfig& cfg, RoleHandle& h) {
    auto rs = std::make_shared<const RewardSource>(RewardSource::from_checkpoint(
        cfg.reward_ckpt, cfg.env, cfg.si.success_threshold, cfg.si.bonus_beta));
    Listener lis = Listener::bind_local(cfg.reward.port);
    h.port.store(lis.port());
    h.ready.store(true);
    std::vector<std::thread> conns;
    while (!h.stop.load()) {
        auto s = lis.accept(cfg.poll_ms);
        if (!s) continue;
        conns.emplace_back(reward_handle, std::move(*s), rs, std::ref(h), cfg.poll_ms);
    }
    for (auto& t : conns) t.join();
}

// ---------------------------------------------------------------------------
// Coordinator

namespace {

struct PeerConn {
    Socket sock;
    std::mutex write_mu;
    std::string role;
    std::string name;
    std::atomic<long> acked_epoch{-1};
    std::atomic<int> acked_version{0};
    std::atomic<bool> alive{true};

    bool push(const Json& j) {
        std::lock_guard<std::mutex> lock(write_mu);
        try {
            send_message(sock, j);
            return true;
        } catch (const ProtocolError&) {
            alive.store(false);
            return false;
        }
    }
};

struct CoordState {
    std::mutex mu;
    Phase phase = Phase::collecting;
    long epoch = 0;
    int weights_version = 0;
    long iterations = 0;
    bool transitioning = false;
    std::vector<std::shared_ptr<PeerConn>> actors;
    std::shared_ptr<PeerConn> learner;
    std::string pending_blob;
    int pending_version = 0;
};

struct ReplayLink {
    std::mutex mu;
    Client client;
    explicit ReplayLink(Endpoint ep) : client(std::move(ep)) {}

    Json rpc(const Json& req) {
        std::lock_guard<std::mutex> lock(mu);
        return client.rpc(req);
    }
};

void coordinator_transition(const DistributedConfig& cfg, CoordState& st, ReplayLink& replay,
                            RoleHandle& h) {
    {
        std::lock_guard<std::mutex> lock(st.mu);
        if (st.phase != Phase::collecting || st.transitioning) return;
        if (!st.learner || !st.learner->alive.load()) return;
        bool any_actor = false;
        for (const auto& a : st.actors) any_actor = any_actor || a->alive.load();
        if (!any_actor) return;
    }
    long n = -1;
    try {
        n = replay.rpc(make_msg("buffer_size")).at("n").get<long>();
    } catch (const ProtocolError&) {
        return;
    }
    const long need = static_cast<long>(cfg.si.n_updates) * cfg.si.batch_size;
    std::vector<std::shared_ptr<PeerConn>> actors;
    std::shared_ptr<PeerConn> learner;
    long e_learn = 0;
    {
        std::lock_guard<std::mutex> lock(st.mu);
        if (st.phase != Phase::collecting || st.transitioning) return;
        if (n < need) return;
        st.transitioning = true;
        st.phase = Phase::learning;
        e_learn = ++st.epoch;
        actors = st.actors;
        learner = st.learner;
    }
    STG_INFO("coordinator: learning phase, epoch %ld (buffer %ld)", e_learn, n);

    // Pause every actor before the buffer is frozen so no append can race a
    // batch request.
    Json pc = make_msg("phase_change");
    pc["phase"] = "learning";
    pc["epoch"] = e_learn;
    for (auto& a : actors)
        if (a->alive.load()) a->push(pc);
    for (auto& a : actors) {
        if (!a->alive.load()) continue;
        if (!wait_for([&] { return a->acked_epoch.load() >= e_learn || !a->alive.load(); }, 10000)) {
            STG_ERROR("coordinator: actor %s unresponsive; marking dead", a->name.c_str());
            a->alive.store(false);
        }
    }
    try {
        replay.rpc(pc);
    } catch (const ProtocolError& e) {
        STG_ERROR("coordinator: replay unreachable at transition: %s", e.what());
    }

    learner->push(pc);
    if (!wait_for([&] { return learner->acked_epoch.load() >= e_learn || !learner->alive.load(); },
                  600000))
        STG_ERROR("coordinator: learner did not finish the phase in time");

    int version = 0;
    std::string blob;
    {
        std::lock_guard<std::mutex> lock(st.mu);
        version = st.pending_version;
        blob = std::move(st.pending_blob);
        st.pending_blob.clear();
        st.weights_version = version;
    }
    if (cfg.topology == Topology::v2 && !blob.empty()) {
        Json wu = make_msg("weights_update");
        wu["version"] = version;
        wu["blob_b64"] = base64_encode(blob);
        for (auto& a : actors)
            if (a->alive.load()) a->push(wu);
        for (auto& a : actors) {
            if (!a->alive.load()) continue;
            if (!wait_for([&] { return a->acked_version.load() >= version || !a->alive.load(); },
                          10000))
                a->alive.store(false);
        }
    }

    long e_col = 0;
    bool done = false;
    {
        std::lock_guard<std::mutex> lock(st.mu);
        e_col = ++st.epoch;
        ++st.iterations;
        h.iterations.store(st.iterations);
        done = st.iterations >= cfg.max_iterations;
        st.phase = done ? Phase::done : Phase::collecting;
    }
    Json next = make_msg("phase_change");
    next["phase"] = done ? "done" : "collecting";
    next["epoch"] = e_col;
    // The buffer must accept appends again before any actor resumes.
    try {
        replay.rpc(next);
    } catch (const ProtocolError& e) {
        STG_ERROR("coordinator: replay unreachable at resume: %s", e.what());
    }
    for (auto& a : actors)
        if (a->alive.load()) a->push(next);
    if (done) {
        learner->push(next);
        h.stop.store(true);
    }
    {
        std::lock_guard<std::mutex> lock(st.mu);
        st.transitioning = false;
    }
    STG_INFO("coordinator: iteration complete, epoch %ld%s", e_col, done ? " (done)" : "");
}

void coordinator_conn(std::shared_ptr<PeerConn> pc, const DistributedConfig& cfg, CoordState& st,
                      ReplayLink& replay, RoleHandle& h) {
    for (;;) {
        Json m;
        RecvStatus rs;
        try {
            rs = recv_message(pc->sock, m, cfg.poll_ms);
        } catch (const ProtocolError&) {
            pc->alive.store(false);
            return;
        }
        if (rs == RecvStatus::closed) {
            pc->alive.store(false);
            return;
        }
        if (rs == RecvStatus::timeout) {
            if (h.stop.load()) return;
            continue;
        }
        const std::string type = m["type"].get<std::string>();
        if (type == "hello") {
            pc->role = m.value("role", "");
            pc->name = m.value("name", "");
            long epoch_now = 0;
            bool dup = false;
            {
                std::lock_guard<std::mutex> lock(st.mu);
                if (pc->role == "learner") {
                    if (st.learner)
                        dup = true;
                    else
                        st.learner = pc;
                } else if (pc->role == "actor") {
                    st.actors.push_back(pc);
                }
                epoch_now = st.epoch;
            }
            if (dup) {
                pc->push(error_reply("duplicate_role", "a learner is already registered"));
                continue;
            }
            Json ack = make_msg("ack");
            ack["epoch"] = epoch_now;
            pc->push(ack);
        } else if (type == "ack") {
            if (m.contains("version")) pc->acked_version.store(m["version"].get<int>());
            pc->acked_epoch.store(m.value("epoch", -1l));
        } else if (type == "weights_update") {
            std::lock_guard<std::mutex> lock(st.mu);
            st.pending_version = m.at("version").get<int>();
            st.pending_blob = base64_decode(m.at("blob_b64").get<std::string>());
        } else if (type == "status") {
            // Transitions run on the timer thread only. Doing one here would
            // block this thread on acks that it is itself responsible for
            // reading off this very socket.
            Json reply = make_msg("status_reply");
            {
                std::lock_guard<std::mutex> lock(st.mu);
                reply["phase"] = to_string(st.phase);
                reply["epoch"] = st.epoch;
                reply["weights_version"] = st.weights_version;
                reply["iterations"] = st.iterations;
                Json nodes = Json::array();
                for (const auto& a : st.actors)
                    if (a->alive.load())
                        nodes.push_back(Json{{"role", a->role}, {"name", a->name}});
                if (st.learner && st.learner->alive.load())
                    nodes.push_back(Json{{"role", "learner"}, {"name", st.learner->name}});
                reply["nodes"] = std::move(nodes);
            }
            try {
                Json bs = replay.rpc(make_msg("buffer_size"));
                reply["buffer_size"] = bs.at("n");
            } catch (const ProtocolError&) {
                reply["buffer_size"] = nullptr;
            }
            pc->push(reply);
        } else if (type == "operator_abort") {
            const std::string target = m.value("actor", "");
            std::shared_ptr<PeerConn> dest;
            {
                std::lock_guard<std::mutex> lock(st.mu);
                for (const auto& a : st.actors)
                    if (a->name == target && a->alive.load()) dest = a;
            }
            Json reply = make_msg(dest ? "ack" : "error");
            if (dest) {
                dest->push(make_msg("operator_abort"));
                reply["epoch"] = st.epoch;
            } else {
                reply["code"] = "unknown_actor";
                reply["detail"] = "no live actor named " + target;
            }
            pc->push(reply);
        } else {
            pc->push(error_reply("unknown_type", "unhandled message type: " + type));
        }
    }
}

}  // namespace

void run_coordinator(const DistributedConfig& cfg, RoleHandle& h) {
    Listener lis = Listener::bind_local(cfg.coordinator.port);
    h.port.store(lis.port());
    CoordState st;
    ReplayLink replay(cfg.replay);
    h.ready.store(true);

    std::vector<std::thread> conns;
    std::thread timer([&] {
        while (!h.stop.load()) {
            sleep_ms(cfg.poll_ms);
            try {
                coordinator_transition(cfg, st, replay, h);
            } catch (const std::exception& e) {
                STG_ERROR("coordinator transition failed: %s", e.what());
            }
        }
    });
    while (!h.stop.load()) {
        auto s = lis.accept(cfg.poll_ms);
        if (!s) continue;
        auto pc = std::make_shared<PeerConn>();
        pc->sock = std::move(*s);
        conns.emplace_back(coordinator_conn, pc, std::cref(cfg), std::ref(st), std::ref(replay),
                           std::ref(h));
    }
    timer.join();
    for (auto& t : conns) t.join();
}

// ---------------------------------------------------------------------------
// Learner

namespace {

struct ServedNet {
    std::mutex mu;
    DenseNet net;
    ActionBinning ab;
};

void action_server(Listener lis, std::shared_ptr<ServedNet> served, RoleHandle& h, int poll_ms) {
    std::vector<std::thread> conns;
    while (!h.stop.load()) {
        auto s = lis.accept(poll_ms);
        if (!s) continue;
        conns.emplace_back(
            [served, &h, poll_ms](Socket sock) {
                for (;;) {
                    Json m;
                    RecvStatus rs;
                    try {
                        rs = recv_message(sock, m, poll_ms);
                    } catch (const ProtocolError& e) {
                        try {
                            send_message(sock, error_reply("protocol", e.what()));
                            continue;
                        } catch (const ProtocolError&) {
                            return;
                        }
                    }
                    if (rs == RecvStatus::closed) return;
                    if (rs == RecvStatus::timeout) {
                        if (h.stop.load()) return;
                        continue;
                    }
                    Json reply;
                    try {
                        if (m["type"] == "sample_action") {
                            const VectorXd obs = vec_from_json(m.at("obs"));
                            const VectorXd goal = vec_from_json(m.at("goal"));
                            std::vector<double> u;
                            for (const auto& x : m.at("u")) u.push_back(x.get<double>());
                            std::lock_guard<std::mutex> lock(served->mu);
                            const VectorXd a =
                                sampled_action(served->net, obs, goal, served->ab, u);
                            reply = make_msg("action_reply");
                            reply["action"] = vec_to_json(a);
                        } else {
                            reply = error_reply("unknown_type", "unhandled message type");
                        }
                    } catch (const std::exception& e) {
                        reply = error_reply("bad_request", e.what());
                    }
                    try {
                        send_message(sock, reply);
                    } catch (const ProtocolError&) {
                        return;
                    }
                }
            },
            std::move(*s));
    }
    for (auto& t : conns) t.join();
}

}  // namespace

void run_learner(const DistributedConfig& cfg, RoleHandle& h) {
    auto [master, meta] = load_checkpoint(cfg.policy_ckpt);
    AdamWState opt = make_adamw(master, cfg.si.opt);
    const ActionBinning ab = default_action_binning(cfg.env, master.heads.action_bins);
    int version = 0;

    std::thread action_thread;
    auto served = std::make_shared<ServedNet>();
    if (cfg.topology == Topology::v1) {
        served->net = master;
        round_trip_f32(served->net);
        served->ab = ab;
        Listener lis = Listener::bind_local(cfg.action.port);
        h.port.store(lis.port());
        action_thread = std::thread(action_server, std::move(lis), served, std::ref(h), cfg.poll_ms);
    }

    Client coord(cfg.coordinator);
    Socket& control = coord.raw();
    Json hello = make_msg("hello");
    hello["role"] = "learner";
    hello["name"] = "learner";
    send_message(control, hello);
    Client replay(cfg.replay);
    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
    h.ready.store(true);

    while (!h.stop.load()) {
        Json m;
        RecvStatus rs;
        try {
            rs = recv_message(control, m, cfg.poll_ms);
        } catch (const ProtocolError& e) {
            STG_ERROR("learner: control connection lost: %s", e.what());
            break;
        }
        if (rs == RecvStatus::closed) break;
        if (rs == RecvStatus::timeout) continue;
        const std::string type = m["type"].get<std::string>();
        if (type != "phase_change") continue;
        const Phase phase = phase_from_string(m.at("phase").get<std::string>());
        if (phase == Phase::done) break;
        if (phase != Phase::learning) continue;
        const long epoch = m.at("epoch").get<long>();

        DenseNet snap = master;
        AdamWState opt_snap = opt;
        bool failed = false;
        try {
            for (int u = 0; u < cfg.si.n_updates; ++u) {
                Json req = make_msg("sample_batch");
                req["b"] = cfg.si.batch_size;
                req["epoch"] = epoch;
                Json r = replay.rpc(req);
                if (r["type"] == "error")
                    throw ProtocolError("sample_batch rejected: " +
                                        r.value("detail", std::string("?")));
                std::vector<ReplayItem> batch;
                for (const auto& ij : r.at("items")) batch.push_back(replay_item_from_json(ij));
                reinforce_update(master, batch, cfg.si, opt, ab);
            }
        } catch (const NumericError& e) {
            STG_ERROR("learner: %s; phase aborted, weights restored", e.what());
            master = snap;
            opt = opt_snap;
            failed = true;
        } catch (const ProtocolError& e) {
            STG_ERROR("learner: replay failure mid-phase: %s", e.what());
            master = snap;
            opt = opt_snap;
            failed = true;
        }
        (void)failed;
        try {
            Json creq = make_msg("clear");
            creq["epoch"] = epoch;
            replay.rpc(creq);
        } catch (const ProtocolError& e) {
            STG_ERROR("learner: clear failed: %s", e.what());
        }

        ++version;
        CheckpointMeta pub_meta = meta;
        pub_meta.step = version;
        const std::string blob = serialize_checkpoint(master, pub_meta);
        if (!cfg.out_dir.empty()) {
            std::ofstream f(std::filesystem::path(cfg.out_dir) /
                                ("ckpt_v" + std::to_string(version) + ".ckpt"),
                            std::ios::binary);
            f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        }
        if (cfg.topology == Topology::v1) {
            std::lock_guard<std::mutex> lock(served->mu);
            served->net = deserialize_checkpoint(blob).first;
        } else {
            Json wu = make_msg("weights_update");
            wu["version"] = version;
            wu["blob_b64"] = base64_encode(blob);
            send_message(control, wu);
        }
        Json ack = make_msg("ack");
        ack["epoch"] = epoch;
        ack["version"] = version;
        send_message(control, ack);
    }
    h.stop.store(true);
    if (action_thread.joinable()) action_thread.join();
}

// ---------------------------------------------------------------------------
// Actor

namespace {

struct ActorCtl {
    Phase phase = Phase::collecting;
    long epoch = 0;
    int version = 0;
    bool abort_once = false;     // one-shot operator abort for the current episode
    long pending_learn_ack = -1; // learning epoch whose ack is deferred mid-episode
};

// Applies one control push. Acks immediately unless it is a learning
// transition arriving mid-episode, whose ack waits until the actor pauses.
void actor_apply(Socket& control, ActorCtl& ctl, const Json& m, DenseNet* local_net,
                 bool in_episode) {
    const std::string type = m["type"].get<std::string>();
    if (type == "phase_change") {
        ctl.phase = phase_from_string(m.at("phase").get<std::string>());
        ctl.epoch = m.at("epoch").get<long>();
        if (ctl.phase == Phase::learning && in_episode) {
            ctl.pending_learn_ack = ctl.epoch;
        } else {
            Json ack = make_msg("ack");
            ack["epoch"] = ctl.epoch;
            send_message(control, ack);
        }
    } else if (type == "weights_update") {
        const int v = m.at("version").get<int>();
        if (v <= ctl.version) throw ProtocolError("weights version did not increase");
        if (local_net) {
            auto [net, meta] = deserialize_checkpoint(base64_decode(m.at("blob_b64").get<std::string>()));
            *local_net = std::move(net);
        }
        ctl.version = v;
        Json ack = make_msg("ack");
        ack["epoch"] = ctl.epoch;
        ack["version"] = v;
        send_message(control, ack);
    } else if (type == "operator_abort") {
        ctl.abort_once = true;
    }
    // status_reply and stray acks carry no state the actor needs here
}

void actor_drain(Socket& control, ActorCtl& ctl, DenseNet* local_net, bool in_episode,
                 int timeout_ms) {
    for (;;) {
        Json m;
        const RecvStatus rs = recv_message(control, m, timeout_ms);
        if (rs == RecvStatus::closed) throw ProtocolError("coordinator connection closed");
        if (rs == RecvStatus::timeout) return;
        actor_apply(control, ctl, m, local_net, in_episode);
        timeout_ms = 0;  // drain whatever else is queued without waiting
    }
}

void actor_ack_pending(Socket& control, ActorCtl& ctl) {
    if (ctl.pending_learn_ack < 0) return;
    Json ack = make_msg("ack");
    ack["epoch"] = ctl.pending_learn_ack;
    send_message(control, ack);
    ctl.pending_learn_ack = -1;
}

struct PendingQuery {
    int index = 0;  // observation index the query refers to
};

}  // namespace

void run_actor(const DistributedConfig& cfg, const std::string& name, RoleHandle& h) {
    validate(cfg.si);
    DenseNet local_net;
    ActionBinning ab;
    if (cfg.topology == Topology::v2) {
        auto [net, meta] = load_checkpoint(cfg.policy_ckpt);
        local_net = std::move(net);
        ab = default_action_binning(cfg.env, local_net.heads.action_bins);
    }
    Client coord(cfg.coordinator);
    Socket& control = coord.raw();
    Json hello = make_msg("hello");
    hello["role"] = "actor";
    hello["name"] = name;
    send_message(control, hello);
    Client replay_cli(cfg.replay);
    Client reward_cli(cfg.reward);
    Client action_cli(cfg.action);

    ActorCtl ctl;
    DenseNet* net_ptr = cfg.topology == Topology::v2 ? &local_net : nullptr;
    const std::string stream =
        cfg.n_actors == 1 ? std::string("collect") : "collect." + name;
    std::uint64_t ep_counter = 0;
    const int action_dims =
        cfg.topology == Topology::v2 ? local_net.heads.action_dims : cfg.env.obs_dim();
    // Episodes finished during a learning phase (keep-in-flight mode) wait
    // here until the next collecting phase.
    std::vector<Json> carry;
    h.ready.store(true);

    auto query_d = [&](const VectorXd& obs, const VectorXd& goal) {
        Json q = make_msg("steps_to_go");
        q["obs"] = vec_to_json(obs);
        q["goal"] = vec_to_json(goal);
        Json r = reward_cli.rpc(q);
        if (r["type"] == "error") throw ProtocolError("reward query rejected");
        return r.at("d").get<double>();
    };

    while (!h.stop.load()) {
        try {
            if (ctl.phase == Phase::done) break;
            if (ctl.phase == Phase::learning) {
                actor_ack_pending(control, ctl);
                actor_drain(control, ctl, net_ptr, false, cfg.poll_ms);
                continue;
            }
            // Between-episode gate: ask the coordinator for the current phase,
            // handling pushes while waiting for the reply.
            send_message(control, make_msg("status"));
            Json sr;
            for (;;) {
                Json m;
                const RecvStatus rs = recv_message(control, m, 30000);
                if (rs == RecvStatus::closed) throw ProtocolError("coordinator connection closed");
                if (rs == RecvStatus::timeout) throw ProtocolError("status reply timed out");
                if (m["type"] == "status_reply") {
                    sr = std::move(m);
                    break;
                }
                actor_apply(control, ctl, m, net_ptr, false);
            }
            if (ctl.phase != Phase::collecting) continue;
            // A full buffer means the coordinator is about to (or already did)
            // start a learning phase. Idle at the gate so the pause lands
            // between episodes rather than aborting a fresh one.
            const long need = static_cast<long>(cfg.si.n_updates) * cfg.si.batch_size;
            const bool full = sr.contains("buffer_size") && sr["buffer_size"].is_number() &&
                              sr["buffer_size"].get<long>() >= need;
            if (full || sr.value("phase", std::string("collecting")) != "collecting") {
                actor_drain(control, ctl, net_ptr, false, cfg.poll_ms);
                continue;
            }
            if (!carry.empty()) {
                for (auto& ap : carry) {
                    ap["epoch"] = ctl.epoch;
                    Json r = replay_cli.rpc(ap);
                    if (r["type"] == "error")
                        ++h.discarded;
                    else
                        ++h.episodes;
                }
                carry.clear();
            }

            // --- one episode ---
            Rng ep_rng = derive_stream(cfg.si.seed, stream, ep_counter++);
            Environment env(cfg.env);
            env.reset(ep_rng);
            const VectorXd goal = env.goal();
            std::vector<VectorXd> obs_list{env.obs()};
            std::vector<VectorXd> act_list;
            std::vector<double> d_list;
            std::deque<PendingQuery> pending;
            std::map<int, double> d_map;
            int success_at = -1;  // first observation index the detector flagged
            TerminationReason reason = TerminationReason::none;
            bool phase_break = false;

            if (cfg.success_lag == 0) {
                d_list.push_back(query_d(env.obs(), goal));
            } else {
                d_map[0] = query_d(env.obs(), goal);
            }

            for (int t = 0; t < cfg.si.max_episode_length; ++t) {
                actor_drain(control, ctl, net_ptr, true, 0);
                if (ctl.phase == Phase::done) {
                    phase_break = true;
                    break;
                }
                if (ctl.phase == Phase::learning && cfg.abort_in_flight) {
                    phase_break = true;
                    break;
                }
                if (ctl.abort_once) {
                    ctl.abort_once = false;
                    reason = TerminationReason::operator_abort;
                    break;
                }

                std::vector<double> u(static_cast<std::size_t>(action_dims));
                for (auto& x : u) x = ep_rng.next_double();
                VectorXd a;
                if (cfg.topology == Topology::v2) {
                    a = sampled_action(local_net, env.obs(), goal, ab, u);
                } else {
                    Json q = make_msg("sample_action");
                    q["obs"] = vec_to_json(env.obs());
                    q["goal"] = vec_to_json(goal);
                    q["u"] = u;
                    Json r = action_cli.rpc(q);
                    if (r["type"] == "error") throw ProtocolError("action query rejected");
                    a = vec_from_json(r.at("action"));
                }
                const StepResult sr = env.step(a);
                ++h.env_steps;
                obs_list.push_back(sr.next_obs);
                act_list.push_back(a);

                if (cfg.success_lag == 0) {
                    const double d = query_d(sr.next_obs, goal);
                    d_list.push_back(d);
                    if (detect_success(d, cfg.si.success_threshold)) {
                        reason = TerminationReason::detector_success;
                        break;
                    }
                } else {
                    // Async success checks: harvest any answered query, then
                    // keep one in flight against the most recent observation.
                    // The 1 ms grace keeps the detection lag at <= 2 steps
                    // whenever the server answers within a step-time.
                    Socket& rsock = reward_cli.raw();
                    Json rm;
                    while (!pending.empty() && recv_message(rsock, rm, 1) == RecvStatus::ok) {
                        if (rm["type"] == "error") throw ProtocolError("reward query rejected");
                        const int idx = rm.at("tag").get<int>();
                        const double d = rm.at("d").get<double>();
                        d_map[idx] = d;
                        if (detect_success(d, cfg.si.success_threshold) &&
                            (success_at < 0 || idx < success_at))
                            success_at = idx;
                        pending.pop_front();
                    }
                    if (success_at >= 0) {
                        reason = TerminationReason::detector_success;
                        break;
                    }
                    if (pending.empty()) {
                        Json q = make_msg("steps_to_go");
                        q["obs"] = vec_to_json(sr.next_obs);
                        q["goal"] = vec_to_json(goal);
                        q["tag"] = t + 1;
                        send_message(rsock, q);
                        pending.push_back(PendingQuery{t + 1});
                    }
                }
                if (sr.terminated) {
                    reason = sr.reason;
                    break;
                }
                if (t + 1 == cfg.si.max_episode_length) reason = TerminationReason::max_length;
            }

            if (phase_break || reason == TerminationReason::operator_abort) {
                ++h.discarded;
                // Drain any in-flight reward replies so the connection stays aligned.
                if (!pending.empty()) {
                    Socket& rsock = reward_cli.raw();
                    Json rm;
                    while (!pending.empty() && recv_message(rsock, rm, 1000) == RecvStatus::ok)
                        pending.pop_front();
                }
                continue;
            }

            // Label the episode from the d-values, filling any gaps left by
            // lagging checks, then ship it whole.
            int T = static_cast<int>(act_list.size());
            if (cfg.success_lag > 0) {
                Socket& rsock = reward_cli.raw();
                Json rm;
                while (!pending.empty()) {
                    if (recv_message(rsock, rm, 10000) != RecvStatus::ok)
                        throw ProtocolError("reward reply timed out");
                    if (rm["type"] == "error") throw ProtocolError("reward query rejected");
                    d_map[rm.at("tag").get<int>()] = rm.at("d").get<double>();
                    pending.pop_front();
                }
                for (int i = 0; i <= T; ++i)
                    if (!d_map.count(i)) d_map[i] = query_d(obs_list[static_cast<std::size_t>(i)], goal);
                d_list.resize(static_cast<std::size_t>(T) + 1);
                for (int i = 0; i <= T; ++i) d_list[static_cast<std::size_t>(i)] = d_map[i];
                // Truncate at the first success the detector (belatedly) saw.
                for (int i = 1; i <= T; ++i) {
                    if (detect_success(d_list[static_cast<std::size_t>(i)], cfg.si.success_threshold)) {
                        T = i;
                        break;
                    }
                }
            }

            std::vector<double> rewards;
            for (int i = 0; i < T; ++i) {
                const bool suc = detect_success(d_list[static_cast<std::size_t>(i + 1)],
                                                cfg.si.success_threshold);
                rewards.push_back(reward(d_list[static_cast<std::size_t>(i)],
                                         d_list[static_cast<std::size_t>(i + 1)], suc,
                                         cfg.si.bonus_beta));
            }
            const std::vector<double> returns = monte_carlo_returns(rewards, cfg.si.gamma);
            Json items = Json::array();
            for (int i = 0; i < T; ++i) {
                ReplayItem it;
                it.obs = obs_list[static_cast<std::size_t>(i)];
                it.action = act_list[static_cast<std::size_t>(i)];
                it.goal = goal;
                it.ret = returns[static_cast<std::size_t>(i)];
                items.push_back(replay_item_to_json(it));
            }
            Json ap = make_msg("append_items");
            ap["episode_id"] = name + "/" + std::to_string(ep_counter - 1);
            ap["epoch"] = ctl.epoch;
            ap["items"] = std::move(items);
            if (ctl.phase == Phase::collecting) {
                Json r = replay_cli.rpc(ap);
                if (r["type"] == "error")
                    ++h.discarded;
                else
                    ++h.episodes;
            } else {
                carry.push_back(std::move(ap));
            }
        } catch (const ProtocolError& e) {
            STG_ERROR("actor %s: %s; episode discarded", name.c_str(), e.what());
            ++h.discarded;
            replay_cli.reset();
            reward_cli.reset();
            action_cli.reset();
            sleep_ms(cfg.poll_ms);
            if (h.stop.load()) break;
        }
    }
    // A learning ack may still be owed after a phase-break episode discard.
    try {
        actor_ack_pending(control, ctl);
    } catch (const ProtocolError&) {
    }
}

}  // namespace stg
