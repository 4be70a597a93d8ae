#include "stg/env.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "stg/common.hpp"

namespace stg {

const char* to_string(TerminationReason r) {
    switch (r) {
        case TerminationReason::none: return "none";
        case TerminationReason::ground_truth_success: return "ground_truth_success";
        case TerminationReason::detector_success: return "detector_success";
        case TerminationReason::max_length: return "max_length";
        case TerminationReason::operator_abort: return "operator_abort";
    }
    return "?";
}

VectorXd pointmass_transition(const PointmassConfig& cfg, const VectorXd& pos,
                              const VectorXd& action, long* clip_count) {
    if (pos.size() != 2 || action.size() != 2)
        throw ConfigError("pointmass_transition: expected 2-D vectors");
    VectorXd a = action;
    bool clipped = false;
    for (int i = 0; i < 2; ++i) {
        if (std::abs(a(i)) > cfg.a_max) {
            a(i) = std::clamp(a(i), -cfg.a_max, cfg.a_max);
            clipped = true;
        }
    }
    if (clipped && clip_count) ++*clip_count;
    VectorXd next = pos + a;
    for (int i = 0; i < 2; ++i) next(i) = std::clamp(next(i), -cfg.bound, cfg.bound);
    return next;
}

VectorXd cell_to_obs(const GridworldConfig& cfg, GridCell c) {
    VectorXd o(2);
    o(0) = cfg.width <= 1 ? 0.0 : -1.0 + 2.0 * c.x / (cfg.width - 1);
    o(1) = cfg.height <= 1 ? 0.0 : -1.0 + 2.0 * c.y / (cfg.height - 1);
    return o;
}

GridCell obs_to_cell(const GridworldConfig& cfg, const VectorXd& obs) {
    GridCell c;
    c.x = static_cast<int>(std::lround((obs(0) + 1.0) * (cfg.width - 1) / 2.0));
    c.y = static_cast<int>(std::lround((obs(1) + 1.0) * (cfg.height - 1) / 2.0));
    c.x = std::clamp(c.x, 0, cfg.width - 1);
    c.y = std::clamp(c.y, 0, cfg.height - 1);
    return c;
}

bool cell_blocked(const GridworldConfig& cfg, GridCell c) {
    if (c.x < 0 || c.x >= cfg.width || c.y < 0 || c.y >= cfg.height) return true;
    for (const auto& o : cfg.obstacles)
        if (o == c) return true;
    return false;
}

std::pair<int, int> gridworld_move(const VectorXd& action) {
    if (action.size() != 2) throw ConfigError("gridworld_move: expected 2-D action");
    double ax = action(0), ay = action(1);
    if (std::abs(ax) < 0.5 && std::abs(ay) < 0.5) return {0, 0};
    if (std::abs(ax) >= std::abs(ay)) return {ax > 0 ? 1 : -1, 0};
    return {0, ay > 0 ? 1 : -1};
}

VectorXd gridworld_transition(const GridworldConfig& cfg, const VectorXd& obs,
                              const VectorXd& action) {
    GridCell c = obs_to_cell(cfg, obs);
    auto [dx, dy] = gridworld_move(action);
    GridCell n{c.x + dx, c.y + dy};
    if (cell_blocked(cfg, n)) n = c;
    return cell_to_obs(cfg, n);
}

bool ground_truth_success(const EnvConfig& cfg, const VectorXd& obs, const VectorXd& goal) {
    if (cfg.kind == EnvKind::pointmass)
        return (obs - goal).norm() <= cfg.pm.eps_goal;
    return obs_to_cell(cfg.gw, obs) == obs_to_cell(cfg.gw, goal);
}

int bfs_steps_to_go(const GridworldConfig& cfg, GridCell pos, GridCell goal) {
    if (cell_blocked(cfg, pos) || cell_blocked(cfg, goal))
        throw ConfigError("bfs_steps_to_go: blocked endpoint");
    std::vector<int> dist(static_cast<std::size_t>(cfg.width) * cfg.height, -1);
    auto idx = [&](GridCell c) { return static_cast<std::size_t>(c.y) * cfg.width + c.x; };
    std::queue<GridCell> q;
    dist[idx(pos)] = 0;
    q.push(pos);
    const int dx[4] = {1, -1, 0, 0};
    const int dy[4] = {0, 0, 1, -1};
    while (!q.empty()) {
        GridCell c = q.front();
        q.pop();
        if (c == goal) return dist[idx(c)];
        for (int k = 0; k < 4; ++k) {
            GridCell n{c.x + dx[k], c.y + dy[k]};
            if (cell_blocked(cfg, n) || dist[idx(n)] >= 0) continue;
            dist[idx(n)] = dist[idx(c)] + 1;
            q.push(n);
        }
    }
    throw ConfigError("bfs_steps_to_go: goal unreachable");
}

std::pair<VectorXd, VectorXd> sample_start_goal(const EnvConfig& cfg, Rng& rng) {
    if (cfg.kind == EnvKind::pointmass) {
        const auto& pm = cfg.pm;
        VectorXd s(2), g(2);
        s << rng.uniform(-pm.bound, pm.bound), rng.uniform(-pm.bound, pm.bound);
        for (;;) {
            g << rng.uniform(-pm.bound, pm.bound), rng.uniform(-pm.bound, pm.bound);
            if ((s - g).norm() >= 2.0 * pm.eps_goal) break;
        }
        return {s, g};
    }
    const auto& gw = cfg.gw;
    auto draw = [&] {
        for (;;) {
            GridCell c{static_cast<int>(rng.next_below(gw.width)),
                       static_cast<int>(rng.next_below(gw.height))};
            if (!cell_blocked(gw, c)) return c;
        }
    };
    GridCell s = draw();
    for (;;) {
        GridCell g = draw();
        if (!(g == s)) return {cell_to_obs(gw, s), cell_to_obs(gw, g)};
    }
}

std::pair<VectorXd, VectorXd> Environment::reset(Rng& rng) {
    auto [s, g] = sample_start_goal(cfg_, rng);
    reset_to(s, g);
    return {obs_, goal_};
}

void Environment::reset_to(const VectorXd& start, const VectorXd& goal) {
    obs_ = start;
    goal_ = goal;
    t_ = 0;
}

StepResult Environment::step(const VectorXd& action) {
    if (cfg_.kind == EnvKind::pointmass)
        obs_ = pointmass_transition(cfg_.pm, obs_, action, &clip_count_);
    else
        obs_ = gridworld_transition(cfg_.gw, obs_, action);
    ++t_;
    StepResult r;
    r.next_obs = obs_;
    if (ground_truth_success(cfg_, obs_, goal_)) {
        r.terminated = true;
        r.reason = TerminationReason::ground_truth_success;
    } else if (t_ >= cfg_.max_episode_length()) {
        r.terminated = true;
        r.reason = TerminationReason::max_length;
    }
    return r;
}

}  // namespace stg
