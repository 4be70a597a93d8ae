#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "stg/linalg.hpp"
#include "stg/rng.hpp"

namespace stg {

enum class EnvKind { pointmass, gridworld };

enum class TerminationReason : std::uint8_t {
    none = 0,
    ground_truth_success = 1,
    detector_success = 2,
    max_length = 3,
    operator_abort = 4,
};

const char* to_string(TerminationReason r);

struct PointmassConfig {
    double bound = 1.0;
    double a_max = 0.05;
    double eps_goal = 0.05;
    int max_episode_length = 200;
};

struct GridCell {
    int x = 0;
    int y = 0;
    bool operator==(const GridCell& o) const { return x == o.x && y == o.y; }
};

struct GridworldConfig {
    int width = 9;
    int height = 9;
    std::vector<GridCell> obstacles;
    int max_episode_length = 64;
};

struct EnvConfig {
    EnvKind kind = EnvKind::pointmass;
    PointmassConfig pm;
    GridworldConfig gw;

    int obs_dim() const { return 2; }
    int max_episode_length() const {
        return kind == EnvKind::pointmass ? pm.max_episode_length : gw.max_episode_length;
    }
};

struct StepResult {
    VectorXd next_obs;
    bool terminated = false;
    TerminationReason reason = TerminationReason::none;
};

// Pure transition functions; clip_count increments when an out-of-bounds
// action had to be clipped.
VectorXd pointmass_transition(const PointmassConfig& cfg, const VectorXd& pos,
                              const VectorXd& action, long* clip_count = nullptr);
VectorXd gridworld_transition(const GridworldConfig& cfg, const VectorXd& obs,
                              const VectorXd& action);

bool ground_truth_success(const EnvConfig& cfg, const VectorXd& obs, const VectorXd& goal);

// Gridworld cell/observation mapping. Observations are cell centers normalized
// to [-1, 1] per axis.
VectorXd cell_to_obs(const GridworldConfig& cfg, GridCell c);
GridCell obs_to_cell(const GridworldConfig& cfg, const VectorXd& obs);
bool cell_blocked(const GridworldConfig& cfg, GridCell c);

// Continuous action to 4-way move: dominant axis, magnitude threshold 0.5,
// ties prefer x. Returns (dx, dy) in {-1, 0, 1} with at most one nonzero.
std::pair<int, int> gridworld_move(const VectorXd& action);

// Exact shortest-path length (4-connected); throws if unreachable.
int bfs_steps_to_go(const GridworldConfig& cfg, GridCell pos, GridCell goal);

std::pair<VectorXd, VectorXd> sample_start_goal(const EnvConfig& cfg, Rng& rng);

// Stateful wrapper used by rollouts. Terminates on ground-truth success or
// max length; detector and abort terminations are imposed by callers.
class Environment {
  public:
    explicit Environment(const EnvConfig& cfg) : cfg_(cfg) {}

    // Starts an episode from a sampled (start, goal).
    std::pair<VectorXd, VectorXd> reset(Rng& rng);
    // Starts an episode from a given (start, goal).
    void reset_to(const VectorXd& start, const VectorXd& goal);

    StepResult step(const VectorXd& action);

    const VectorXd& obs() const { return obs_; }
    const VectorXd& goal() const { return goal_; }
    int t() const { return t_; }
    long clip_count() const { return clip_count_; }
    const EnvConfig& config() const { return cfg_; }

  private:
    EnvConfig cfg_;
    VectorXd obs_;
    VectorXd goal_;
    int t_ = 0;
    long clip_count_ = 0;
};

}  // namespace stg
