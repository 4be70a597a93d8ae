#pragma once

#include <cstdint>
#include <vector>

#include "stg/env.hpp"
#include "stg/rng.hpp"

namespace stg {

// Scripted suboptimal demonstrators. Both are deterministic given (config, seed,
// episode start state); both produce episodes measurably longer than a direct run.

struct PointmassDemoConfig {
  int num_waypoints = 5;
  // Waypoints are placed on a jittered ring: angle k gets base + k*360/n + U(-jitter, jitter)
  // degrees, radius U(r_min, r_max). Spreading them angularly keeps legs long and
  // non-overlapping, which keeps the tour learnable from position alone.
  double ring_r_min = 0.45;
  double ring_r_max = 0.75;
  double jitter_deg = 25.0;
  double kp = 1.0;
  double kd = 0.2;
};

struct GridworldDemoConfig {
  // Detour column candidates are the two leftmost and two rightmost columns; the
  // seed picks one. The route (go to the detour column, ride it to the goal row,
  // then walk to the goal) is a pure function of (cell, goal), so remaining-steps
  // labels are exact integers.
};

struct DemonstratorConfig {
  EnvKind kind = EnvKind::pointmass;
  PointmassDemoConfig pm;
  GridworldDemoConfig gw;
  std::uint64_t seed = 0;
};

// Pointmass: PD controller touring num_waypoints ring waypoints, then the goal.
// The waypoint set is fixed at construction from the seed; the visit order is
// re-anchored per episode so the lap ends at the waypoint angularly nearest the
// goal. That makes the current target mostly inferable from (position, goal),
// which matters because the BC policy observes position only.
class PointmassDemonstrator {
 public:
  PointmassDemonstrator(const PointmassDemoConfig& cfg, const PointmassConfig& env,
                        std::uint64_t seed);

  void begin_episode(const VectorXd& start, const VectorXd& goal);
  // PD action toward the current target; target advances when within eps_goal.
  VectorXd act(const VectorXd& obs);

  const std::vector<VectorXd>& waypoints() const { return waypoints_; }
  // Visit order for a given goal (indices into waypoints()), lap-end last.
  std::vector<int> tour_order(const VectorXd& goal) const;

 private:
  PointmassDemoConfig cfg_;
  PointmassConfig env_;
  std::vector<VectorXd> waypoints_;
  std::vector<double> angles_deg_;
  std::vector<VectorXd> targets_;
  VectorXd prev_;
  std::size_t target_idx_ = 0;
};

// Gridworld: walk to a fixed detour column, ride it to the goal row, then walk to
// the goal. Memoryless: the action is a pure function of (cell, goal).
class GridworldDemonstrator {
 public:
  GridworldDemonstrator(const GridworldDemoConfig& cfg, const GridworldConfig& env,
                        std::uint64_t seed);

  void begin_episode(const GridCell& start, const GridCell& goal);
  VectorXd act(const GridCell& cell) const;

  // Exact steps remaining on the scripted route from `cell` to goal.
  int remaining_steps(const GridCell& cell, const GridCell& goal) const;
  int detour_column() const { return detour_col_; }

 private:
  GridworldConfig env_;
  int detour_col_ = 0;
  GridCell goal_{0, 0};
};

}  // namespace stg
