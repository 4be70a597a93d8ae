#include "stg/demonstrator.hpp"

#include <cmath>
#include <numbers>

#include "stg/common.hpp"

namespace stg {

namespace {

double circular_distance_deg(double a, double b) {
  double d = std::fmod(std::fabs(a - b), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

}  // namespace

PointmassDemonstrator::PointmassDemonstrator(const PointmassDemoConfig& cfg,
                                             const PointmassConfig& env,
                                             std::uint64_t seed)
    : cfg_(cfg), env_(env) {
  if (cfg_.num_waypoints < 1) throw ConfigError("demonstrator needs at least one waypoint");
  Rng rng = derive_stream(seed, "demo.waypoints", 0);
  const double spacing = 360.0 / cfg_.num_waypoints;
  const double base = rng.uniform(0.0, 360.0);
  for (int k = 0; k < cfg_.num_waypoints; ++k) {
    double ang = base + spacing * k + rng.uniform(-cfg_.jitter_deg, cfg_.jitter_deg);
    double r = rng.uniform(cfg_.ring_r_min, cfg_.ring_r_max);
    double rad = ang * std::numbers::pi / 180.0;
    VectorXd w(2);
    w << r * std::cos(rad), r * std::sin(rad);
    waypoints_.push_back(w);
    angles_deg_.push_back(std::fmod(std::fmod(ang, 360.0) + 360.0, 360.0));
  }
}

std::vector<int> PointmassDemonstrator::tour_order(const VectorXd& goal) const {
  const double goal_ang =
      std::fmod(std::atan2(goal[1], goal[0]) * 180.0 / std::numbers::pi + 360.0, 360.0);
  int lap_end = 0;
  double best = circular_distance_deg(angles_deg_[0], goal_ang);
  for (int k = 1; k < static_cast<int>(waypoints_.size()); ++k) {
    double d = circular_distance_deg(angles_deg_[k], goal_ang);
    if (d < best) {
      best = d;
      lap_end = k;
    }
  }
  const int n = static_cast<int>(waypoints_.size());
  std::vector<int> order;
  for (int i = 1; i <= n; ++i) order.push_back((lap_end + i) % n);
  return order;
}

void PointmassDemonstrator::begin_episode(const VectorXd& start, const VectorXd& goal) {
  targets_.clear();
  for (int idx : tour_order(goal)) targets_.push_back(waypoints_[idx]);
  targets_.push_back(goal);
  prev_ = start;
  target_idx_ = 0;
}

VectorXd PointmassDemonstrator::act(const VectorXd& obs) {
  while (target_idx_ + 1 < targets_.size() &&
         (obs - targets_[target_idx_]).norm() <= env_.eps_goal) {
    ++target_idx_;
  }
  VectorXd err = targets_[target_idx_] - obs;
  VectorXd vel = obs - prev_;
  VectorXd a = cfg_.kp * err - cfg_.kd * vel;
  for (int i = 0; i < a.size(); ++i)
    a[i] = std::clamp(a[i], -env_.a_max, env_.a_max);
  prev_ = obs;
  return a;
}

GridworldDemonstrator::GridworldDemonstrator(const GridworldDemoConfig&,
                                             const GridworldConfig& env,
                                             std::uint64_t seed)
    : env_(env) {
  Rng rng = derive_stream(seed, "demo.detour", 0);
  const int w = env_.width;
  const int candidates[4] = {0, 1, w - 2, w - 1};
  detour_col_ = candidates[rng.next_below(4)];
}

void GridworldDemonstrator::begin_episode(const GridCell&, const GridCell& goal) {
  goal_ = goal;
}

VectorXd GridworldDemonstrator::act(const GridCell& cell) const {
  int dx = 0, dy = 0;
  if (cell.y != goal_.y) {
    if (cell.x != detour_col_) {
      dx = detour_col_ > cell.x ? 1 : -1;
    } else {
      dy = goal_.y > cell.y ? 1 : -1;
    }
  } else {
    if (cell.x != goal_.x) dx = goal_.x > cell.x ? 1 : -1;
  }
  VectorXd a(2);
  a << static_cast<double>(dx), static_cast<double>(dy);
  return a;
}

int GridworldDemonstrator::remaining_steps(const GridCell& cell, const GridCell& goal) const {
  if (cell.y != goal.y) {
    return std::abs(cell.x - detour_col_) + std::abs(cell.y - goal.y) +
           std::abs(detour_col_ - goal.x);
  }
  return std::abs(cell.x - goal.x);
}

}  // namespace stg
