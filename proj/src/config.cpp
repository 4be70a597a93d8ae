#include "stg/config.hpp"

#include <string>

#include "stg/common.hpp"

namespace stg {

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const char* ctx) {
  if (!j.is_object()) throw ConfigError(std::string(ctx) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError(std::string(ctx) + ": unknown key '" + it.key() + "'");
  }
}

namespace {

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

Json to_json(const PointmassConfig& c) {
  return Json{{"bound", c.bound},
              {"a_max", c.a_max},
              {"eps_goal", c.eps_goal},
              {"max_episode_length", c.max_episode_length}};
}

void from_json(const Json& j, PointmassConfig& c) {
  check_keys(j, {"bound", "a_max", "eps_goal", "max_episode_length"}, "pointmass");
  read(j, "bound", c.bound);
  read(j, "a_max", c.a_max);
  read(j, "eps_goal", c.eps_goal);
  read(j, "max_episode_length", c.max_episode_length);
  if (c.a_max <= 0 || c.eps_goal <= 0 || c.bound <= 0 || c.max_episode_length < 1)
    throw ConfigError("pointmass: non-positive parameter");
}

Json to_json(const GridworldConfig& c) {
  Json obs = Json::array();
  for (const auto& cell : c.obstacles) obs.push_back(Json::array({cell.x, cell.y}));
  return Json{{"width", c.width},
              {"height", c.height},
              {"obstacles", obs},
              {"max_episode_length", c.max_episode_length}};
}

void from_json(const Json& j, GridworldConfig& c) {
  check_keys(j, {"width", "height", "obstacles", "max_episode_length"}, "gridworld");
  read(j, "width", c.width);
  read(j, "height", c.height);
  read(j, "max_episode_length", c.max_episode_length);
  if (j.contains("obstacles")) {
    c.obstacles.clear();
    for (const auto& cell : j.at("obstacles")) {
      if (!cell.is_array() || cell.size() != 2)
        throw ConfigError("gridworld: obstacle must be [x, y]");
      c.obstacles.push_back({cell[0].get<int>(), cell[1].get<int>()});
    }
  }
  if (c.width < 2 || c.height < 2 || c.max_episode_length < 1)
    throw ConfigError("gridworld: degenerate dimensions");
}

namespace {

const char* kind_name(EnvKind k) {
  return k == EnvKind::pointmass ? "pointmass" : "gridworld";
}

EnvKind kind_from_name(const std::string& s) {
  if (s == "pointmass") return EnvKind::pointmass;
  if (s == "gridworld") return EnvKind::gridworld;
  throw ConfigError("unknown env kind '" + s + "'");
}

}  // namespace

Json to_json(const EnvConfig& c) {
  return Json{{"kind", kind_name(c.kind)},
              {"pointmass", to_json(c.pm)},
              {"gridworld", to_json(c.gw)}};
}

void from_json(const Json& j, EnvConfig& c) {
  check_keys(j, {"kind", "pointmass", "gridworld"}, "env");
  if (j.contains("kind")) c.kind = kind_from_name(j.at("kind").get<std::string>());
  if (j.contains("pointmass")) from_json(j.at("pointmass"), c.pm);
  if (j.contains("gridworld")) from_json(j.at("gridworld"), c.gw);
}

Json to_json(const PointmassDemoConfig& c) {
  return Json{{"num_waypoints", c.num_waypoints}, {"ring_r_min", c.ring_r_min},
              {"ring_r_max", c.ring_r_max},       {"jitter_deg", c.jitter_deg},
              {"kp", c.kp},                       {"kd", c.kd}};
}

void from_json(const Json& j, PointmassDemoConfig& c) {
  check_keys(j, {"num_waypoints", "ring_r_min", "ring_r_max", "jitter_deg", "kp", "kd"},
             "demonstrator.pointmass");
  read(j, "num_waypoints", c.num_waypoints);
  read(j, "ring_r_min", c.ring_r_min);
  read(j, "ring_r_max", c.ring_r_max);
  read(j, "jitter_deg", c.jitter_deg);
  read(j, "kp", c.kp);
  read(j, "kd", c.kd);
  if (c.num_waypoints < 1) throw ConfigError("demonstrator: num_waypoints < 1");
  if (!(c.ring_r_min > 0) || !(c.ring_r_max >= c.ring_r_min))
    throw ConfigError("demonstrator: bad ring radii");
}

Json to_json(const DemonstratorConfig& c) {
  return Json{{"kind", kind_name(c.kind)},
              {"pointmass", to_json(c.pm)},
              {"gridworld", Json::object()},
              {"seed", c.seed}};
}

void from_json(const Json& j, DemonstratorConfig& c) {
  check_keys(j, {"kind", "pointmass", "gridworld", "seed"}, "demonstrator");
  if (j.contains("kind")) c.kind = kind_from_name(j.at("kind").get<std::string>());
  if (j.contains("pointmass")) from_json(j.at("pointmass"), c.pm);
  if (j.contains("gridworld"))
    check_keys(j.at("gridworld"), {}, "demonstrator.gridworld");
  read(j, "seed", c.seed);
}

Json to_json(const NetConfig& c) {
  return Json{{"obs_dim", c.obs_dim},         {"hidden", c.hidden},
              {"activation", to_string(c.act)}, {"action_dims", c.action_dims},
              {"action_bins", c.action_bins}, {"steps_bins", c.steps_bins}};
}

void from_json(const Json& j, NetConfig& c) {
  check_keys(j, {"obs_dim", "hidden", "activation", "action_dims", "action_bins", "steps_bins"},
             "net");
  read(j, "obs_dim", c.obs_dim);
  read(j, "hidden", c.hidden);
  if (j.contains("activation"))
    c.act = activation_from_string(j.at("activation").get<std::string>());
  read(j, "action_dims", c.action_dims);
  read(j, "action_bins", c.action_bins);
  read(j, "steps_bins", c.steps_bins);
  if (c.obs_dim < 1 || c.hidden.empty() || c.action_dims < 1 || c.action_bins < 2 ||
      c.steps_bins < 2)
    throw ConfigError("net: degenerate architecture");
}

Json to_json(const AdamWConfig& c) {
  return Json{{"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"weight_decay", c.weight_decay}};
}

void from_json(const Json& j, AdamWConfig& c) {
  check_keys(j, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "adamw");
  read(j, "lr", c.lr);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "eps", c.eps);
  read(j, "weight_decay", c.weight_decay);
  if (c.lr < 0 || c.eps <= 0 || c.weight_decay < 0 || c.beta1 < 0 || c.beta1 >= 1 ||
      c.beta2 < 0 || c.beta2 >= 1)
    throw ConfigError("adamw: parameter out of range");
}

Json to_json(const SftConfig& c) {
  return Json{{"net", to_json(c.net)},
              {"batch_size", c.batch_size},
              {"opt", to_json(c.opt)},
              {"total_steps", c.total_steps},
              {"val_interval", c.val_interval},
              {"seed", c.seed}};
}

void from_json(const Json& j, SftConfig& c) {
  check_keys(j, {"net", "batch_size", "opt", "total_steps", "val_interval", "seed"}, "sft");
  if (j.contains("net")) from_json(j.at("net"), c.net);
  read(j, "batch_size", c.batch_size);
  if (j.contains("opt")) from_json(j.at("opt"), c.opt);
  read(j, "total_steps", c.total_steps);
  read(j, "val_interval", c.val_interval);
  read(j, "seed", c.seed);
  if (c.batch_size < 1 || c.total_steps < 1 || c.val_interval < 1)
    throw ConfigError("sft: non-positive schedule parameter");
}

Json to_json(const StopCriterion& c) {
  return Json{{"max_iterations", c.max_iterations},
              {"max_env_steps", c.max_env_steps},
              {"plateau_stop", c.plateau_stop}};
}

void from_json(const Json& j, StopCriterion& c) {
  check_keys(j, {"max_iterations", "max_env_steps", "plateau_stop"}, "stop");
  read(j, "max_iterations", c.max_iterations);
  read(j, "max_env_steps", c.max_env_steps);
  read(j, "plateau_stop", c.plateau_stop);
  if (c.max_iterations < 1) throw ConfigError("stop: max_iterations < 1");
  if (c.max_env_steps < 0) throw ConfigError("stop: max_env_steps < 0");
}

Json to_json(const SelfImproveConfig& c) {
  return Json{{"gamma", c.gamma},
              {"c", c.c},
              {"n_updates", c.n_updates},
              {"batch_size", c.batch_size},
              {"max_episode_length", c.max_episode_length},
              {"success_threshold", c.success_threshold},
              {"bonus_beta", c.bonus_beta},
              {"opt", to_json(c.opt)},
              {"seed", c.seed},
              {"stop", to_json(c.stop)},
              {"eval_interval", c.eval_interval},
              {"eval_episodes", c.eval_episodes},
              {"include_aborted", c.include_aborted}};
}

void from_json(const Json& j, SelfImproveConfig& c) {
  check_keys(j,
             {"gamma", "c", "n_updates", "batch_size", "max_episode_length",
              "success_threshold", "bonus_beta", "opt", "seed", "stop", "eval_interval",
              "eval_episodes", "include_aborted"},
             "selfimprove");
  read(j, "gamma", c.gamma);
  read(j, "c", c.c);
  read(j, "n_updates", c.n_updates);
  read(j, "batch_size", c.batch_size);
  read(j, "max_episode_length", c.max_episode_length);
  read(j, "success_threshold", c.success_threshold);
  read(j, "bonus_beta", c.bonus_beta);
  if (j.contains("opt")) from_json(j.at("opt"), c.opt);
  read(j, "seed", c.seed);
  if (j.contains("stop")) from_json(j.at("stop"), c.stop);
  read(j, "eval_interval", c.eval_interval);
  read(j, "eval_episodes", c.eval_episodes);
  read(j, "include_aborted", c.include_aborted);
  validate(c);
}

std::uint64_t config_hash(const Json& j) {
  const std::string dump = j.dump();  // nlohmann objects iterate in sorted key order
  return fnv1a64(dump.data(), dump.size());
}

}  // namespace stg
