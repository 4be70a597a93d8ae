#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "stg/config.hpp"
#include "stg/demonstrator.hpp"
#include "stg/env.hpp"
#include "stg/rng.hpp"

namespace stg {

struct EpisodeRecord {
  std::vector<VectorXd> observations;  // length T + 1
  std::vector<VectorXd> actions;       // length T
  VectorXd goal;
  bool success = false;
  TerminationReason reason = TerminationReason::none;
  std::vector<std::uint32_t> steps_to_go;  // length T + 1; label at t is T - t

  int length() const { return static_cast<int>(actions.size()); }
};

// Uniform binning of [0, max_steps] for the steps-to-go head.
struct Binning {
  double max_steps = 200.0;
  int num_bins = 50;

  double width() const { return max_steps / num_bins; }
  int bin_index(double steps) const;
  double midpoint(int bin) const { return (bin + 0.5) * width(); }
};

// Per-dimension uniform binning of [-a_max, a_max] for action discretization.
struct ActionBinning {
  double a_max = 0.05;
  int num_bins = 21;

  int bin_index(double a) const;
  double center(int bin) const { return -a_max + (bin + 0.5) * (2.0 * a_max / num_bins); }
};

struct SupervisedTuple {
  VectorXd obs;
  VectorXd action;  // empty for terminal-state steps-to-go tuples
  VectorXd goal;
  std::uint32_t steps_to_go = 0;
};

struct Dataset {
  EnvConfig env;
  DemonstratorConfig demonstrator;
  Binning steps_binning;
  ActionBinning action_binning;
  std::string split_tag = "full";
  std::vector<EpisodeRecord> episodes;

  std::size_t total_steps() const;
};

struct GenerateReport {
  int requested = 0;
  int regenerated = 0;  // demonstrator rollouts that missed the goal and were redrawn
};

// n successful demonstrator episodes; failed rollouts are redrawn from fresh
// streams and counted. Aborts if the failure rate exceeds 50%.
Dataset generate_demos(const EnvConfig& env, const DemonstratorConfig& demo, int n_episodes,
                       std::uint64_t seed, GenerateReport* report = nullptr);

// Uniform over episodes, then uniform over t in [0, T-1]; label = T - t.
SupervisedTuple sample_tuple(const Dataset& ds, Rng& rng);
// Variant for the steps-to-go head: t in [0, T], terminal included with label 0.
SupervisedTuple sample_stg_tuple(const Dataset& ds, Rng& rng);

// Episode-level split; never cuts inside an episode.
std::pair<Dataset, Dataset> split(const Dataset& ds, double val_fraction, std::uint64_t seed);
Dataset subsample(const Dataset& ds, double fraction, std::uint64_t seed);

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(const std::uint8_t* data, std::size_t size);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Mean direct-PD episode length (no waypoints) over n seeded episodes; the
// subopt audit compares the demonstrator against this.
double mean_direct_pd_length(const EnvConfig& env, const PointmassDemoConfig& demo, int n,
                             std::uint64_t seed);

}  // namespace stg
