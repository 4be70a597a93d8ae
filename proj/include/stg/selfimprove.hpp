#pragma once

#include <atomic>
#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

#include "stg/dataset.hpp"
#include "stg/env.hpp"
#include "stg/nnet.hpp"
#include "stg/sft.hpp"

namespace stg {

struct StepsToGoDistribution {
    VectorXd probs;
    Binning binning;
};

// d(o, g): the probability-weighted mean of the bin midpoints.
double expected_steps_to_go(const StepsToGoDistribution& dist);

// r = d_t - d_next, plus the bonus when the next state counts as a success.
double reward(double d_t, double d_next, bool success_next, double beta);

bool detect_success(double d, double s);

// Discounted returns by backward recursion R_t = r_t + gamma * R_{t+1}.
std::vector<double> monte_carlo_returns(const std::vector<double>& rewards, double gamma);

// The REINFORCE scale constant: (1 - gamma) / n_speedup.
double c_heuristic(double gamma, double n_speedup);

// Max per-step residual of the shaped-reward decomposition
// r = (1-gamma)*V(o') + [gamma*V(o') - V(o)] with V = -d and beta = 0.
// Algebraically zero; any residual is float noise.
double shaping_decomposition_check(const std::vector<double>& d_values, double gamma);

// Per-step residuals for externally supplied rewards (isolates the bonus:
// at success steps the residual equals beta exactly).
std::vector<double> shaping_residuals(const std::vector<double>& rewards,
                                      const std::vector<double>& d_values, double gamma);

// Telescoped closed form of the return of the beta = 0 difference reward:
// R_t = (1-gamma) * sum_{i=t}^{T-1} gamma^{i-t} * (-d_{i+1})
//       + gamma^{T-t} * (-d_T) - (-d_t).
double closed_form_return(const std::vector<double>& d_values, int t, double gamma);

// Frozen Stage 1 predictor serving d(o, g) and the learned success signal.
// Parameters never change after construction.
class RewardSource {
  public:
    RewardSource(DenseNet net, Binning binning, double success_threshold, double bonus_beta);
    // Binning spans [0, max episode length] with the checkpoint's bin count.
    static RewardSource from_checkpoint(const std::filesystem::path& path,
                                        const EnvConfig& env_cfg, double success_threshold,
                                        double bonus_beta);

    StepsToGoDistribution distribution(const VectorXd& obs, const VectorXd& goal) const;
    double d(const VectorXd& obs, const VectorXd& goal) const;
    bool success(const VectorXd& obs, const VectorXd& goal) const;

    std::uint64_t params_hash() const { return param_hash(net_); }
    const DenseNet& net() const { return net_; }
    const Binning& binning() const { return binning_; }
    double threshold() const { return s_; }
    double beta() const { return beta_; }

  private:
    DenseNet net_;
    Binning binning_;
    double s_;
    double beta_;
};

struct ReplayItem {
    VectorXd obs;
    VectorXd action;
    VectorXd goal;
    double ret = 0.0;
    std::uint64_t id = 0;
};

// Collect/learn phase buffer. Appends are episode-atomic; each learning phase
// shuffles once and serves disjoint batches without replacement; whatever is
// left is cleared at phase end.
class ReplayBuffer {
  public:
    // Assigns sequential ids; all of an episode's items enter together.
    void append_episode(std::vector<ReplayItem> items);
    std::size_t size() const;

    void begin_phase(Rng rng);
    // Next batch of the phase's shuffled order; throws if the phase is not
    // open or fewer than b items remain unconsumed.
    std::vector<ReplayItem> sample_batch(int b);
    std::size_t consumed() const;
    void clear();
    long phases_started() const { return phases_; }

  private:
    mutable std::mutex mu_;
    std::vector<ReplayItem> items_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    bool phase_open_ = false;
    std::uint64_t next_id_ = 0;
    long phases_ = 0;
};

struct StopCriterion {
    long max_iterations = 1000;
    // 0 = unlimited. Otherwise an iteration only starts if the worst case
    // (N*B buffered steps plus one max-length episode) still fits.
    long max_env_steps = 0;
    // Stop when the last 5 evaluated success rates improve by < 1% overall.
    bool plateau_stop = false;
};

struct SelfImproveConfig {
    double gamma = 0.9;
    double c = 5e-2;
    int n_updates = 16;   // N
    int batch_size = 64;  // B
    int max_episode_length = 100;
    double success_threshold = 4.0;  // first-bin upper edge for width-4 bins
    double bonus_beta = 2.0;
    AdamWConfig opt{2e-4, 0.9, 0.999, 1e-8, 1e-4};
    std::uint64_t seed = 0;
    StopCriterion stop;
    int eval_interval = 1;  // iterations between rollout evals; 0 = never
    int eval_episodes = 80;
    bool include_aborted = false;
    std::uint64_t config_hash = 0;
};

void validate(const SelfImproveConfig& cfg);

struct CollectResult {
    EpisodeRecord episode;
    std::vector<ReplayItem> items;
    bool detector_success = false;
    int env_steps = 0;
};

// One stochastic-policy episode terminated by the learned detector, the
// episode cap, or the abort hook. Transitions are labeled with the difference
// reward and Monte Carlo returns. Aborted episodes emit no items unless
// configured otherwise.
CollectResult collect_episode(const DenseNet& policy, Environment& env, const RewardSource& rs,
                              const SelfImproveConfig& cfg, Rng& rng,
                              const std::atomic<bool>* abort_flag = nullptr);

// mean(-c * R * sum_dim log p(a | o, g)) with optional analytic gradients.
double reinforce_loss(const DenseNet& net, const std::vector<ReplayItem>& batch,
                      const SelfImproveConfig& cfg, const ActionBinning& ab,
                      Gradients* grads = nullptr);

// One AdamW step on reinforce_loss. On a non-finite result, parameters and
// optimizer state are restored and NumericError thrown.
double reinforce_update(DenseNet& net, const std::vector<ReplayItem>& batch,
                        const SelfImproveConfig& cfg, AdamWState& opt, const ActionBinning& ab);

struct SelfImproveRecord {
    long iteration = 0;
    long episodes = 0;
    double mean_episode_length = 0.0;
    double detector_success_fraction = 0.0;
    double mean_return = 0.0;
    double mean_loss = 0.0;
    long total_env_steps = 0;
    bool evaluated = false;
    double eval_success = 0.0;
    double eval_mean_length = 0.0;
};

struct SelfImproveResult {
    DenseNet final_policy;
    CheckpointMeta meta;
    std::vector<SelfImproveRecord> records;
    long iterations = 0;
    long total_env_steps = 0;
    std::uint64_t reward_hash_before = 0;
    std::uint64_t reward_hash_after = 0;
    std::string stop_reason;

    std::string metrics_jsonl() const;
};

// Algorithm: collect episodes until the buffer holds at least N*B items, run
// exactly N update steps on disjoint minibatches, clear the buffer, repeat
// until a stop criterion fires. The policy acts through an f32-rounded
// snapshot refreshed after every learning phase.
SelfImproveResult self_improve_loop(const DenseNet& policy, const RewardSource& rs,
                                    const EnvConfig& env_cfg, const SelfImproveConfig& cfg,
                                    const std::atomic<bool>* abort_flag = nullptr);

// Checkpoint-path wrapper; writes final.ckpt and metrics.jsonl to out_dir.
SelfImproveResult self_improve_loop(const std::filesystem::path& policy_ckpt,
                                    const std::filesystem::path& reward_ckpt,
                                    const EnvConfig& env_cfg, const SelfImproveConfig& cfg,
                                    const std::filesystem::path& out_dir);

}  // namespace stg
