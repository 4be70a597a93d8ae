#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stg/checkpoint.hpp"
#include "stg/dataset.hpp"
#include "stg/nnet.hpp"

namespace stg {

enum class EvalMode { greedy, sampled };

EvalMode eval_mode_from_string(const std::string& s);
std::string to_string(EvalMode m);

struct SftConfig {
    NetConfig net;  // zero obs/action dims are filled in from the dataset
    int batch_size = 128;
    AdamWConfig opt;
    long total_steps = 30000;
    long val_interval = 1000;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
};

struct TrainingRecord {
    long step = 0;
    double train_bc = 0.0;
    double train_stg = 0.0;
    double val_bc = 0.0;
    double val_stg = 0.0;
    double wall_time_ms = 0.0;
};

// Bit-identical across reruns with the same config except for wall_time_ms.
struct TrainingLog {
    std::vector<TrainingRecord> records;
    long bc_clamp_warnings = 0;

    std::string to_jsonl() const;
};

// Mean over the batch of the summed per-dimension NLL of the discretized
// action. Components outside [-a_max, a_max] clamp to the edge bin and bump
// clamp_warnings. Gradients are accumulated into *grads when non-null.
double bc_loss(const DenseNet& net, const std::vector<SupervisedTuple>& batch,
               const ActionBinning& ab, Gradients* grads = nullptr,
               long* clamp_warnings = nullptr);

// Mean NLL of the binned steps-to-go label; labels clamp into range.
double stg_loss(const DenseNet& net, const std::vector<SupervisedTuple>& batch,
                const Binning& sb, Gradients* grads = nullptr);

struct SftResult {
    TrainingLog log;
    std::filesystem::path best_bc;
    std::filesystem::path best_stg;
    std::filesystem::path final_ckpt;
    std::filesystem::path last_good;
    long best_bc_step = 0;
    long best_stg_step = 0;
    bool aborted = false;
};

// Joint training on both objectives, each batch split half BC / half
// steps-to-go. Keeps the lowest-val-BC and lowest-val-STG checkpoints
// separately, plus the final and the last finite ("last good") ones.
// A non-finite loss aborts, retaining last_good.
SftResult sft_train(const SftConfig& cfg, const Dataset& train, const Dataset& val,
                    const std::filesystem::path& out_dir);

// Per-dimension action bin probabilities, one column per dimension.
MatrixXd action_probs(const DenseNet& net, const VectorXd& obs, const VectorXd& goal);

VectorXd greedy_action(const DenseNet& net, const VectorXd& obs, const VectorXd& goal,
                       const ActionBinning& ab);

// Inverse-CDF categorical draw per dimension from caller-supplied uniforms,
// so the exact same sample is reproducible locally and across the wire.
VectorXd sampled_action(const DenseNet& net, const VectorXd& obs, const VectorXd& goal,
                        const ActionBinning& ab, const std::vector<double>& uniforms,
                        std::vector<int>* bins = nullptr);

struct EvalReport {
    int episodes = 0;
    int successes = 0;
    double success_rate = 0.0;
    double ci_low = 0.0;   // 95% Wilson interval
    double ci_high = 0.0;
    double mean_length = 0.0;          // all episodes
    double mean_length_success = 0.0;  // successful episodes only
    std::vector<int> lengths;
    std::vector<bool> success_flags;
};

// Seeded rollouts terminated by ground-truth success or max length.
EvalReport evaluate_bc(const DenseNet& net, const EnvConfig& env_cfg, int n_episodes,
                       std::uint64_t seed, EvalMode mode = EvalMode::greedy);
EvalReport evaluate_bc(const std::filesystem::path& ckpt, const EnvConfig& env_cfg,
                       int n_episodes, std::uint64_t seed, EvalMode mode = EvalMode::greedy);

// 95% Wilson score interval for s successes out of n.
std::pair<double, double> wilson_interval(int successes, int n);

// Pointmass actions discretize over [-a_max, a_max]; gridworld move encodings
// over [-1, 1].
ActionBinning default_action_binning(const EnvConfig& env_cfg, int num_bins);

}  // namespace stg
