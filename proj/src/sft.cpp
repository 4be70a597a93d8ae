#include "stg/sft.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "stg/common.hpp"
#include "stg/env.hpp"
#include "stg/linalg.hpp"
#include "stg/log.hpp"

#include "json.hpp"

namespace stg {

namespace {

void zero_grads(Gradients& g) {
    for (auto& v : tensor_views(g)) std::fill(v.data, v.data + v.size(), 0.0);
}

MatrixXd batch_features(const std::vector<SupervisedTuple>& batch, Objective obj) {
    if (batch.empty()) throw ConfigError("empty batch");
    const int fdim = feature_dim(static_cast<int>(batch[0].obs.size()));
    MatrixXd X(fdim, static_cast<int>(batch.size()));
    for (std::size_t j = 0; j < batch.size(); ++j)
        X.col(static_cast<int>(j)) = features(batch[j].obs, batch[j].goal, obj);
    return X;
}

}  // namespace

EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "greedy") return EvalMode::greedy;
    if (s == "sampled") return EvalMode::sampled;
    throw ConfigError("unknown eval mode: " + s);
}

std::string to_string(EvalMode m) {
    return m == EvalMode::greedy ? "greedy" : "sampled";
}

std::string TrainingLog::to_jsonl() const {
    std::string out;
    for (const auto& r : records) {
        nlohmann::json j{{"step", r.step},         {"train_bc", r.train_bc},
                         {"train_stg", r.train_stg}, {"val_bc", r.val_bc},
                         {"val_stg", r.val_stg},     {"wall_time_ms", r.wall_time_ms}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

double bc_loss(const DenseNet& net, const std::vector<SupervisedTuple>& batch,
               const ActionBinning& ab, Gradients* grads, long* clamp_warnings) {
    const int n = static_cast<int>(batch.size());
    if (n == 0) throw ConfigError("bc_loss: empty batch");
    const int dims = net.heads.action_dims;
    const int bins = net.heads.action_bins;

    MatrixXd X = batch_features(batch, Objective::bc);
    ForwardCache cache;
    MatrixXd hidden = trunk_forward(net, X, grads ? &cache : nullptr);
    MatrixXd logits = head_logits(net.action_head, hidden);  // (dims*bins) x n

    MatrixXd dlogits;
    if (grads) dlogits.setZero(logits.rows(), n);

    double total = 0.0;
    for (int j = 0; j < n; ++j) {
        const VectorXd& a = batch[static_cast<std::size_t>(j)].action;
        if (a.size() != dims) throw ConfigError("bc_loss: action dimension mismatch");
        for (int k = 0; k < dims; ++k) {
            if (clamp_warnings && (a[k] < -ab.a_max || a[k] > ab.a_max)) ++*clamp_warnings;
            const int target = ab.bin_index(a[k]);
            VectorXd block = logits.block(k * bins, j, bins, 1);
            VectorXd lp = log_softmax(block);
            total += -lp[target];
            if (grads) {
                VectorXd g = lp.array().exp();
                g[target] -= 1.0;
                dlogits.block(k * bins, j, bins, 1) = g / n;
            }
        }
    }
    if (grads) backward_from_head(net, Head::action, cache, dlogits, *grads);
    return total / n;
}

double stg_loss(const DenseNet& net, const std::vector<SupervisedTuple>& batch,
                const Binning& sb, Gradients* grads) {
    const int n = static_cast<int>(batch.size());
    if (n == 0) throw ConfigError("stg_loss: empty batch");
    const int bins = net.heads.steps_bins;

    MatrixXd X = batch_features(batch, Objective::stg);
    ForwardCache cache;
    MatrixXd hidden = trunk_forward(net, X, grads ? &cache : nullptr);
    MatrixXd logits = head_logits(net.steps_head, hidden);  // bins x n

    MatrixXd dlogits;
    if (grads) dlogits.setZero(bins, n);

    double total = 0.0;
    for (int j = 0; j < n; ++j) {
        const int target = sb.bin_index(static_cast<double>(batch[static_cast<std::size_t>(j)].steps_to_go));
        VectorXd lp = log_softmax(logits.col(j));
        total += -lp[target];
        if (grads) {
            VectorXd g = lp.array().exp();
            g[target] -= 1.0;
            dlogits.col(j) = g / n;
        }
    }
    if (grads) backward_from_head(net, Head::steps, cache, dlogits, *grads);
    return total / n;
}

namespace {

// Every (episode, t) pair once, for exhaustive validation passes.
void all_tuples(const Dataset& ds, bool include_terminal, std::vector<SupervisedTuple>& out) {
    for (const auto& ep : ds.episodes) {
        const int T = ep.length();
        const int hi = include_terminal ? T : T - 1;
        for (int t = 0; t <= hi; ++t) {
            SupervisedTuple tup;
            tup.obs = ep.observations[static_cast<std::size_t>(t)];
            if (t < T) tup.action = ep.actions[static_cast<std::size_t>(t)];
            tup.goal = ep.goal;
            tup.steps_to_go = ep.steps_to_go[static_cast<std::size_t>(t)];
            out.push_back(std::move(tup));
        }
    }
}

double chunked_loss(const DenseNet& net, const std::vector<SupervisedTuple>& tuples,
                    const ActionBinning& ab, const Binning& sb, Objective obj) {
    const std::size_t chunk = 512;
    double total = 0.0;
    for (std::size_t i = 0; i < tuples.size(); i += chunk) {
        const std::size_t n = std::min(chunk, tuples.size() - i);
        std::vector<SupervisedTuple> part(tuples.begin() + static_cast<long>(i),
                                          tuples.begin() + static_cast<long>(i + n));
        const double l = obj == Objective::bc ? bc_loss(net, part, ab) : stg_loss(net, part, sb);
        total += l * static_cast<double>(n);
    }
    return total / static_cast<double>(tuples.size());
}

}  // namespace

SftResult sft_train(const SftConfig& cfg, const Dataset& train, const Dataset& val,
                    const std::filesystem::path& out_dir) {
    if (train.episodes.empty() || val.episodes.empty())
        throw ConfigError("sft_train: empty split");
    if (cfg.batch_size < 2 || cfg.batch_size % 2 != 0)
        throw ConfigError("sft_train: batch_size must be even and >= 2");
    if (cfg.total_steps < 1 || cfg.val_interval < 1)
        throw ConfigError("sft_train: total_steps and val_interval must be positive");

    NetConfig nc = cfg.net;
    if (nc.obs_dim == 0) nc.obs_dim = train.env.obs_dim();
    if (nc.action_dims == 0)
        nc.action_dims = static_cast<int>(train.episodes[0].actions[0].size());
    nc.action_bins = train.action_binning.num_bins;
    nc.steps_bins = train.steps_binning.num_bins;

    std::filesystem::create_directories(out_dir);
    DenseNet net = make_net(nc, derive_stream(cfg.seed, "sft.init").next_u64());
    AdamWState opt = make_adamw(net, cfg.opt);
    Rng rng = derive_stream(cfg.seed, "sft.batch");
    Gradients grads = zeros_like(net);

    std::vector<SupervisedTuple> val_bc_tuples, val_stg_tuples;
    all_tuples(val, false, val_bc_tuples);
    all_tuples(val, true, val_stg_tuples);

    SftResult res;
    res.best_bc = out_dir / "best_bc.ckpt";
    res.best_stg = out_dir / "best_stg.ckpt";
    res.final_ckpt = out_dir / "final.ckpt";
    res.last_good = out_dir / "last_good.ckpt";

    CheckpointMeta meta;
    meta.config_hash = cfg.config_hash;
    meta.tool_version = kToolVersion;
    meta.arch = nc;
    save_checkpoint(res.last_good.string(), net, meta);

    const int half = cfg.batch_size / 2;
    double best_bc_val = std::numeric_limits<double>::infinity();
    double best_stg_val = std::numeric_limits<double>::infinity();
    double run_bc = 0.0, run_stg = 0.0;
    long run_n = 0;
    const auto t0 = std::chrono::steady_clock::now();

    for (long step = 1; step <= cfg.total_steps; ++step) {
        std::vector<SupervisedTuple> bcb, stgb;
        bcb.reserve(static_cast<std::size_t>(half));
        stgb.reserve(static_cast<std::size_t>(half));
        for (int i = 0; i < half; ++i) bcb.push_back(sample_tuple(train, rng));
        for (int i = 0; i < half; ++i) stgb.push_back(sample_stg_tuple(train, rng));

        zero_grads(grads);
        const double lb = bc_loss(net, bcb, train.action_binning, &grads, &res.log.bc_clamp_warnings);
        const double ls = stg_loss(net, stgb, train.steps_binning, &grads);
        if (!std::isfinite(lb) || !std::isfinite(ls)) {
            STG_ERROR("sft_train: non-finite loss at step %ld, aborting", step);
            res.aborted = true;
            break;
        }
        adamw_step(net, grads, opt);
        run_bc += lb;
        run_stg += ls;
        ++run_n;

        if (step % cfg.val_interval == 0 || step == cfg.total_steps) {
            const double vbc =
                chunked_loss(net, val_bc_tuples, train.action_binning, train.steps_binning, Objective::bc);
            const double vstg =
                chunked_loss(net, val_stg_tuples, train.action_binning, train.steps_binning, Objective::stg);
            if (!std::isfinite(vbc) || !std::isfinite(vstg) || !all_finite(net)) {
                STG_ERROR("sft_train: non-finite validation at step %ld, aborting", step);
                res.aborted = true;
                break;
            }

            TrainingRecord rec;
            rec.step = step;
            rec.train_bc = run_bc / static_cast<double>(run_n);
            rec.train_stg = run_stg / static_cast<double>(run_n);
            rec.val_bc = vbc;
            rec.val_stg = vstg;
            rec.wall_time_ms = std::chrono::duration<double, std::milli>(
                                   std::chrono::steady_clock::now() - t0)
                                   .count();
            res.log.records.push_back(rec);
            run_bc = run_stg = 0.0;
            run_n = 0;

            meta.step = step;
            meta.val_bc_loss = vbc;
            meta.val_stg_loss = vstg;
            save_checkpoint(res.last_good.string(), net, meta);
            if (vbc < best_bc_val) {
                best_bc_val = vbc;
                res.best_bc_step = step;
                save_checkpoint(res.best_bc.string(), net, meta);
            }
            if (vstg < best_stg_val) {
                best_stg_val = vstg;
                res.best_stg_step = step;
                save_checkpoint(res.best_stg.string(), net, meta);
            }
            STG_INFO("sft step %ld train_bc %.4f train_stg %.4f val_bc %.4f val_stg %.4f", step,
                     rec.train_bc, rec.train_stg, vbc, vstg);
        }
    }

    if (!res.aborted) save_checkpoint(res.final_ckpt.string(), net, meta);

    std::ofstream log_out(out_dir / "training_log.jsonl");
    log_out << res.log.to_jsonl();
    return res;
}

MatrixXd action_probs(const DenseNet& net, const VectorXd& obs, const VectorXd& goal) {
    const int dims = net.heads.action_dims;
    const int bins = net.heads.action_bins;
    VectorXd logits = forward(net, features(obs, goal, Objective::bc), Head::action);
    MatrixXd probs(bins, dims);
    for (int k = 0; k < dims; ++k)
        probs.col(k) = softmax(VectorXd(logits.segment(k * bins, bins)));
    return probs;
}

VectorXd greedy_action(const DenseNet& net, const VectorXd& obs, const VectorXd& goal,
                       const ActionBinning& ab) {
    MatrixXd probs = action_probs(net, obs, goal);
    VectorXd a(probs.cols());
    for (int k = 0; k < probs.cols(); ++k) {
        int best = 0;
        probs.col(k).maxCoeff(&best);
        a[k] = ab.center(best);
    }
    return a;
}

VectorXd sampled_action(const DenseNet& net, const VectorXd& obs, const VectorXd& goal,
                        const ActionBinning& ab, const std::vector<double>& uniforms,
                        std::vector<int>* bins_out) {
    MatrixXd probs = action_probs(net, obs, goal);
    if (static_cast<int>(uniforms.size()) != probs.cols())
        throw ConfigError("sampled_action: need one uniform per action dimension");
    VectorXd a(probs.cols());
    if (bins_out) bins_out->assign(static_cast<std::size_t>(probs.cols()), 0);
    for (int k = 0; k < probs.cols(); ++k) {
        double cum = 0.0;
        int pick = static_cast<int>(probs.rows()) - 1;
        for (int b = 0; b < probs.rows(); ++b) {
            cum += probs(b, k);
            if (uniforms[static_cast<std::size_t>(k)] < cum) {
                pick = b;
                break;
            }
        }
        a[k] = ab.center(pick);
        if (bins_out) (*bins_out)[static_cast<std::size_t>(k)] = pick;
    }
    return a;
}

std::pair<double, double> wilson_interval(int successes, int n) {
    if (n <= 0) throw ConfigError("wilson_interval: n must be positive");
    const double z = 1.959963984540054;
    const double p = static_cast<double>(successes) / n;
    const double z2n = z * z / n;
    const double denom = 1.0 + z2n;
    const double center = p + z2n / 2.0;
    const double rad = z * std::sqrt(p * (1.0 - p) / n + z2n / (4.0 * n));
    return {std::max(0.0, (center - rad) / denom), std::min(1.0, (center + rad) / denom)};
}

ActionBinning default_action_binning(const EnvConfig& env_cfg, int num_bins) {
    ActionBinning ab;
    ab.a_max = env_cfg.kind == EnvKind::pointmass ? env_cfg.pm.a_max : 1.0;
    ab.num_bins = num_bins;
    return ab;
}

EvalReport evaluate_bc(const DenseNet& net, const EnvConfig& env_cfg, int n_episodes,
                       std::uint64_t seed, EvalMode mode) {
    if (n_episodes <= 0) throw ConfigError("evaluate_bc: n_episodes must be positive");
    ActionBinning ab = default_action_binning(env_cfg, net.heads.action_bins);

    EvalReport rep;
    rep.episodes = n_episodes;
    long len_sum = 0, len_succ_sum = 0;
    for (int i = 0; i < n_episodes; ++i) {
        Rng rng = derive_stream(seed, "eval", static_cast<std::uint64_t>(i));
        Environment env(env_cfg);
        env.reset(rng);
        StepResult sr;
        do {
            VectorXd a;
            if (mode == EvalMode::greedy) {
                a = greedy_action(net, env.obs(), env.goal(), ab);
            } else {
                std::vector<double> u(static_cast<std::size_t>(net.heads.action_dims));
                for (auto& x : u) x = rng.next_double();
                a = sampled_action(net, env.obs(), env.goal(), ab, u);
            }
            sr = env.step(a);
        } while (!sr.terminated);
        const bool ok = sr.reason == TerminationReason::ground_truth_success;
        rep.success_flags.push_back(ok);
        rep.lengths.push_back(env.t());
        len_sum += env.t();
        if (ok) {
            ++rep.successes;
            len_succ_sum += env.t();
        }
    }
    rep.success_rate = static_cast<double>(rep.successes) / n_episodes;
    std::tie(rep.ci_low, rep.ci_high) = wilson_interval(rep.successes, n_episodes);
    rep.mean_length = static_cast<double>(len_sum) / n_episodes;
    rep.mean_length_success =
        rep.successes > 0 ? static_cast<double>(len_succ_sum) / rep.successes : 0.0;
    return rep;
}

EvalReport evaluate_bc(const std::filesystem::path& ckpt, const EnvConfig& env_cfg,
                       int n_episodes, std::uint64_t seed, EvalMode mode) {
    auto [net, meta] = load_checkpoint(ckpt.string());
    return evaluate_bc(net, env_cfg, n_episodes, seed, mode);
}

}  // namespace stg
