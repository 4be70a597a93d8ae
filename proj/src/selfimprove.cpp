#include "stg/selfimprove.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "stg/checkpoint.hpp"
#include "stg/common.hpp"
#include "stg/linalg.hpp"
#include "stg/log.hpp"

#include "json.hpp"

namespace stg {

double expected_steps_to_go(const StepsToGoDistribution& dist) {
    double sum = 0.0, ev = 0.0;
    for (int b = 0; b < dist.probs.size(); ++b) {
        const double p = dist.probs[b];
        if (!(p >= 0.0)) throw NumericError("expected_steps_to_go: negative probability");
        sum += p;
        ev += p * dist.binning.midpoint(b);
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw NumericError("expected_steps_to_go: distribution not normalized");
    return ev;
}

double reward(double d_t, double d_next, bool success_next, double beta) {
    return d_t - d_next + (success_next ? beta : 0.0);
}

bool detect_success(double d, double s) {
    if (s <= 0.0) throw ConfigError("detect_success: threshold must be positive");
    return d <= s;
}

std::vector<double> monte_carlo_returns(const std::vector<double>& rewards, double gamma) {
    std::vector<double> returns(rewards.size(), 0.0);
    double acc = 0.0;
    for (std::size_t i = rewards.size(); i-- > 0;) {
        acc = rewards[i] + gamma * acc;
        returns[i] = acc;
    }
    return returns;
}

double c_heuristic(double gamma, double n_speedup) {
    if (gamma < 0.0 || gamma >= 1.0) throw ConfigError("c_heuristic: need 0 <= gamma < 1");
    if (n_speedup <= 0.0) throw ConfigError("c_heuristic: n_speedup must be positive");
    return (1.0 - gamma) / n_speedup;
}

std::vector<double> shaping_residuals(const std::vector<double>& rewards,
                                      const std::vector<double>& d_values, double gamma) {
    if (d_values.size() != rewards.size() + 1)
        throw ConfigError("shaping_residuals: need one more d-value than rewards");
    std::vector<double> res(rewards.size(), 0.0);
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        const double v = -d_values[i];
        const double v_next = -d_values[i + 1];
        const double decomposed = (1.0 - gamma) * v_next + (gamma * v_next - v);
        res[i] = std::abs(rewards[i] - decomposed);
    }
    return res;
}

double shaping_decomposition_check(const std::vector<double>& d_values, double gamma) {
    if (d_values.size() < 2) return 0.0;
    std::vector<double> rewards(d_values.size() - 1);
    for (std::size_t i = 0; i + 1 < d_values.size(); ++i)
        rewards[i] = reward(d_values[i], d_values[i + 1], false, 0.0);
    const auto res = shaping_residuals(rewards, d_values, gamma);
    return *std::max_element(res.begin(), res.end());
}

double closed_form_return(const std::vector<double>& d_values, int t, double gamma) {
    const int T = static_cast<int>(d_values.size()) - 1;
    if (t < 0 || t > T) throw ConfigError("closed_form_return: t out of range");
    double sum = 0.0, g = 1.0;
    for (int i = t; i <= T - 1; ++i) {
        sum += g * (-d_values[static_cast<std::size_t>(i + 1)]);
        g *= gamma;
    }
    // g is now gamma^(T-t)
    return (1.0 - gamma) * sum + g * (-d_values[static_cast<std::size_t>(T)]) -
           (-d_values[static_cast<std::size_t>(t)]);
}

RewardSource::RewardSource(DenseNet net, Binning binning, double success_threshold,
                           double bonus_beta)
    : net_(std::move(net)), binning_(binning), s_(success_threshold), beta_(bonus_beta) {
    if (s_ <= 0.0) throw ConfigError("RewardSource: success threshold must be positive");
    if (beta_ < 0.0) throw ConfigError("RewardSource: bonus must be non-negative");
    if (net_.heads.steps_bins != binning_.num_bins)
        throw ConfigError("RewardSource: binning does not match the steps head");
    // Pin to published-precision parameters so in-process and over-the-wire
    // reward queries agree bit for bit.
    round_trip_f32(net_);
}

RewardSource RewardSource::from_checkpoint(const std::filesystem::path& path,
                                           const EnvConfig& env_cfg, double success_threshold,
                                           double bonus_beta) {
    auto [net, meta] = load_checkpoint(path.string());
    Binning binning;
    binning.num_bins = meta.arch.steps_bins;
    binning.max_steps = static_cast<double>(env_cfg.max_episode_length());
    return RewardSource(std::move(net), binning, success_threshold, bonus_beta);
}

StepsToGoDistribution RewardSource::distribution(const VectorXd& obs, const VectorXd& goal) const {
    StepsToGoDistribution dist;
    dist.binning = binning_;
    dist.probs = softmax(forward(net_, features(obs, goal, Objective::stg), Head::steps));
    return dist;
}

double RewardSource::d(const VectorXd& obs, const VectorXd& goal) const {
    return expected_steps_to_go(distribution(obs, goal));
}

bool RewardSource::success(const VectorXd& obs, const VectorXd& goal) const {
    return detect_success(d(obs, goal), s_);
}

void ReplayBuffer::append_episode(std::vector<ReplayItem> items) {
    std::lock_guard<std::mutex> lock(mu_);
    for (auto& it : items) {
        it.id = next_id_++;
        items_.push_back(std::move(it));
    }
}

std::size_t ReplayBuffer::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return items_.size();
}

void ReplayBuffer::begin_phase(Rng rng) {
    std::lock_guard<std::mutex> lock(mu_);
    order_.resize(items_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i)
        std::swap(order_[i - 1], order_[rng.next_below(i)]);
    cursor_ = 0;
    phase_open_ = true;
    ++phases_;
}

std::vector<ReplayItem> ReplayBuffer::sample_batch(int b) {
    std::lock_guard<std::mutex> lock(mu_);
    if (!phase_open_) throw ProtocolError("sample_batch: no learning phase open");
    if (b <= 0) throw ConfigError("sample_batch: batch size must be positive");
    if (cursor_ + static_cast<std::size_t>(b) > order_.size())
        throw ProtocolError("sample_batch: fewer unconsumed items than requested");
    std::vector<ReplayItem> out;
    out.reserve(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) out.push_back(items_[order_[cursor_++]]);
    return out;
}

std::size_t ReplayBuffer::consumed() const {
    std::lock_guard<std::mutex> lock(mu_);
    return cursor_;
}

void ReplayBuffer::clear() {
    std::lock_guard<std::mutex> lock(mu_);
    items_.clear();
    order_.clear();
    cursor_ = 0;
    phase_open_ = false;
}

void validate(const SelfImproveConfig& cfg) {
    if (cfg.gamma < 0.0 || cfg.gamma >= 1.0)
        throw ConfigError("selfimprove: need 0 <= gamma < 1");
    if (cfg.c <= 0.0) throw ConfigError("selfimprove: c must be positive");
    if (cfg.n_updates < 1 || cfg.batch_size < 1)
        throw ConfigError("selfimprove: N and B must be at least 1");
    if (cfg.max_episode_length < 1)
        throw ConfigError("selfimprove: max_episode_length must be positive");
    if (cfg.success_threshold <= 0.0)
        throw ConfigError("selfimprove: success threshold must be positive");
    if (cfg.bonus_beta < 0.0) throw ConfigError("selfimprove: bonus must be non-negative");
}

CollectResult collect_episode(const DenseNet& policy, Environment& env, const RewardSource& rs,
                              const SelfImproveConfig& cfg, Rng& rng,
                              const std::atomic<bool>* abort_flag) {
    const ActionBinning ab = default_action_binning(env.config(), policy.heads.action_bins);
    CollectResult out;
    env.reset(rng);
    out.episode.goal = env.goal();
    out.episode.observations.push_back(env.obs());

    std::vector<double> rewards;
    TerminationReason reason = TerminationReason::none;
    double d_prev = rs.d(env.obs(), env.goal());
    for (int t = 0; t < cfg.max_episode_length; ++t) {
        if (abort_flag && abort_flag->load()) {
            reason = TerminationReason::operator_abort;
            break;
        }
        std::vector<double> u(static_cast<std::size_t>(policy.heads.action_dims));
        for (auto& x : u) x = rng.next_double();
        const VectorXd a = sampled_action(policy, env.obs(), env.goal(), ab, u);
        const StepResult sr = env.step(a);
        ++out.env_steps;
        const double d_next = rs.d(sr.next_obs, env.goal());
        const bool suc = detect_success(d_next, cfg.success_threshold);
        rewards.push_back(reward(d_prev, d_next, suc, cfg.bonus_beta));
        out.episode.actions.push_back(a);
        out.episode.observations.push_back(sr.next_obs);
        d_prev = d_next;
        if (suc) {
            out.detector_success = true;
            reason = TerminationReason::detector_success;
            break;
        }
        if (sr.terminated) {
            reason = sr.reason;
            break;
        }
        if (t + 1 == cfg.max_episode_length) reason = TerminationReason::max_length;
    }

    out.episode.reason = reason;
    out.episode.success = reason == TerminationReason::detector_success ||
                          reason == TerminationReason::ground_truth_success;
    if (reason == TerminationReason::operator_abort && !cfg.include_aborted) return out;

    const std::vector<double> returns = monte_carlo_returns(rewards, cfg.gamma);
    for (std::size_t t = 0; t < out.episode.actions.size(); ++t) {
        ReplayItem item;
        item.obs = out.episode.observations[t];
        item.action = out.episode.actions[t];
        item.goal = out.episode.goal;
        item.ret = returns[t];
        if (!std::isfinite(item.ret)) throw NumericError("collect_episode: non-finite return");
        out.items.push_back(std::move(item));
    }
    return out;
}

namespace {

void copy_params(const DenseNet& from, DenseNet& to) {
    auto src = tensor_views(const_cast<DenseNet&>(from));
    auto dst = tensor_views(to);
    for (std::size_t i = 0; i < src.size(); ++i)
        std::copy(src[i].data, src[i].data + src[i].size(), dst[i].data);
}

void copy_grads(const Gradients& from, Gradients& to) {
    auto src = tensor_views(const_cast<Gradients&>(from));
    auto dst = tensor_views(to);
    for (std::size_t i = 0; i < src.size(); ++i)
        std::copy(src[i].data, src[i].data + src[i].size(), dst[i].data);
}

}  // namespace

double reinforce_loss(const DenseNet& net, const std::vector<ReplayItem>& batch,
                      const SelfImproveConfig& cfg, const ActionBinning& ab, Gradients* grads) {
    const int n = static_cast<int>(batch.size());
    if (n == 0) throw ConfigError("reinforce_loss: empty batch");
    const int dims = net.heads.action_dims;
    const int bins = net.heads.action_bins;

    MatrixXd X(feature_dim(static_cast<int>(batch[0].obs.size())), n);
    for (int j = 0; j < n; ++j)
        X.col(j) = features(batch[static_cast<std::size_t>(j)].obs,
                            batch[static_cast<std::size_t>(j)].goal, Objective::bc);
    ForwardCache cache;
    MatrixXd hidden = trunk_forward(net, X, grads ? &cache : nullptr);
    MatrixXd logits = head_logits(net.action_head, hidden);

    MatrixXd dlogits = MatrixXd::Zero(logits.rows(), n);
    double total = 0.0;
    for (int j = 0; j < n; ++j) {
        const ReplayItem& item = batch[static_cast<std::size_t>(j)];
        const double w = cfg.c * item.ret;
        for (int k = 0; k < dims; ++k) {
            const int target = ab.bin_index(item.action[k]);
            VectorXd lp = log_softmax(VectorXd(logits.block(k * bins, j, bins, 1)));
            total += -w * lp[target];
            if (grads) {
                VectorXd g = lp.array().exp();
                g[target] -= 1.0;
                dlogits.block(k * bins, j, bins, 1) = (w / n) * g;
            }
        }
    }
    if (grads) backward_from_head(net, Head::action, cache, dlogits, *grads);
    return total / n;
}

double reinforce_update(DenseNet& net, const std::vector<ReplayItem>& batch,
                        const SelfImproveConfig& cfg, AdamWState& opt, const ActionBinning& ab) {
    Gradients grads = zeros_like(net);
    const double loss = reinforce_loss(net, batch, cfg, ab, &grads);

    DenseNet params_backup = net;
    Gradients m_backup = opt.m, v_backup = opt.v;
    const long step_backup = opt.step;
    adamw_step(net, grads, opt);
    if (!all_finite(net) || !std::isfinite(loss)) {
        copy_params(params_backup, net);
        copy_grads(m_backup, opt.m);
        copy_grads(v_backup, opt.v);
        opt.step = step_backup;
        throw NumericError("reinforce_update: non-finite result; parameters restored");
    }
    return loss;
}

std::string SelfImproveResult::metrics_jsonl() const {
    std::string out;
    for (const auto& r : records) {
        nlohmann::json j{{"iteration", r.iteration},
                         {"episodes", r.episodes},
                         {"mean_episode_length", r.mean_episode_length},
                         {"detector_success_fraction", r.detector_success_fraction},
                         {"mean_return", r.mean_return},
                         {"mean_loss", r.mean_loss},
                         {"total_env_steps", r.total_env_steps},
                         {"evaluated", r.evaluated},
                         {"eval_success", r.eval_success},
                         {"eval_mean_length", r.eval_mean_length}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

SelfImproveResult self_improve_loop(const DenseNet& policy, const RewardSource& rs,
                                    const EnvConfig& env_cfg, const SelfImproveConfig& cfg,
                                    const std::atomic<bool>* abort_flag) {
    validate(cfg);
    SelfImproveResult res;
    res.reward_hash_before = rs.params_hash();

    DenseNet master = policy;
    DenseNet acting = master;
    round_trip_f32(acting);
    AdamWState opt = make_adamw(master, cfg.opt);
    const ActionBinning ab = default_action_binning(env_cfg, master.heads.action_bins);
    const long need = static_cast<long>(cfg.n_updates) * cfg.batch_size;

    ReplayBuffer buffer;
    std::uint64_t episode_counter = 0;
    std::vector<double> eval_history;

    for (long iter = 0;; ++iter) {
        if (iter >= cfg.stop.max_iterations) {
            res.stop_reason = "max_iterations";
            break;
        }
        if (cfg.stop.max_env_steps > 0 &&
            res.total_env_steps + need + cfg.max_episode_length > cfg.stop.max_env_steps) {
            res.stop_reason = "env_step_budget";
            break;
        }
        if (cfg.stop.plateau_stop && eval_history.size() >= 5) {
            const std::size_t n = eval_history.size();
            double best_late = eval_history[n - 4];
            for (std::size_t i = n - 3; i < n; ++i) best_late = std::max(best_late, eval_history[i]);
            if (best_late - eval_history[n - 5] < 0.01) {
                res.stop_reason = "plateau";
                break;
            }
        }
        if (abort_flag && abort_flag->load()) {
            res.stop_reason = "operator_abort";
            break;
        }

        SelfImproveRecord rec;
        rec.iteration = iter;
        long len_sum = 0, det = 0;
        double ret_sum = 0.0;
        long ret_n = 0;
        while (buffer.size() < static_cast<std::size_t>(need)) {
            Rng ep_rng = derive_stream(cfg.seed, "collect", episode_counter++);
            Environment env(env_cfg);
            CollectResult cr = collect_episode(acting, env, rs, cfg, ep_rng, abort_flag);
            res.total_env_steps += cr.env_steps;
            ++rec.episodes;
            len_sum += cr.episode.length();
            det += cr.detector_success ? 1 : 0;
            for (const auto& it : cr.items) {
                ret_sum += it.ret;
                ++ret_n;
            }
            buffer.append_episode(std::move(cr.items));
            if (abort_flag && abort_flag->load()) break;
        }
        if (buffer.size() < static_cast<std::size_t>(need)) {
            res.stop_reason = "operator_abort";
            break;
        }
        rec.mean_episode_length =
            rec.episodes > 0 ? static_cast<double>(len_sum) / rec.episodes : 0.0;
        rec.detector_success_fraction =
            rec.episodes > 0 ? static_cast<double>(det) / rec.episodes : 0.0;
        rec.mean_return = ret_n > 0 ? ret_sum / static_cast<double>(ret_n) : 0.0;

        buffer.begin_phase(derive_stream(cfg.seed, "replay.shuffle", static_cast<std::uint64_t>(iter)));
        double loss_sum = 0.0;
        int done_updates = 0;
        try {
            for (int u = 0; u < cfg.n_updates; ++u) {
                const auto batch = buffer.sample_batch(cfg.batch_size);
                loss_sum += reinforce_update(master, batch, cfg, opt, ab);
                ++done_updates;
            }
        } catch (const NumericError& e) {
            STG_ERROR("self_improve: iteration %ld aborted: %s", iter, e.what());
        }
        buffer.clear();
        rec.mean_loss = done_updates > 0 ? loss_sum / done_updates : 0.0;
        copy_params(master, acting);
        round_trip_f32(acting);

        rec.total_env_steps = res.total_env_steps;
        if (cfg.eval_interval > 0 && (iter % cfg.eval_interval == 0)) {
            const EvalReport er =
                evaluate_bc(acting, env_cfg, cfg.eval_episodes,
                            derive_stream(cfg.seed, "si.eval", static_cast<std::uint64_t>(iter)).next_u64(),
                            EvalMode::sampled);
            rec.evaluated = true;
            rec.eval_success = er.success_rate;
            rec.eval_mean_length = er.mean_length;
            eval_history.push_back(er.success_rate);
            STG_INFO("self_improve it %ld steps %ld eps %ld det %.2f eval %.2f/%.0f", iter,
                     res.total_env_steps, rec.episodes, rec.detector_success_fraction,
                     er.success_rate, er.mean_length);
        }
        res.records.push_back(rec);
        ++res.iterations;
    }

    res.final_policy = acting;
    res.reward_hash_after = rs.params_hash();
    res.meta.step = res.iterations;
    res.meta.config_hash = cfg.config_hash;
    res.meta.tool_version = kToolVersion;
    return res;
}

SelfImproveResult self_improve_loop(const std::filesystem::path& policy_ckpt,
                                    const std::filesystem::path& reward_ckpt,
                                    const EnvConfig& env_cfg, const SelfImproveConfig& cfg,
                                    const std::filesystem::path& out_dir) {
    auto [policy, policy_meta] = load_checkpoint(policy_ckpt.string());
    RewardSource rs = RewardSource::from_checkpoint(reward_ckpt, env_cfg, cfg.success_threshold,
                                                    cfg.bonus_beta);
    SelfImproveResult res = self_improve_loop(policy, rs, env_cfg, cfg);
    std::filesystem::create_directories(out_dir);
    res.meta.arch = policy_meta.arch;
    save_checkpoint((out_dir / "final.ckpt").string(), res.final_policy, res.meta);
    std::ofstream metrics(out_dir / "metrics.jsonl");
    metrics << res.metrics_jsonl();
    return res;
}

}  // namespace stg
