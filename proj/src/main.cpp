// stg: two-stage post-training for goal-conditioned policies.
//
//   gen-data      roll out the scripted demonstrator into a dataset file
//   train-sft     behavioral cloning + steps-to-go prediction
//   self-improve  online fine-tuning against the frozen steps-to-go model
//   serve         one distributed role (coordinator/replay/reward/learner/actor)
//   eval          seeded policy rollouts with a Wilson success interval
//   label         per-frame steps-to-go curves for plotting
//   inspect       artifact headers, counts, and hashes
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "stg/config.hpp"
#include "stg/dataset.hpp"
#include "stg/distributed.hpp"
#include "stg/log.hpp"
#include "stg/selfimprove.hpp"
#include "stg/sft.hpp"

namespace fs = std::filesystem;
using namespace stg;

namespace {

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Top-level config document. Sections are optional and individually
// defaulted; unknown keys anywhere are an error.
struct RunConfig {
    std::uint64_t seed = 0;
    EnvConfig env;
    DemonstratorConfig demo;
    int dataset_n = 1000;
    double val_fraction = 0.1;
    SftConfig sft;
    SelfImproveConfig si;
    DistributedConfig dist;
    int eval_episodes = 200;
    EvalMode eval_mode = EvalMode::greedy;
    std::uint64_t hash = 0;

    Json canonical() const {
        return Json{{"seed", seed},
                    {"env", to_json(env)},
                    {"dataset",
                     Json{{"demonstrator", to_json(demo)},
                          {"n", dataset_n},
                          {"val_fraction", val_fraction}}},
                    {"sft", to_json(sft)},
                    {"selfimprove", to_json(si)},
                    {"distributed", to_json(dist)},
                    {"eval", Json{{"episodes", eval_episodes}, {"mode", to_string(eval_mode)}}}};
    }
};

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    Json j;
    try {
        j = Json::parse(f);
    } catch (const Json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    check_keys(j, {"seed", "env", "dataset", "sft", "selfimprove", "distributed", "eval"},
               "config");
    RunConfig c;
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("env")) from_json(j.at("env"), c.env);
    // every stream downstream is derived from the one named seed
    c.demo.kind = c.env.kind;
    c.demo.seed = c.seed;
    c.sft.seed = c.seed;
    c.si.seed = c.seed;
    if (j.contains("dataset")) {
        const Json& d = j.at("dataset");
        check_keys(d, {"demonstrator", "n", "val_fraction"}, "dataset");
        if (d.contains("demonstrator")) from_json(d.at("demonstrator"), c.demo);
        if (d.contains("n")) c.dataset_n = d.at("n").get<int>();
        if (d.contains("val_fraction")) c.val_fraction = d.at("val_fraction").get<double>();
        if (c.dataset_n < 1) throw ConfigError("dataset: n < 1");
        if (c.val_fraction < 0 || c.val_fraction >= 1)
            throw ConfigError("dataset: val_fraction outside [0, 1)");
    }
    if (j.contains("sft")) from_json(j.at("sft"), c.sft);
    if (j.contains("selfimprove")) from_json(j.at("selfimprove"), c.si);
    if (j.contains("distributed")) from_json(j.at("distributed"), c.dist);
    if (!j.contains("distributed") || !j.at("distributed").contains("env")) c.dist.env = c.env;
    if (!j.contains("distributed") || !j.at("distributed").contains("selfimprove"))
        c.dist.si = c.si;
    if (j.contains("eval")) {
        const Json& e = j.at("eval");
        check_keys(e, {"episodes", "mode"}, "eval");
        if (e.contains("episodes")) c.eval_episodes = e.at("episodes").get<int>();
        if (e.contains("mode")) c.eval_mode = eval_mode_from_string(e.at("mode").get<std::string>());
        if (c.eval_episodes < 1) throw ConfigError("eval: episodes < 1");
    }
    c.hash = config_hash(c.canonical());
    c.sft.config_hash = c.hash;
    c.si.config_hash = c.hash;
    c.dist.si.config_hash = c.hash;
    return c;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& config, const std::string& out, int n_flag,
                 long long seed_flag) {
    RunConfig rc = load_run_config(config);
    const int n = n_flag > 0 ? n_flag : rc.dataset_n;
    if (seed_flag >= 0) {
        rc.demo.seed = static_cast<std::uint64_t>(seed_flag);
    }
    GenerateReport rep;
    Dataset ds = generate_demos(rc.env, rc.demo, n, rc.demo.seed, &rep);
    save_dataset(ds, out);
    const double mean_len =
        static_cast<double>(ds.total_steps()) / static_cast<double>(ds.episodes.size());
    std::printf("wrote %s\n", out.c_str());
    std::printf("episodes        %zu\n", ds.episodes.size());
    std::printf("total steps     %zu\n", ds.total_steps());
    std::printf("mean length     %.3f\n", mean_len);
    std::printf("regenerated     %d\n", rep.regenerated);
    std::printf("config hash     %s\n", hex64(rc.hash).c_str());
    return 0;
}

int cmd_train_sft(const std::string& config, const std::string& data, const std::string& out_dir) {
    RunConfig rc = load_run_config(config);
    Dataset ds = load_dataset(data);
    auto [train, val] = split(ds, rc.val_fraction, derive_stream(rc.seed, "split", 0).next_u64());
    std::printf("train episodes  %zu\nval episodes    %zu\n", train.episodes.size(),
                val.episodes.size());
    SftResult res = sft_train(rc.sft, train, val, out_dir);
    if (!res.log.records.empty()) {
        const TrainingRecord& last = res.log.records.back();
        std::printf("final val bc    %.6f\nfinal val stg   %.6f\n", last.val_bc, last.val_stg);
    }
    std::printf("best bc ckpt    %s (step %ld)\n", res.best_bc.string().c_str(), res.best_bc_step);
    std::printf("best stg ckpt   %s (step %ld)\n", res.best_stg.string().c_str(),
                res.best_stg_step);
    std::printf("clamp warnings  %ld\n", res.log.bc_clamp_warnings);
    std::printf("config hash     %s\n", hex64(rc.hash).c_str());
    if (res.aborted) {
        std::fprintf(stderr, "training aborted on a non-finite loss; last good checkpoint kept\n");
        return 2;
    }
    return 0;
}

int cmd_self_improve(const std::string& config, const std::string& policy_ckpt,
                     const std::string& reward_ckpt, const std::string& out_dir) {
    RunConfig rc = load_run_config(config);
    SelfImproveResult res =
        self_improve_loop(fs::path(policy_ckpt), fs::path(reward_ckpt), rc.env, rc.si, out_dir);
    std::printf("iterations      %ld\n", res.iterations);
    std::printf("env steps       %ld\n", res.total_env_steps);
    std::printf("stop reason     %s\n", res.stop_reason.c_str());
    for (auto it = res.records.rbegin(); it != res.records.rend(); ++it) {
        if (!it->evaluated) continue;
        std::printf("final eval      success %.3f, mean length %.2f\n", it->eval_success,
                    it->eval_mean_length);
        break;
    }
    std::printf("reward hash     %s\n", hex64(res.reward_hash_after).c_str());
    std::printf("config hash     %s\n", hex64(rc.hash).c_str());
    if (res.reward_hash_before != res.reward_hash_after) {
        std::fprintf(stderr, "frozen reward model hash changed during the run\n");
        return 2;
    }
    return 0;
}

std::atomic<bool> g_signal{false};

void handle_signal(int) { g_signal.store(true); }

int cmd_serve(const std::string& config, const std::string& role, const std::string& topology,
              const std::string& name, const std::string& ready_file,
              const std::string& policy_ckpt, const std::string& reward_ckpt,
              const std::string& out_dir) {
    RunConfig rc = load_run_config(config);
    DistributedConfig dc = rc.dist;
    if (!topology.empty()) dc.topology = topology_from_string(topology);
    if (!policy_ckpt.empty()) dc.policy_ckpt = policy_ckpt;
    if (!reward_ckpt.empty()) dc.reward_ckpt = reward_ckpt;
    if (!out_dir.empty()) dc.out_dir = out_dir;

    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    RoleHandle h;
    std::atomic<bool> finished{false};
    std::thread watcher([&] {
        bool announced = false;
        while (!finished.load()) {
            if (g_signal.load()) h.stop.store(true);
            if (!announced && h.ready.load()) {
                announced = true;
                if (!ready_file.empty()) {
                    std::ofstream f(ready_file);
                    f << h.port.load() << "\n";
                }
                STG_INFO("%s ready (port %d)", role.c_str(), h.port.load());
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
    });
    int rc_code = 0;
    try {
        if (role == "coordinator")
            run_coordinator(dc, h);
        else if (role == "replay")
            run_replay_server(dc, h);
        else if (role == "reward")
            run_reward_server(dc, h);
        else if (role == "learner")
            run_learner(dc, h);
        else if (role == "actor")
            run_actor(dc, name, h);
        else
            throw ConfigError("unknown role: " + role);
    } catch (const ConfigError&) {
        finished.store(true);
        watcher.join();
        throw;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s failed: %s\n", role.c_str(), e.what());
        rc_code = 2;
    }
    finished.store(true);
    watcher.join();
    std::printf("role            %s\n", role.c_str());
    std::printf("iterations      %ld\n", h.iterations.load());
    std::printf("episodes        %ld\n", h.episodes.load());
    std::printf("discarded       %ld\n", h.discarded.load());
    std::printf("violations      %ld\n", h.violations.load());
    return rc_code;
}

int cmd_eval(const std::string& config, const std::string& policy_ckpt, int n_flag,
             long long seed_flag, const std::string& mode_flag, const std::string& out_csv) {
    RunConfig rc = load_run_config(config);
    const int n = n_flag > 0 ? n_flag : rc.eval_episodes;
    const std::uint64_t seed =
        seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag)
                       : derive_stream(rc.seed, "eval.cli", 0).next_u64();
    const EvalMode mode = mode_flag.empty() ? rc.eval_mode : eval_mode_from_string(mode_flag);
    EvalReport rep = evaluate_bc(fs::path(policy_ckpt), rc.env, n, seed, mode);
    std::printf("episodes        %d\n", rep.episodes);
    std::printf("success rate    %.4f (95%% CI [%.4f, %.4f])\n", rep.success_rate, rep.ci_low,
                rep.ci_high);
    std::printf("mean length     %.3f\n", rep.mean_length);
    std::printf("mean length|s   %.3f\n", rep.mean_length_success);
    std::printf("config hash     %s\n", hex64(rc.hash).c_str());
    if (!out_csv.empty()) {
        std::ofstream f(out_csv);
        if (!f) throw FormatError("cannot open " + out_csv + " for writing");
        f << "# stg " << kToolVersion << " config_hash=" << hex64(rc.hash) << " mode="
          << to_string(mode) << "\n";
        f << "episode,success,length\n";
        for (std::size_t i = 0; i < rep.lengths.size(); ++i)
            f << i << "," << (rep.success_flags[i] ? 1 : 0) << "," << rep.lengths[i] << "\n";
    }
    return 0;
}

int cmd_label(const std::string& reward_ckpt, const std::string& episodes_path,
              const std::string& out_csv) {
    Dataset ds = load_dataset(episodes_path);
    const double s = ds.env.kind == EnvKind::pointmass ? 4.0 : 1.0;
    RewardSource rs = RewardSource::from_checkpoint(reward_ckpt, ds.env, s, 0.0);
    std::ofstream f(out_csv);
    if (!f) throw FormatError("cannot open " + out_csv + " for writing");
    const int bins = rs.binning().num_bins;
    f << "# stg " << kToolVersion << " reward_hash=" << hex64(rs.params_hash()) << "\n";
    f << "episode,t,d";
    for (int b = 0; b < bins; ++b) f << ",p" << b;
    f << "\n";
    long rows = 0, monotone_violations = 0, successes = 0, terminal_within_s = 0;
    for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
        const EpisodeRecord& ep = ds.episodes[e];
        double prev_d = 0.0;
        for (std::size_t t = 0; t < ep.observations.size(); ++t) {
            const StepsToGoDistribution dist = rs.distribution(ep.observations[t], ep.goal);
            const double d = expected_steps_to_go(dist);
            f << e << "," << t << "," << d;
            for (int b = 0; b < bins; ++b) f << "," << dist.probs[static_cast<std::size_t>(b)];
            f << "\n";
            if (t > 0 && d > prev_d + 1e-9) ++monotone_violations;
            prev_d = d;
            ++rows;
            if (ep.success && t + 1 == ep.observations.size()) {
                ++successes;
                if (d <= s) ++terminal_within_s;
            }
        }
    }
    std::printf("rows            %ld\n", rows);
    std::printf("monotonicity violations  %ld\n", monotone_violations);
    if (successes > 0)
        std::printf("terminal d <= %.2f        %ld/%ld (%.3f)\n", s, terminal_within_s, successes,
                    static_cast<double>(terminal_within_s) / static_cast<double>(successes));
    return 0;
}

int cmd_inspect(const std::string& data, const std::string& ckpt) {
    if (data.empty() == ckpt.empty())
        throw ConfigError("inspect: pass exactly one of --data or --ckpt");
    if (!data.empty()) {
        Dataset ds = load_dataset(data);
        std::ifstream f(data, std::ios::binary);
        std::stringstream ss;
        ss << f.rdbuf();
        const std::string bytes = ss.str();
        const double mean_len =
            static_cast<double>(ds.total_steps()) / static_cast<double>(ds.episodes.size());
        std::printf("kind            %s\n",
                    ds.env.kind == EnvKind::pointmass ? "pointmass" : "gridworld");
        std::printf("split           %s\n", ds.split_tag.c_str());
        std::printf("episodes        %zu\n", ds.episodes.size());
        std::printf("total steps     %zu\n", ds.total_steps());
        std::printf("mean length     %.3f\n", mean_len);
        std::printf("obs dim         %d\n", ds.env.obs_dim());
        std::printf("steps binning   [0, %.0f] x %d\n", ds.steps_binning.max_steps,
                    ds.steps_binning.num_bins);
        std::printf("action binning  [%.2f, %.2f] x %d\n", -ds.action_binning.a_max,
                    ds.action_binning.a_max, ds.action_binning.num_bins);
        std::printf("file hash       %s\n", hex64(fnv1a64(bytes.data(), bytes.size())).c_str());
    } else {
        auto [net, meta] = load_checkpoint(ckpt);
        std::printf("tool version    %s\n", meta.tool_version.c_str());
        std::printf("step            %ld\n", meta.step);
        std::printf("val bc loss     %.6f\n", meta.val_bc_loss);
        std::printf("val stg loss    %.6f\n", meta.val_stg_loss);
        std::printf("config hash     %s\n", hex64(meta.config_hash).c_str());
        std::printf("input dim       %d\n", net.input_dim);
        std::printf("trunk           ");
        for (std::size_t i = 0; i < net.trunk.size(); ++i)
            std::printf("%s%ld", i ? " -> " : "", static_cast<long>(net.trunk[i].W.rows()));
        std::printf("\n");
        std::printf("action head     %d dims x %d bins\n", net.heads.action_dims,
                    net.heads.action_bins);
        std::printf("steps head      %d bins\n", net.heads.steps_bins);
        std::printf("param hash      %s\n", hex64(param_hash(net)).c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stg: steps-to-go self-improvement for goal-conditioned policies"};
    app.require_subcommand(1);

    std::string config, out, data, out_dir, policy_ckpt, reward_ckpt, role, topology, name,
        ready_file, mode, ckpt;
    int n_flag = -1;
    long long seed_flag = -1;

    auto* gen = app.add_subcommand("gen-data", "Generate a demonstrator dataset");
    gen->add_option("--config", config, "Run config JSON")->required();
    gen->add_option("--out", out, "Output dataset path")->required();
    gen->add_option("--n", n_flag, "Episode count (overrides config)");
    gen->add_option("--seed", seed_flag, "Seed (overrides config)");

    auto* tr = app.add_subcommand("train-sft", "Stage 1 supervised training");
    tr->add_option("--config", config, "Run config JSON")->required();
    tr->add_option("--data", data, "Dataset file")->required();
    tr->add_option("--out-dir", out_dir, "Checkpoint/log directory")->required();

    auto* si = app.add_subcommand("self-improve", "Stage 2 online fine-tuning");
    si->add_option("--config", config, "Run config JSON")->required();
    si->add_option("--policy-ckpt", policy_ckpt, "Stage 1 policy checkpoint")->required();
    si->add_option("--reward-ckpt", reward_ckpt, "Frozen steps-to-go checkpoint")->required();
    si->add_option("--out-dir", out_dir, "Output directory")->required();

    auto* sv = app.add_subcommand("serve", "Run one distributed role");
    sv->add_option("--config", config, "Run config JSON")->required();
    sv->add_option("--role", role, "coordinator|replay|reward|learner|actor")->required();
    sv->add_option("--topology", topology, "v1|v2 (overrides config)");
    sv->add_option("--name", name, "Actor name")->default_val("a0");
    sv->add_option("--ready-file", ready_file, "File to write the bound port to once ready");
    sv->add_option("--policy-ckpt", policy_ckpt, "Policy checkpoint (overrides config)");
    sv->add_option("--reward-ckpt", reward_ckpt, "Reward checkpoint (overrides config)");
    sv->add_option("--out-dir", out_dir, "Output directory (overrides config)");

    auto* ev = app.add_subcommand("eval", "Evaluate a policy checkpoint");
    ev->add_option("--config", config, "Run config JSON")->required();
    ev->add_option("--policy-ckpt", policy_ckpt, "Policy checkpoint")->required();
    ev->add_option("--n", n_flag, "Episode count (overrides config)");
    ev->add_option("--seed", seed_flag, "Seed (overrides config)");
    ev->add_option("--mode", mode, "greedy|sampled (overrides config)");
    ev->add_option("--out", out, "Per-episode CSV path");

    auto* lb = app.add_subcommand("label", "Label episodes with steps-to-go curves");
    lb->add_option("--reward-ckpt", reward_ckpt, "Steps-to-go checkpoint")->required();
    lb->add_option("--episodes", data, "Dataset file to label")->required();
    lb->add_option("--out", out, "Output CSV path")->required();

    auto* in = app.add_subcommand("inspect", "Print artifact metadata");
    in->add_option("--data", data, "Dataset file");
    in->add_option("--ckpt", ckpt, "Checkpoint file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config, out, n_flag, seed_flag);
        if (tr->parsed()) return cmd_train_sft(config, data, out_dir);
        if (si->parsed()) return cmd_self_improve(config, policy_ckpt, reward_ckpt, out_dir);
        if (sv->parsed())
            return cmd_serve(config, role, topology, name, ready_file, policy_ckpt, reward_ckpt,
                             out_dir);
        if (ev->parsed()) return cmd_eval(config, policy_ckpt, n_flag, seed_flag, mode, out);
        if (lb->parsed()) return cmd_label(reward_ckpt, data, out);
        if (in->parsed()) return cmd_inspect(data, ckpt);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
