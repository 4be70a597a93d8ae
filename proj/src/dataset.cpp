#include "stg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "stg/common.hpp"
#include "stg/log.hpp"

namespace stg {

int Binning::bin_index(double steps) const {
  if (steps < 0) throw ConfigError("bin_index: negative steps");
  int b = static_cast<int>(std::floor(steps / width()));
  return std::min(b, num_bins - 1);
}

int ActionBinning::bin_index(double a) const {
  double z = (a + a_max) / (2.0 * a_max) * num_bins;
  int b = static_cast<int>(std::floor(z));
  return std::clamp(b, 0, num_bins - 1);
}

std::size_t Dataset::total_steps() const {
  std::size_t n = 0;
  for (const auto& ep : episodes) n += ep.actions.size();
  return n;
}

namespace {

// Rolls one demonstrator episode; returns true if the goal was reached.
bool roll_episode(const EnvConfig& env_cfg, PointmassDemonstrator* pm_demo,
                  GridworldDemonstrator* gw_demo, Rng& rng, EpisodeRecord& out) {
  Environment env(env_cfg);
  env.reset(rng);
  out = EpisodeRecord{};
  out.goal = env.goal();
  out.observations.push_back(env.obs());
  if (env_cfg.kind == EnvKind::pointmass) {
    pm_demo->begin_episode(env.obs(), env.goal());
  } else {
    gw_demo->begin_episode(obs_to_cell(env_cfg.gw, env.obs()), obs_to_cell(env_cfg.gw, env.goal()));
  }
  while (true) {
    VectorXd a = env_cfg.kind == EnvKind::pointmass
                     ? pm_demo->act(env.obs())
                     : gw_demo->act(obs_to_cell(env_cfg.gw, env.obs()));
    StepResult sr = env.step(a);
    out.actions.push_back(a);
    out.observations.push_back(sr.next_obs);
    if (sr.terminated) {
      out.reason = sr.reason;
      out.success = sr.reason == TerminationReason::ground_truth_success;
      break;
    }
  }
  const auto T = static_cast<std::uint32_t>(out.actions.size());
  out.steps_to_go.resize(T + 1);
  for (std::uint32_t t = 0; t <= T; ++t) out.steps_to_go[t] = T - t;
  return out.success;
}

}  // namespace

Dataset generate_demos(const EnvConfig& env, const DemonstratorConfig& demo, int n_episodes,
                       std::uint64_t seed, GenerateReport* report) {
  if (n_episodes < 1) throw ConfigError("generate_demos: n_episodes < 1");
  if (env.kind != demo.kind) throw ConfigError("generate_demos: env/demonstrator kind mismatch");
  Dataset ds;
  ds.env = env;
  ds.demonstrator = demo;
  if (env.kind == EnvKind::pointmass) {
    ds.steps_binning = Binning{static_cast<double>(env.pm.max_episode_length), 50};
    ds.action_binning = ActionBinning{env.pm.a_max, 21};
  } else {
    ds.steps_binning = Binning{static_cast<double>(env.gw.max_episode_length),
                               env.gw.max_episode_length};
    ds.action_binning = ActionBinning{1.0, 21};
  }

  PointmassDemonstrator pm_demo(demo.pm, env.pm, demo.seed);
  GridworldDemonstrator gw_demo(demo.gw, env.gw, demo.seed);

  int failures = 0;
  int retry = 0;
  for (int i = 0; i < n_episodes; ++i) {
    Rng rng = derive_stream(seed, "demos", static_cast<std::uint64_t>(i));
    EpisodeRecord ep;
    bool ok = roll_episode(env, &pm_demo, &gw_demo, rng, ep);
    while (!ok) {
      ++failures;
      const int attempts = i + 1 + failures;
      if (attempts >= 20 && 2 * failures > attempts) {
        throw ConfigError("generate_demos: demonstrator failure rate exceeds 50% (" +
                          std::to_string(failures) + " failures in " +
                          std::to_string(attempts) + " rollouts)");
      }
      Rng retry_rng = derive_stream(seed, "demos.retry", static_cast<std::uint64_t>(retry++));
      ok = roll_episode(env, &pm_demo, &gw_demo, retry_rng, ep);
    }
    ds.episodes.push_back(std::move(ep));
  }
  if (failures > 0)
    STG_INFO("generate_demos: regenerated %d failed rollouts", failures);
  if (report != nullptr) {
    report->requested = n_episodes;
    report->regenerated = failures;
  }
  return ds;
}

SupervisedTuple sample_tuple(const Dataset& ds, Rng& rng) {
  if (ds.episodes.empty()) throw ConfigError("sample_tuple: empty dataset");
  const auto& ep = ds.episodes[rng.next_below(ds.episodes.size())];
  const auto T = static_cast<std::uint64_t>(ep.actions.size());
  const auto t = rng.next_below(T);
  return SupervisedTuple{ep.observations[t], ep.actions[t], ep.goal, ep.steps_to_go[t]};
}

SupervisedTuple sample_stg_tuple(const Dataset& ds, Rng& rng) {
  if (ds.episodes.empty()) throw ConfigError("sample_stg_tuple: empty dataset");
  const auto& ep = ds.episodes[rng.next_below(ds.episodes.size())];
  const auto t = rng.next_below(ep.actions.size() + 1);
  VectorXd action = t < ep.actions.size() ? ep.actions[t] : VectorXd();
  return SupervisedTuple{ep.observations[t], action, ep.goal, ep.steps_to_go[t]};
}

namespace {

Dataset like(const Dataset& ds, const char* tag) {
  Dataset out;
  out.env = ds.env;
  out.demonstrator = ds.demonstrator;
  out.steps_binning = ds.steps_binning;
  out.action_binning = ds.action_binning;
  out.split_tag = tag;
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> split(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("split: val_fraction must be in (0, 1)");
  const auto n = ds.episodes.size();
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (n_val == 0 || n_val == n)
    throw ConfigError("split: a partition would be empty");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = derive_stream(seed, "dataset.split", 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_below(i)]);
  Dataset train = like(ds, "train");
  Dataset val = like(ds, "val");
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_val ? val : train).episodes.push_back(ds.episodes[idx[i]]);
  }
  return {std::move(train), std::move(val)};
}

Dataset subsample(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("subsample: fraction must be in (0, 1]");
  if (fraction == 1.0) return ds;
  const auto n = ds.episodes.size();
  auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  keep = std::max<std::size_t>(keep, 1);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = derive_stream(seed, "dataset.subsample", 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_below(i)]);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());  // keep original episode order
  Dataset out = like(ds, ds.split_tag.c_str());
  for (std::size_t i : idx) out.episodes.push_back(ds.episodes[i]);
  return out;
}

namespace {

constexpr char kMagic[4] = {'S', 'T', 'G', 'D'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

void put_vec(std::vector<std::uint8_t>& out, const VectorXd& v) {
  for (int i = 0; i < v.size(); ++i) put<double>(out, v[i]);
}

struct Reader {
  const std::uint8_t* p;
  std::size_t left;

  template <typename T>
  T get() {
    if (left < sizeof(T)) throw FormatError("dataset: truncated file");
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    left -= sizeof(T);
    return v;
  }

  VectorXd get_vec(int dim) {
    VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = get<double>();
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  Json header{{"env", to_json(ds.env)},
              {"demonstrator", to_json(ds.demonstrator)},
              {"counts", Json{{"episodes", ds.episodes.size()}, {"steps", ds.total_steps()}}},
              {"binning",
               Json{{"max_steps", ds.steps_binning.max_steps},
                    {"num_bins", ds.steps_binning.num_bins}}},
              {"action_binning",
               Json{{"a_max", ds.action_binning.a_max}, {"num_bins", ds.action_binning.num_bins}}},
              {"split", ds.split_tag},
              {"obs_dim", ds.env.obs_dim()},
              {"config_hash",
               config_hash(Json{{"env", to_json(ds.env)}, {"demonstrator", to_json(ds.demonstrator)}})},
              {"tool_version", kToolVersion}};
  const std::string hj = header.dump();

  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, hj.size());
  out.insert(out.end(), hj.begin(), hj.end());
  for (const auto& ep : ds.episodes) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ep.actions.size()));
    put_vec(out, ep.goal);
    for (const auto& o : ep.observations) put_vec(out, o);
    for (const auto& a : ep.actions) put_vec(out, a);
    for (std::uint32_t s : ep.steps_to_go) put<std::uint32_t>(out, s);
    put<std::uint8_t>(out, ep.success ? 1 : 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(ep.reason));
  }
  return out;
}

Dataset deserialize_dataset(const std::uint8_t* data, std::size_t size) {
  Reader r{data, size};
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("dataset: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw FormatError("dataset: unsupported version " + std::to_string(version));
  const auto hlen = r.get<std::uint64_t>();
  if (r.left < hlen) throw FormatError("dataset: truncated header");
  Json header = Json::parse(std::string(reinterpret_cast<const char*>(r.p), hlen), nullptr, false);
  if (header.is_discarded()) throw FormatError("dataset: header is not valid JSON");
  r.p += hlen;
  r.left -= hlen;

  Dataset ds;
  from_json(header.at("env"), ds.env);
  from_json(header.at("demonstrator"), ds.demonstrator);
  ds.steps_binning.max_steps = header.at("binning").at("max_steps").get<double>();
  ds.steps_binning.num_bins = header.at("binning").at("num_bins").get<int>();
  ds.action_binning.a_max = header.at("action_binning").at("a_max").get<double>();
  ds.action_binning.num_bins = header.at("action_binning").at("num_bins").get<int>();
  ds.split_tag = header.at("split").get<std::string>();
  const auto n_episodes = header.at("counts").at("episodes").get<std::size_t>();
  const auto n_steps = header.at("counts").at("steps").get<std::size_t>();
  const int obs_dim = header.at("obs_dim").get<int>();

  for (std::size_t i = 0; i < n_episodes; ++i) {
    EpisodeRecord ep;
    const auto T = r.get<std::uint32_t>();
    ep.goal = r.get_vec(obs_dim);
    for (std::uint32_t t = 0; t <= T; ++t) ep.observations.push_back(r.get_vec(obs_dim));
    for (std::uint32_t t = 0; t < T; ++t) ep.actions.push_back(r.get_vec(2));
    for (std::uint32_t t = 0; t <= T; ++t) ep.steps_to_go.push_back(r.get<std::uint32_t>());
    ep.success = r.get<std::uint8_t>() != 0;
    ep.reason = static_cast<TerminationReason>(r.get<std::uint8_t>());
    ds.episodes.push_back(std::move(ep));
  }
  if (r.left != 0) throw FormatError("dataset: trailing bytes");
  if (ds.total_steps() != n_steps) throw FormatError("dataset: header step count mismatch");
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const auto bytes = serialize_dataset(ds);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("short write to " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("cannot open " + path.string());
  const auto size = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!f) throw FormatError("short read from " + path.string());
  return deserialize_dataset(bytes.data(), bytes.size());
}

double mean_direct_pd_length(const EnvConfig& env, const PointmassDemoConfig& demo, int n,
                             std::uint64_t seed) {
  if (env.kind != EnvKind::pointmass)
    throw ConfigError("mean_direct_pd_length: pointmass only");
  double total = 0;
  for (int i = 0; i < n; ++i) {
    Rng rng = derive_stream(seed, "direct", static_cast<std::uint64_t>(i));
    Environment e(env);
    e.reset(rng);
    VectorXd prev = e.obs();
    while (true) {
      VectorXd err = e.goal() - e.obs();
      VectorXd vel = e.obs() - prev;
      VectorXd a = demo.kp * err - demo.kd * vel;
      for (int k = 0; k < a.size(); ++k) a[k] = std::clamp(a[k], -env.pm.a_max, env.pm.a_max);
      prev = e.obs();
      StepResult sr = e.step(a);
      if (sr.terminated) break;
    }
    total += e.t();
  }
  return total / n;
}

}  // namespace stg
