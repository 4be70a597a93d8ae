#include <doctest.h>

#include <filesystem>
#include <set>

#include "stg/dataset.hpp"

using namespace stg;

namespace {

Dataset small_pointmass_dataset(int n = 20, std::uint64_t seed = 3) {
  EnvConfig env;
  DemonstratorConfig demo;
  demo.seed = seed;
  return generate_demos(env, demo, n, seed);
}

Dataset gridworld_dataset(int n = 30, std::uint64_t seed = 5) {
  EnvConfig env;
  env.kind = EnvKind::gridworld;
  DemonstratorConfig demo;
  demo.kind = EnvKind::gridworld;
  demo.seed = seed;
  return generate_demos(env, demo, n, seed);
}

}  // namespace

TEST_CASE("steps binning follows floor-and-clamp") {
  Binning b{100.0, 50};  // width 2
  CHECK(b.width() == doctest::Approx(2.0));
  CHECK(b.bin_index(0) == 0);
  CHECK(b.bin_index(3) == 1);
  CHECK(b.bin_index(250) == 49);
  int prev = 0;
  for (int s = 0; s <= 100; ++s) {
    int bin = b.bin_index(s);
    CHECK(bin >= prev);  // monotone
    prev = bin;
  }
  std::set<int> hit;
  for (int s = 0; s <= 100; ++s) hit.insert(b.bin_index(s));
  CHECK(hit.size() == 50);  // surjective onto [0, 49]
  CHECK(b.midpoint(0) == doctest::Approx(1.0));
}

TEST_CASE("action binning round trips bin centers") {
  ActionBinning ab{0.05, 21};
  for (int bin = 0; bin < 21; ++bin) {
    double c = ab.center(bin);
    CHECK(ab.bin_index(c) == bin);
    CHECK(std::abs(c) <= 0.05);
  }
  CHECK(ab.bin_index(-1.0) == 0);   // clamped below
  CHECK(ab.bin_index(1.0) == 20);   // clamped above
  CHECK(ab.bin_index(0.0) == 10);   // zero action sits in the middle bin
}

TEST_CASE("generated demos are deterministic at the byte level") {
  auto a = serialize_dataset(small_pointmass_dataset(10, 7));
  auto b = serialize_dataset(small_pointmass_dataset(10, 7));
  CHECK(a == b);
  auto c = serialize_dataset(small_pointmass_dataset(10, 8));
  CHECK(a != c);
}

TEST_CASE("labels count down to zero") {
  auto ds = small_pointmass_dataset(10);
  for (const auto& ep : ds.episodes) {
    REQUIRE(ep.success);
    const auto T = ep.actions.size();
    REQUIRE(ep.observations.size() == T + 1);
    REQUIRE(ep.steps_to_go.size() == T + 1);
    for (std::size_t t = 0; t <= T; ++t) CHECK(ep.steps_to_go[t] == T - t);
  }
}

TEST_CASE("gridworld labels equal the scripted-route oracle") {
  auto ds = gridworld_dataset(20, 11);
  GridworldDemonstrator demo(ds.demonstrator.gw, ds.env.gw, ds.demonstrator.seed);
  for (const auto& ep : ds.episodes) {
    GridCell goal = obs_to_cell(ds.env.gw, ep.goal);
    for (std::size_t t = 0; t < ep.observations.size(); ++t) {
      GridCell c = obs_to_cell(ds.env.gw, ep.observations[t]);
      CHECK(static_cast<int>(ep.steps_to_go[t]) == demo.remaining_steps(c, goal));
    }
  }
}

TEST_CASE("pointmass demos are much longer than direct PD runs") {
  auto ds = small_pointmass_dataset(100, 1);
  double demo_mean = static_cast<double>(ds.total_steps()) / ds.episodes.size();
  double direct = mean_direct_pd_length(ds.env, ds.demonstrator.pm, 100, 1);
  CHECK(demo_mean >= 2.0 * direct);
}

TEST_CASE("sample_tuple matches the episode-uniform contract") {
  auto ds = small_pointmass_dataset(5, 2);
  Rng rng(77);
  std::vector<int> episode_hits(ds.episodes.size(), 0);
  for (int i = 0; i < 20000; ++i) {
    auto tup = sample_tuple(ds, rng);
    REQUIRE(tup.action.size() == 2);
    // Identify the episode by goal (goals are distinct with probability 1).
    for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
      if (ds.episodes[e].goal == tup.goal) {
        ++episode_hits[e];
        break;
      }
    }
  }
  for (int h : episode_hits) {
    CHECK(h > 3400);  // 20000/5 = 4000 expected
    CHECK(h < 4600);
  }
}

TEST_CASE("sampled labels are consistent with position in episode") {
  auto ds = small_pointmass_dataset(4, 9);
  Rng rng(123);
  for (int i = 0; i < 2000; ++i) {
    auto tup = sample_tuple(ds, rng);
    CHECK(tup.steps_to_go >= 1);  // t <= T-1 so label >= 1
  }
  bool saw_terminal = false;
  for (int i = 0; i < 2000; ++i) {
    auto tup = sample_stg_tuple(ds, rng);
    if (tup.steps_to_go == 0) {
      saw_terminal = true;
      CHECK(tup.action.size() == 0);
    }
  }
  CHECK(saw_terminal);
}

TEST_CASE("split is episode-level, disjoint, and deterministic") {
  auto ds = small_pointmass_dataset(10, 4);
  auto [train, val] = split(ds, 0.2, 99);
  CHECK(train.episodes.size() == 8);
  CHECK(val.episodes.size() == 2);
  CHECK(train.split_tag == "train");
  CHECK(val.split_tag == "val");
  auto [train2, val2] = split(ds, 0.2, 99);
  CHECK(serialize_dataset(train) == serialize_dataset(train2));
  // Disjoint union by goal identity.
  std::set<double> all, got;
  for (const auto& ep : ds.episodes) all.insert(ep.goal[0]);
  for (const auto& ep : train.episodes) got.insert(ep.goal[0]);
  for (const auto& ep : val.episodes) {
    CHECK(got.find(ep.goal[0]) == got.end());
    got.insert(ep.goal[0]);
  }
  CHECK(all == got);
  CHECK_THROWS_AS(split(ds, 0.01, 1), ConfigError);  // empty val partition
}

TEST_CASE("subsample sizes and nesting") {
  auto ds = small_pointmass_dataset(100, 6);
  auto s20 = subsample(ds, 0.2, 5);
  CHECK(s20.episodes.size() == 20);
  auto s10 = subsample(s20, 0.5, 6);
  CHECK(s10.episodes.size() == 10);
  auto id = subsample(ds, 1.0, 7);
  CHECK(serialize_dataset(id) == serialize_dataset(ds));
}

TEST_CASE("dataset file round trip is byte-stable") {
  auto ds = small_pointmass_dataset(8, 12);
  auto bytes = serialize_dataset(ds);
  auto ds2 = deserialize_dataset(bytes.data(), bytes.size());
  auto bytes2 = serialize_dataset(ds2);
  CHECK(bytes == bytes2);
  CHECK(ds2.episodes.size() == ds.episodes.size());
  CHECK(ds2.steps_binning.num_bins == 50);
  CHECK(ds2.action_binning.a_max == doctest::Approx(0.05));

  auto path = std::filesystem::temp_directory_path() / "stg_test_ds.bin";
  save_dataset(ds, path);
  auto ds3 = load_dataset(path);
  CHECK(serialize_dataset(ds3) == bytes);
  std::filesystem::remove(path);

  SUBCASE("corruption is detected") {
    bytes[0] = 'X';
    CHECK_THROWS(deserialize_dataset(bytes.data(), bytes.size()));
  }
  SUBCASE("truncation is detected") {
    CHECK_THROWS(deserialize_dataset(bytes.data(), bytes.size() - 3));
  }
}

TEST_CASE("gridworld binning is exact width one") {
  auto ds = gridworld_dataset(5, 1);
  CHECK(ds.steps_binning.num_bins == ds.env.gw.max_episode_length);
  CHECK(ds.steps_binning.width() == doctest::Approx(1.0));
  for (const auto& ep : ds.episodes)
    for (auto lbl : ep.steps_to_go)
      CHECK(ds.steps_binning.bin_index(lbl) == static_cast<int>(std::min<std::uint32_t>(
                lbl, static_cast<std::uint32_t>(ds.steps_binning.num_bins - 1))));
}
