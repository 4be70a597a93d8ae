#include <doctest.h>

#include <filesystem>

#include "stg/checkpoint.hpp"
#include "stg/common.hpp"

using namespace stg;

namespace {

NetConfig arch() {
  NetConfig cfg;
  cfg.obs_dim = 2;
  cfg.hidden = {8, 4};
  cfg.action_dims = 2;
  cfg.action_bins = 5;
  cfg.steps_bins = 6;
  return cfg;
}

CheckpointMeta meta_for(const NetConfig& cfg) {
  CheckpointMeta m;
  m.step = 1234;
  m.val_bc_loss = 0.5;
  m.val_stg_loss = 1.25;
  m.config_hash = 0xabcdef;
  m.arch = cfg;
  return m;
}

}  // namespace

TEST_CASE("checkpoint round trip preserves parameters and meta") {
  auto cfg = arch();
  DenseNet net = make_net(cfg, 77);
  auto bytes = serialize_checkpoint(net, meta_for(cfg));
  auto [net2, meta2] = deserialize_checkpoint(bytes);
  // Serialization stores float32, so compare after rounding the original.
  DenseNet rounded = net;
  round_trip_f32(rounded);
  CHECK(param_hash(rounded) == param_hash(net2));
  CHECK(meta2.step == 1234);
  CHECK(meta2.val_bc_loss == doctest::Approx(0.5));
  CHECK(meta2.config_hash == 0xabcdef);
  CHECK(meta2.arch.hidden == cfg.hidden);
  CHECK(meta2.tool_version == kToolVersion);
}

TEST_CASE("serialize is deterministic and stable under reload") {
  auto cfg = arch();
  DenseNet net = make_net(cfg, 3);
  auto b1 = serialize_checkpoint(net, meta_for(cfg));
  auto b2 = serialize_checkpoint(net, meta_for(cfg));
  CHECK(b1 == b2);
  auto [net2, meta2] = deserialize_checkpoint(b1);
  auto b3 = serialize_checkpoint(net2, meta2);
  CHECK(b1 == b3);
}

TEST_CASE("file save and load") {
  auto cfg = arch();
  DenseNet net = make_net(cfg, 9);
  auto path = (std::filesystem::temp_directory_path() / "stg_test_ckpt.bin").string();
  save_checkpoint(path, net, meta_for(cfg));
  auto [net2, meta2] = load_checkpoint(path);
  DenseNet rounded = net;
  round_trip_f32(rounded);
  CHECK(param_hash(rounded) == param_hash(net2));
  std::filesystem::remove(path);
}

TEST_CASE("corrupted data is rejected") {
  auto cfg = arch();
  DenseNet net = make_net(cfg, 1);
  auto bytes = serialize_checkpoint(net, meta_for(cfg));
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bytes), FormatError);
  }
  SUBCASE("truncated") {
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
  }
  SUBCASE("trailing garbage") {
    bytes.push_back('\0');
    CHECK_THROWS_AS(deserialize_checkpoint(bytes), FormatError);
  }
}
