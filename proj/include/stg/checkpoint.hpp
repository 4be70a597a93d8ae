#pragma once

#include <string>

#include "stg/nnet.hpp"

namespace stg {

// Checkpoint metadata carried alongside the parameter blob. Architecture
// fields let load_checkpoint rebuild the net without external context.
struct CheckpointMeta {
    long step = 0;
    double val_bc_loss = 0.0;
    double val_stg_loss = 0.0;
    std::uint64_t config_hash = 0;
    std::string tool_version;
    NetConfig arch;
};

void save_checkpoint(const std::string& path, const DenseNet& net, const CheckpointMeta& meta);
std::pair<DenseNet, CheckpointMeta> load_checkpoint(const std::string& path);

// In-memory serialization used for weight publication over the wire.
std::string serialize_checkpoint(const DenseNet& net, const CheckpointMeta& meta);
std::pair<DenseNet, CheckpointMeta> deserialize_checkpoint(const std::string& bytes);

}  // namespace stg
