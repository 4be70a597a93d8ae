#pragma once

// JSON (de)serialization for all config structs. Parsing is strict: unknown keys
// are rejected so typos fail loudly instead of silently using defaults. Missing
// keys keep their default values.

#include <json.hpp>

#include "stg/demonstrator.hpp"
#include "stg/env.hpp"
#include "stg/nnet.hpp"
#include "stg/selfimprove.hpp"
#include "stg/sft.hpp"

namespace stg {

using Json = nlohmann::json;

// Throws ConfigError if j contains a key not in `allowed`. `ctx` names the
// enclosing object in the error message.
void check_keys(const Json& j, std::initializer_list<const char*> allowed, const char* ctx);

Json to_json(const PointmassConfig& c);
void from_json(const Json& j, PointmassConfig& c);
Json to_json(const GridworldConfig& c);
void from_json(const Json& j, GridworldConfig& c);
Json to_json(const EnvConfig& c);
void from_json(const Json& j, EnvConfig& c);

Json to_json(const PointmassDemoConfig& c);
void from_json(const Json& j, PointmassDemoConfig& c);
Json to_json(const DemonstratorConfig& c);
void from_json(const Json& j, DemonstratorConfig& c);

Json to_json(const NetConfig& c);
void from_json(const Json& j, NetConfig& c);

Json to_json(const AdamWConfig& c);
void from_json(const Json& j, AdamWConfig& c);
Json to_json(const SftConfig& c);
void from_json(const Json& j, SftConfig& c);

Json to_json(const StopCriterion& c);
void from_json(const Json& j, StopCriterion& c);
Json to_json(const SelfImproveConfig& c);
void from_json(const Json& j, SelfImproveConfig& c);

// FNV-1a over the canonical (sorted-key, no-whitespace) dump of a config object.
std::uint64_t config_hash(const Json& j);

}  // namespace stg
