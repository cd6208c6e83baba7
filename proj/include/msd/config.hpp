#pragma once

#include <cstdint>
#include <filesystem>

#include "json.hpp"
#include "msd/dataset.hpp"
#include "msd/eval.hpp"
#include "msd/trainer.hpp"

namespace msd {

/// Parsed run configuration file. `seed` feeds data generation, training and
/// evaluation alike.
struct RunConfig {
  std::uint64_t seed = 0;
  GenConfig gen;
  TrainConfig train;
  EvalOptions eval;
};

/// Validates against the schema (unknown keys and wrong types are rejected
/// with a JSON path such as "$.train.epochs") and then the value ranges.
/// Every field has a default except the top-level "seed".
RunConfig parse_run_config(const nlohmann::json& doc);

/// Reads and parses a JSON file; IoError if it cannot be read, ConfigError if
/// it is not valid JSON or fails the schema.
RunConfig load_run_config(const std::filesystem::path& path);

/// The effective configuration, every field filled in.
nlohmann::ordered_json to_json(const RunConfig& cfg);

}  // namespace msd
