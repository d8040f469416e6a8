#pragma once

// Run configuration: one JSON document plus environment overrides.
//
// Override variables are MULFERL_<PATH>, the key path upper-cased with "__"
// between levels: MULFERL_LEARNING_RATE=0.01, MULFERL_DPO__BETA=2,
// MULFERL_FEEDBACK__BACKEND=remote. Values are parsed as JSON when possible
// and taken as strings otherwise.

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "mulferl/env.hpp"
#include "mulferl/loop.hpp"

namespace mulferl {

inline constexpr std::string_view kEnvPrefix = "MULFERL_";

struct RunConfig {
  TrainConfig train;
  BasePrior prior;
  std::size_t dataset_size = 1000;
  std::uint64_t dataset_seed = 1;
  TrainIo io;
};

/// Throws ConfigError naming the field for missing required keys
/// (learning_rate), unknown keys, and out-of-range values.
RunConfig parse_run_config(const nlohmann::json& doc);

/// Applies overrides from `env` (name -> value) onto `doc`. Variables named
/// `skip` (the secret holder) are ignored.
void apply_env_overrides(nlohmann::json& doc, const std::map<std::string, std::string>& env,
                         const std::string& skip = {});

std::map<std::string, std::string> environment_snapshot();

/// Reads the file (IoError), parses JSON (ConfigError "<file>"), applies the
/// process environment, then parse_run_config.
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const RunConfig& cfg);

}  // namespace mulferl
