#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dlcl/decoding.hpp"
#include "dlcl/model.hpp"
#include "dlcl/optim.hpp"
#include "dlcl/tasks.hpp"
#include "dlcl/trainer.hpp"

namespace dlcl::cli {

struct RunConfig {
  model::ModelConfig model;
  train::SchedulerConfig scheduler;
  train::TrainConfig train;
  train::TaskSpec task;
  train::BeamConfig beam;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "run";
  // Updates per reference-schedule update for the active preset; 1 when unscaled.
  double schedule_scale = 1.0;

  void validate() const;
};

using KeyValues = std::map<std::string, std::string>;

// Every settable key, in documentation order.
const std::vector<std::string>& config_keys();
std::vector<std::string> preset_names();
const KeyValues& preset(const std::string& name);

// Flat JSON object; values may be numbers, strings or booleans.
KeyValues read_config_file(const std::filesystem::path& path);

// defaults < preset < file < DLCL_SEED < flags
struct ConfigLayers {
  std::optional<std::string> preset;
  std::optional<std::filesystem::path> file;
  std::optional<std::string> env_seed;
  KeyValues flags;
};

RunConfig resolve_config(const ConfigLayers& layers);
// Applies merged key/values onto defaults; `norm` is applied first so that
// norm-dependent dropout defaults can be overridden.
RunConfig build_config(const KeyValues& values);
KeyValues merge_layers(const ConfigLayers& layers);

// Canonical rendering of the resolved configuration (one key=value per line).
std::string describe(const RunConfig& cfg);

}  // namespace dlcl::cli
