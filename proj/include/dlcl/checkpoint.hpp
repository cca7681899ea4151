#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dlcl/model.hpp"
#include "dlcl/tensor.hpp"

namespace dlcl::train {

using ConfigHash = std::array<std::uint8_t, 32>;

// SHA-256 of ModelConfig::canonical().
ConfigHash config_hash(const model::ModelConfig& cfg);
std::string hex(const ConfigHash& h);

inline constexpr std::uint16_t kCheckpointVersion = 1;
// The step travels as a rank-0 entry under this name.
inline constexpr const char* kStepEntry = "training.step";

struct Checkpoint {
  std::uint64_t step = 0;
  ConfigHash hash{};
  std::vector<std::pair<std::string, Tensor>> entries;  // store order

  const Tensor* find(const std::string& name) const;
};

Checkpoint capture(const model::Transformer& model, std::uint64_t step);
// Requires a matching hash and exactly the model's parameter names/shapes.
void restore(model::Transformer& model, const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Entrywise arithmetic mean; step = max step.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts);
Checkpoint average_checkpoints(const std::vector<std::filesystem::path>& paths);

}  // namespace dlcl::train
