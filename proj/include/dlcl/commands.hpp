#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <vector>

#include "dlcl/config.hpp"
#include "dlcl/model.hpp"

namespace dlcl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitDiverged = 2;

// Each command throws dlcl::Error on bad input; the entry point maps those
// to kExitUsage.

// Writes <out_dir>/metrics.csv, <out_dir>/checkpoints/ and <out_dir>/report.txt.
int cmd_train(const RunConfig& cfg, std::ostream& out);

// Report goes to `report` (default <out_dir>/grad_report.csv).
int cmd_probe_grad(const RunConfig& cfg, const std::optional<std::filesystem::path>& checkpoint,
                   const std::optional<std::filesystem::path>& report, std::ostream& out);

struct FactorizationArgs {
  model::NormPlacement norm = model::NormPlacement::PreNorm;
  std::size_t depth = 2;
  std::size_t width = 4;
  std::size_t tokens = 2;
  std::uint64_t seed = 1;
};

inline constexpr double kFactorizationTolerance = 1e-6;
inline constexpr double kForwardIdentityTolerance = 1e-12;

int cmd_check_factorization(const FactorizationArgs& args, std::ostream& out);

int cmd_export_weights(const std::filesystem::path& checkpoint, const std::filesystem::path& csv,
                       std::ostream& out);

// One space-separated payload per input line; writes "<ids>\t<score>" per line.
int cmd_decode(const RunConfig& cfg, const std::filesystem::path& checkpoint,
               const std::filesystem::path& input, const std::filesystem::path& output, bool greedy,
               std::ostream& out);

// A single directory input expands to its last `last` checkpoints by step.
int cmd_avg_ckpt(const std::vector<std::filesystem::path>& inputs, std::size_t last,
                 const std::filesystem::path& output, std::ostream& out);

}  // namespace dlcl::cli
