#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dlcl/checkpoint.hpp"

namespace dlcl::cli {

inline constexpr double kMaskAbsolute = 0.1;
inline constexpr double kMaskRowFraction = 0.05;

// masked <=> |w| < 0.1 or |w| < 0.05 * max_k |w_k| over the row
std::vector<bool> mask_row(std::span<const double> weights);

struct HeatmapRow {
  std::string stack;  // "encoder" or "decoder"
  std::size_t from = 0;  // producer index k (0 = embedding)
  std::size_t to = 0;    // consuming layer l+1
  double weight = 0.0;
  bool masked = false;
};

// Reads "<stack>.dlcl.row<r>.w<k>" entries; throws ConfigError when the
// checkpoint holds none.
std::vector<HeatmapRow> heatmap_from_checkpoint(const train::Checkpoint& ckpt);

// "from,to,weight,masked" with a "# <stack>" comment opening each stack.
void write_heatmap_csv(const std::vector<HeatmapRow>& rows, const std::filesystem::path& path);

}  // namespace dlcl::cli
