#include "dlcl/heatmap.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>

#include "dlcl/error.hpp"

namespace dlcl::cli {

std::vector<bool> mask_row(std::span<const double> weights) {
  double row_max = 0.0;
  for (double w : weights) row_max = std::max(row_max, std::abs(w));
  std::vector<bool> out;
  for (double w : weights) {
    const double a = std::abs(w);
    out.push_back(a < kMaskAbsolute || a < kMaskRowFraction * row_max);
  }
  return out;
}

std::vector<HeatmapRow> heatmap_from_checkpoint(const train::Checkpoint& ckpt) {
  static const std::regex pattern(R"(^(encoder|decoder)\.dlcl\.row(\d+)\.w(\d+)$)");
  // stack -> row -> k -> weight
  std::map<std::string, std::map<std::size_t, std::map<std::size_t, double>>> table;
  for (const auto& [name, t] : ckpt.entries) {
    std::smatch m;
    if (!std::regex_match(name, m, pattern)) continue;
    table[m[1]][std::stoul(m[2])][std::stoul(m[3])] = t[0];
  }
  if (table.empty()) throw ConfigError("checkpoint holds no layer-aggregation weights");

  std::vector<HeatmapRow> rows;
  for (const char* stack : {"encoder", "decoder"}) {
    auto it = table.find(stack);
    if (it == table.end()) continue;
    for (const auto& [to, entries] : it->second) {
      if (entries.size() != to) {
        throw IoError(std::string(stack) + " aggregation row " + std::to_string(to) + " has " +
                      std::to_string(entries.size()) + " weights");
      }
      std::vector<double> w;
      for (const auto& [k, v] : entries) w.push_back(v);
      const auto masked = mask_row(w);
      std::size_t i = 0;
      for (const auto& [k, v] : entries) rows.push_back({stack, k, to, v, masked[i++]});
    }
  }
  return rows;
}

void write_heatmap_csv(const std::vector<HeatmapRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "from,to,weight,masked\n";
  std::string stack;
  char buf[96];
  for (const auto& r : rows) {
    if (r.stack != stack) {
      stack = r.stack;
      out << "# " << stack << '\n';
    }
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%d\n", r.from, r.to, r.weight, r.masked ? 1 : 0);
    out << buf;
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace dlcl::cli
