// Command-line front end: train, probe-grad, check-factorization,
// export-weights, decode, greedy, avg-ckpt, presets.
#include <array>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dlcl/commands.hpp"
#include "dlcl/error.hpp"

namespace {

using namespace dlcl;

struct ConfigFlags {
  std::string preset;
  std::string file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--preset", preset, "named preset (see `presets`)");
    app->add_option("--config", file, "flat JSON config file");
    for (const auto& key : cli::config_keys()) {
      options[key] = app->add_option("--" + key, values[key]);
    }
  }

  cli::RunConfig resolve() const {
    cli::ConfigLayers layers;
    if (!preset.empty()) layers.preset = preset;
    if (!file.empty()) layers.file = file;
    if (const char* env = std::getenv("DLCL_SEED")) layers.env_seed = std::string(env);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) layers.flags[key] = values.at(key);
    }
    return cli::resolve_config(layers);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep residual stacks with layer aggregation: training and diagnostics"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train on a synthetic sequence task");
  ConfigFlags train_cfg;
  train_cfg.attach(train);

  auto* probe = app.add_subcommand("probe-grad", "per-layer gradient norms at one batch");
  ConfigFlags probe_cfg;
  probe_cfg.attach(probe);
  std::string probe_ckpt, probe_report;
  probe->add_option("--checkpoint", probe_ckpt);
  probe->add_option("--report", probe_report, "CSV path (default <out_dir>/grad_report.csv)");

  auto* factor = app.add_subcommand("check-factorization", "Jacobian factorization check");
  std::string factor_norm = "pre";
  cli::FactorizationArgs fargs;
  factor->add_option("--norm", factor_norm, "pre or post");
  factor->add_option("--depth", fargs.depth);
  factor->add_option("--width", fargs.width, "model width d");
  factor->add_option("--tokens", fargs.tokens);
  factor->add_option("--seed", fargs.seed);

  auto* exportw = app.add_subcommand("export-weights", "aggregation weight heatmap CSV");
  std::string export_ckpt, export_out;
  exportw->add_option("--checkpoint", export_ckpt)->required();
  exportw->add_option("--out", export_out)->required();

  std::map<std::string, ConfigFlags> decode_cfg;
  std::map<std::string, std::array<std::string, 3>> decode_paths;
  std::map<std::string, CLI::App*> decoders;
  for (const char* name : {"decode", "greedy"}) {
    auto* sub = app.add_subcommand(name, std::string(name) == "decode" ? "beam search decoding"
                                                                       : "greedy decoding");
    decode_cfg[name].attach(sub);
    auto& paths = decode_paths[name];
    sub->add_option("--checkpoint", paths[0])->required();
    sub->add_option("--input", paths[1], "one space-separated id sequence per line")->required();
    sub->add_option("--output", paths[2])->required();
    decoders[name] = sub;
  }

  auto* avg = app.add_subcommand("avg-ckpt", "average checkpoints");
  std::vector<std::string> avg_inputs;
  std::string avg_out;
  std::size_t avg_last = 5;
  avg->add_option("inputs", avg_inputs, "checkpoint files, or one checkpoint directory")->required();
  avg->add_option("--out", avg_out)->required();
  avg->add_option("--last", avg_last, "checkpoints taken from a directory");

  auto* presets = app.add_subcommand("presets", "list presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  try {
    if (*train) return cli::cmd_train(train_cfg.resolve(), std::cout);
    if (*probe) {
      std::optional<std::filesystem::path> ckpt, report;
      if (!probe_ckpt.empty()) ckpt = probe_ckpt;
      if (!probe_report.empty()) report = probe_report;
      return cli::cmd_probe_grad(probe_cfg.resolve(), ckpt, report, std::cout);
    }
    if (*factor) {
      fargs.norm = model::parse_norm(factor_norm);
      return cli::cmd_check_factorization(fargs, std::cout);
    }
    if (*exportw) return cli::cmd_export_weights(export_ckpt, export_out, std::cout);
    for (const auto& [name, sub] : decoders) {
      if (!*sub) continue;
      const auto& p = decode_paths[name];
      return cli::cmd_decode(decode_cfg[name].resolve(), p[0], p[1], p[2], name == "greedy", std::cout);
    }
    if (*avg) {
      std::vector<std::filesystem::path> inputs(avg_inputs.begin(), avg_inputs.end());
      return cli::cmd_avg_ckpt(inputs, avg_last, avg_out, std::cout);
    }
    if (*presets) {
      for (const auto& name : cli::preset_names()) {
        std::cout << name;
        for (const auto& [k, v] : cli::preset(name)) std::cout << ' ' << k << '=' << v;
        std::cout << '\n';
      }
      return cli::kExitOk;
    }
  } catch (const dlcl::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kExitUsage;
  }
  return cli::kExitUsage;
}
