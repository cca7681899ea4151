#include "dlcl/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dlcl/checkpoint.hpp"
#include "dlcl/decoding.hpp"
#include "dlcl/diagnostics.hpp"
#include "dlcl/error.hpp"
#include "dlcl/heatmap.hpp"
#include "dlcl/trainer.hpp"

namespace dlcl::cli {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
}

}  // namespace

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  std::filesystem::create_directories(cfg.out_dir);
  write_text(cfg.out_dir / "config.txt", describe(cfg));

  model::Transformer model(cfg.model, cfg.seed);
  const auto result = train::train_loop(model, cfg.task, cfg.scheduler,
                                        train::adam_config_for(cfg.model.norm), cfg.train);

  std::ostringstream report;
  report << "config_hash=" << train::hex(train::config_hash(cfg.model)) << '\n'
         << "schedule_scale=" << num(cfg.schedule_scale) << '\n'
         << "steps_done=" << result.steps_done << '\n'
         << "initial_loss=" << num(result.initial_loss) << '\n'
         << "final_loss=" << num(result.metrics.empty() ? 0.0 : result.metrics.back().loss) << '\n'
         << "final_accuracy=" << num(result.final_accuracy) << '\n'
         << "diverged=" << (result.diverged ? 1 : 0) << '\n';
  if (result.diverged) report << "divergence_reason=" << result.divergence_reason << '\n';
  if (result.reached_target_at) report << "reached_target_at=" << *result.reached_target_at << '\n';
  write_text(cfg.out_dir / "report.txt", report.str());
  out << report.str();
  return result.diverged ? kExitDiverged : kExitOk;
}

int cmd_probe_grad(const RunConfig& cfg, const std::optional<std::filesystem::path>& checkpoint,
                   const std::optional<std::filesystem::path>& report, std::ostream& out) {
  model::Transformer model(cfg.model, cfg.seed);
  if (checkpoint) train::restore(model, train::load_checkpoint(*checkpoint));
  const auto batch = train::generate_task_batch(cfg.task, cfg.train.batch_tokens, 0);
  const auto r = diag::probe_gradient_norms(model, batch, cfg.seed, cfg.train.smoothing);

  std::filesystem::path path = report ? *report : cfg.out_dir / "grad_report.csv";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  diag::export_report_csv(r, path);
  out << "layers=" << r.depth() << " embedding_grad_norm=" << num(r.embedding_norm())
      << " bottom_top_ratio=" << num(r.bottom_top_ratio()) << (r.divergent ? " divergent" : "")
      << '\n';
  return r.divergent ? kExitDiverged : kExitOk;
}

int cmd_check_factorization(const FactorizationArgs& args, std::ostream& out) {
  diag::FactorizationSetup setup;
  setup.norm = args.norm;
  setup.depth = args.depth;
  setup.d_model = args.width;
  setup.tokens = args.tokens;
  setup.seed = args.seed;
  const auto check = diag::check_factorization(setup);
  bool pass = check.max_rel_error <= kFactorizationTolerance;
  out << "norm=" << model::to_string(args.norm) << " depth=" << args.depth
      << " max_rel_error=" << num(check.max_rel_error);
  if (args.norm == model::NormPlacement::PreNorm) {
    pass = pass && check.forward_identity_error <= kForwardIdentityTolerance;
    out << " forward_identity_error=" << num(check.forward_identity_error);
  }
  out << (pass ? " pass" : " fail") << '\n';
  return pass ? kExitOk : kExitDiverged;
}

int cmd_export_weights(const std::filesystem::path& checkpoint, const std::filesystem::path& csv,
                       std::ostream& out) {
  const auto rows = heatmap_from_checkpoint(train::load_checkpoint(checkpoint));
  write_heatmap_csv(rows, csv);
  const auto masked = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.masked; });
  out << "weights=" << rows.size() << " masked=" << masked << '\n';
  return kExitOk;
}

namespace {

std::vector<int> parse_ids(const std::string& line, std::size_t line_no, std::size_t vocab) {
  std::istringstream is(line);
  std::vector<int> ids;
  std::string tok;
  while (is >> tok) {
    int id = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), id);
    if (ec != std::errc() || p != tok.data() + tok.size()) {
      throw ConfigError("input line " + std::to_string(line_no) + ": '" + tok + "' is not an integer id");
    }
    if (id < train::kFirstPayload || static_cast<std::size_t>(id) >= vocab) {
      throw ConfigError("input line " + std::to_string(line_no) + ": id " + tok +
                        " outside the payload range [" + std::to_string(train::kFirstPayload) + ", " +
                        std::to_string(vocab) + ")");
    }
    ids.push_back(id);
  }
  if (ids.empty()) throw ConfigError("input line " + std::to_string(line_no) + " is empty");
  return ids;
}

}  // namespace

int cmd_decode(const RunConfig& cfg, const std::filesystem::path& checkpoint,
               const std::filesystem::path& input, const std::filesystem::path& output, bool greedy,
               std::ostream& out) {
  model::Transformer model(cfg.model, cfg.seed);
  train::restore(model, train::load_checkpoint(checkpoint));

  std::ifstream in(input);
  if (!in) throw IoError("cannot open input '" + input.string() + "'");
  std::vector<std::vector<int>> sources;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    sources.push_back(parse_ids(line, n, cfg.model.src_vocab));
  }

  std::ostringstream hyps;
  char score[40];
  for (const auto& src : sources) {
    train::TransformerScorer scorer(model, src);
    const auto h = greedy ? train::greedy_decode(scorer, cfg.beam.max_len, cfg.beam.alpha)
                          : train::beam_search_decode(scorer, cfg.beam);
    for (std::size_t i = 0; i + 1 < h.tokens.size(); ++i) hyps << (i ? " " : "") << h.tokens[i];
    std::snprintf(score, sizeof score, "%.17g", h.score);
    hyps << '\t' << score << '\n';
  }
  write_text(output, hyps.str());
  out << "decoded=" << sources.size() << '\n';
  return kExitOk;
}

int cmd_avg_ckpt(const std::vector<std::filesystem::path>& inputs, std::size_t last,
                 const std::filesystem::path& output, std::ostream& out) {
  std::vector<std::filesystem::path> paths = inputs;
  if (inputs.size() == 1 && std::filesystem::is_directory(inputs[0])) {
    std::vector<std::pair<std::uint64_t, std::filesystem::path>> found;
    for (const auto& e : std::filesystem::directory_iterator(inputs[0])) {
      if (e.path().extension() != ".bin") continue;
      found.emplace_back(train::load_checkpoint(e.path()).step, e.path());
    }
    std::sort(found.begin(), found.end());
    if (found.size() > last) found.erase(found.begin(), found.end() - static_cast<std::ptrdiff_t>(last));
    paths.clear();
    for (const auto& [step, p] : found) paths.push_back(p);
  }
  if (paths.empty()) throw ConfigError("avg-ckpt: no checkpoints to average");
  const auto avg = train::average_checkpoints(paths);
  train::save_checkpoint(avg, output);
  out << "averaged=" << paths.size() << " step=" << avg.step << '\n';
  return kExitOk;
}

}  // namespace dlcl::cli
