// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Usage: acceptance [--work DIR] [criterion...]
#include <algorithm>
#include <chrono>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dlcl/checkpoint.hpp"
#include "dlcl/config.hpp"
#include "dlcl/decoding.hpp"
#include "dlcl/diagnostics.hpp"
#include "dlcl/heatmap.hpp"
#include "dlcl/optim.hpp"
#include "dlcl/trainer.hpp"
#include "fd_cases.hpp"

namespace fs = std::filesystem;
using namespace dlcl;
using model::AggregationMode;
using model::NormPlacement;

namespace {

fs::path g_work = "acceptance_work";

void note(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

const char* name(NormPlacement n) { return n == NormPlacement::PreNorm ? "pre" : "post"; }

// ---------------------------------------------------------------------------

bool autodiff_soundness() {
  constexpr double tol = 1e-5;
  Stopwatch sw;
  bool ok = true;
  double worst = 0.0;
  std::string worst_op;
  for (const auto& c : testing::op_cases()) {
    double e = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) e = std::max(e, c.run(seed));
    if (e > worst) worst = e, worst_op = c.name;
    if (e > tol) {
      note("%s: max rel error %.3g", c.name.c_str(), e);
      ok = false;
    }
  }
  note("%zu primitive cases x 10 seeds, worst %.3g (%s)", testing::op_cases().size(), worst,
       worst_op.c_str());

  for (auto norm : {NormPlacement::PreNorm, NormPlacement::PostNorm}) {
    double e2e = 0.0;
    testing::FdStats all;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      e2e = std::max(e2e, testing::model_fd_error(norm, 2, 8, seed, testing::is_embedding_table).max_rel);
      auto s = testing::model_fd_error(norm, 2, 8, seed);
      all.max_rel = std::max(all.max_rel, s.max_rel);
      all.max_excess = std::max(all.max_excess, s.max_excess);
      all.coordinates = s.coordinates;
    }
    note("model loss, %s-norm, d=8 L=2, 2 target tokens: embedding-table max rel %.3g", name(norm), e2e);
    note("  every parameter (%zu coordinates): max rel %.3g, max |a-n| - 1e-5*|g| = %.3g", all.coordinates,
         all.max_rel, all.max_excess);
    ok = ok && e2e <= tol && all.max_excess <= 1e-9;
  }
  note("runtime %.1fs (limit 120s)", sw.seconds());
  return ok && sw.seconds() < 120.0;
}

bool factorization(NormPlacement norm) {
  bool ok = true;
  double worst = 0.0, worst_fwd = 0.0;
  for (std::size_t d : {2, 4}) {
    for (std::size_t depth : {2, 4}) {
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        diag::FactorizationSetup s;
        s.norm = norm;
        s.depth = depth;
        s.d_model = d;
        s.seed = seed;
        const auto r = diag::check_factorization(s);
        worst = std::max(worst, r.max_rel_error);
        worst_fwd = std::max(worst_fwd, r.forward_identity_error);
        if (r.max_rel_error > 1e-6 || r.forward_identity_error > 1e-12) {
          note("d=%zu L=%zu seed=%llu: jacobian %.3g forward %.3g", d, depth,
               static_cast<unsigned long long>(seed), r.max_rel_error, r.forward_identity_error);
          ok = false;
        }
      }
    }
  }
  note("20 cases, worst jacobian rel error %.3g (limit 1e-6)", worst);
  if (norm == NormPlacement::PreNorm) note("worst forward identity error %.3g (limit 1e-12)", worst_fwd);
  return ok;
}

bool vanishing_gradient() {
  Stopwatch sw;
  const std::vector<std::size_t> depths{4, 8, 16, 20};
  std::map<std::pair<std::size_t, NormPlacement>, std::pair<double, double>> mean;  // emb, ratio
  for (std::size_t depth : depths) {
    for (auto norm : {NormPlacement::PreNorm, NormPlacement::PostNorm}) {
      double emb = 0.0, ratio = 0.0;
      for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        train::TaskSpec spec;
        spec.seed = seed;
        const auto batch = train::generate_task_batch(spec, 64, 0);
        model::ModelConfig c;
        c.encoder_depth = depth;
        c.norm = norm;
        model::Transformer m(c, seed);
        const auto r = diag::probe_gradient_norms(m, batch, seed);
        emb += r.embedding_norm() / 10.0;
        ratio += r.bottom_top_ratio() / 10.0;
      }
      mean[{depth, norm}] = {emb, ratio};
    }
    const auto& pre = mean[{depth, NormPlacement::PreNorm}];
    const auto& post = mean[{depth, NormPlacement::PostNorm}];
    note("L=%2zu  embedding grad norm pre %.4g post %.4g (post/pre %.3f)  bottom/top pre %.3f post %.3f",
         depth, pre.first, post.first, post.first / pre.first, pre.second, post.second);
  }
  const double emb_ratio =
      mean[{20, NormPlacement::PostNorm}].first / mean[{20, NormPlacement::PreNorm}].first;
  bool monotone = true;
  for (std::size_t i = 1; i < depths.size(); ++i) {
    monotone = monotone && mean[{depths[i], NormPlacement::PostNorm}].second <=
                               mean[{depths[i - 1], NormPlacement::PostNorm}].second;
  }
  note("post/pre embedding ratio at L=20: %.3f (needs < 0.2)", emb_ratio);
  note("post-norm bottom/top ratio non-increasing in L: %s", monotone ? "yes" : "no");
  note("runtime %.1fs (limit 600s)", sw.seconds());
  return emb_ratio < 0.2 && monotone && sw.seconds() < 600.0;
}

bool special_case() {
  bool ok = true;
  for (auto norm : {NormPlacement::PreNorm, NormPlacement::PostNorm}) {
    for (std::size_t depth : {2, 6}) {
      double fwd = 0.0, grad = 0.0;
      for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto e = testing::passthrough_vs_standard(norm, depth, seed);
        fwd = std::max(fwd, e.forward);
        grad = std::max(grad, e.gradient);
      }
      note("%s-norm L=%zu: forward %.3g gradient %.3g (limit 1e-9)", name(norm), depth, fwd, grad);
      ok = ok && fwd <= 1e-9 && grad <= 1e-9;
    }
  }
  return ok;
}

struct RunOutcome {
  train::TrainResult result;
  double seconds = 0.0;
};

RunOutcome run_copy_task(const std::string& preset, const cli::KeyValues& flags, const std::string& tag) {
  cli::ConfigLayers layers;
  layers.preset = preset;
  layers.flags = flags;
  auto cfg = cli::resolve_config(layers);
  cfg.train.checkpoint_dir.reset();
  fs::create_directories(g_work);
  std::string file = tag;
  std::replace_if(file.begin(), file.end(), [](char ch) { return !std::isalnum(static_cast<unsigned char>(ch)); }, '_');
  cfg.train.metrics_path = g_work / (file + "_metrics.csv");
  model::Transformer m(cfg.model, cfg.seed);
  Stopwatch sw;
  auto r = train::train_loop(m, cfg.task, cfg.scheduler, train::adam_config_for(cfg.model.norm), cfg.train);
  RunOutcome out{std::move(r), sw.seconds()};
  std::string trace;
  for (const auto& e : out.result.evals) {
    char buf[32];
    std::snprintf(buf, sizeof buf, " %zu:%.3f", e.step, e.accuracy);
    trace += buf;
  }
  note("%s: %zu updates, %.0fs, final accuracy %.4f, diverged %s%s", tag.c_str(), out.result.steps_done,
       out.seconds, out.result.final_accuracy, out.result.diverged ? "yes: " : "no",
       out.result.diverged ? out.result.divergence_reason.c_str() : "");
  note("  evals%s", trace.c_str());
  return out;
}

bool trainability() {
  const cli::KeyValues common{{"encoder_depth", "12"}, {"accumulation", "1"}, {"steps", "2000"},
                              {"eval_every", "100"}, {"target_accuracy", "0.99"}};
  const auto pre = run_copy_task("dlcl-prenorm-20L", common, "pre-norm DLCL 12L");
  const auto& r = pre.result;
  const bool ok = !r.diverged && r.reached_target_at && *r.reached_target_at <= 2000 && pre.seconds < 900.0;
  if (r.reached_target_at) note("reached 0.99 at update %zu", *r.reached_target_at);

  const auto post = run_copy_task("deep-postnorm-20L", common, "post-norm 12L, same budget (recorded only)");
  note("post-norm outcome: %s",
       post.result.diverged                       ? "diverged"
       : post.result.final_accuracy < r.final_accuracy ? "lower accuracy"
                                                       : "not worse");
  return ok;
}

bool ablations() {
  bool ok = true;
  std::vector<std::pair<std::string, double>> acc;
  for (const char* mode : {"dlcl_all_one", "dlcl_average", "dlcl_average_no_ln", "dlcl"}) {
    const cli::KeyValues flags{{"encoder_depth", "6"}, {"accumulation", "1"}, {"steps", "600"},
                               {"eval_every", "100"}, {"aggregation", mode}};
    const auto o = run_copy_task("dlcl-prenorm-20L", flags, std::string("pre-norm 6L ") + mode);
    ok = ok && !o.result.diverged && o.result.steps_done == 600;
    acc.emplace_back(mode, o.result.final_accuracy);
  }
  std::stable_sort(acc.begin(), acc.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::string order;
  for (const auto& [m, a] : acc) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%s %.4f", order.empty() ? "" : ", ", m.c_str(), a);
    order += buf;
  }
  note("final accuracy, best first: %s", order.c_str());
  return ok;
}

bool schedule() {
  bool ok = true;
  for (auto [lr, warmup] : std::vector<std::pair<double, std::size_t>>{
           {7e-4, 4000}, {1e-3, 8000}, {2e-3, 16000}, {7e-4, 160}, {1e-3, 320}, {2e-3, 640}}) {
    train::SchedulerConfig s{lr, warmup, 1e-7};
    const bool peak = train::lr_at(warmup, s) == lr;
    const bool half = train::lr_at(4 * warmup, s) == lr / 2;
    if (!peak || !half) note("lr_max=%g warmup=%zu: peak %d half %d", lr, warmup, peak, half);
    ok = ok && peak && half;
  }
  note("lr_at(w) == lr_max and lr_at(4w) == lr_max/2 exactly for 6 schedules: %s", ok ? "yes" : "no");

  auto cfg = testing::tiny_config(NormPlacement::PreNorm, AggregationMode::DlclLearned, 3);
  model::Transformer m(cfg, 5);
  const auto before = train::capture(m, 0);
  for (auto norm : {NormPlacement::PreNorm, NormPlacement::PostNorm}) {
    train::AdamState st(m.parameters(), train::adam_config_for(norm));
    for (int i = 0; i < 5; ++i) {
      m.parameters().zero_grad();
      train::adam_step(m.parameters(), st, 1e-3);
    }
  }
  const auto after = train::capture(m, 0);
  bool fix = true;
  for (std::size_t i = 0; i < before.entries.size(); ++i) fix = fix && bit_equal(before.entries[i].second, after.entries[i].second);
  note("Adam zero-gradient steps leave all %zu checkpoint entries bit-identical: %s", before.entries.size(), fix ? "yes" : "no");
  return ok && fix;
}

bool decoding() {
  bool ok = true;
  std::size_t agree = 0, total = 0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    testing::TableScorer s(seed, 5);
    const auto g = train::greedy_decode(s, 8, 0.6);
    const auto b = train::beam_search_decode(s, {1, 0.6, 8});
    ++total;
    agree += g.tokens == b.tokens;
  }
  auto cfg = testing::tiny_config(NormPlacement::PreNorm, AggregationMode::DlclLearned, 2);
  model::Transformer m(cfg, 3);
  for (const auto& src : std::vector<std::vector<int>>{{3, 4, 5}, {7, 7}, {11, 3, 9, 4}, {5}}) {
    train::TransformerScorer s(m, src);
    ++total;
    agree += train::greedy_decode(s, 10, 0.6).tokens == train::beam_search_decode(s, {1, 0.6, 10}).tokens;
  }
  note("beam=1 equals greedy token-for-token: %zu/%zu", agree, total);
  ok = agree == total;

  for (double alpha : {0.0, 0.6}) {
    testing::TableScorer s(0);
    testing::load_hand_table(s);
    const auto beam = train::beam_search_decode(s, {4, alpha, 3});
    const auto oracle = testing::brute_force_decode(s, 3, 3, alpha);
    std::string seq;
    for (int t : beam.tokens) seq += std::to_string(t) + " ";
    const bool same = beam.tokens == oracle.tokens && std::abs(beam.score - oracle.score) <= 1e-12;
    note("hand-built model alpha=%.1f: beam=4 [%s] score %.6f, oracle score %.6f: %s", alpha,
         seq.c_str(), beam.score, oracle.score, same ? "match" : "MISMATCH");
    ok = ok && same;
  }
  return ok;
}

bool persistence() {
  fs::create_directories(g_work);
  auto cfg = testing::tiny_config(NormPlacement::PostNorm, AggregationMode::DlclLearned, 3);
  model::Transformer m(cfg, 9);
  const auto ckpt = train::capture(m, 1234);
  const auto a = g_work / "roundtrip_a.bin", b = g_work / "roundtrip_b.bin";
  train::save_checkpoint(ckpt, a);
  const auto loaded = train::load_checkpoint(a);
  train::save_checkpoint(loaded, b);

  bool round = loaded.step == ckpt.step && loaded.hash == ckpt.hash && loaded.entries.size() == ckpt.entries.size();
  for (std::size_t i = 0; round && i < ckpt.entries.size(); ++i) {
    round = loaded.entries[i].first == ckpt.entries[i].first && bit_equal(loaded.entries[i].second, ckpt.entries[i].second);
  }
  model::Transformer other(cfg, 10);
  train::restore(other, loaded);
  const auto again = train::capture(other, 1234);
  for (std::size_t i = 0; round && i < ckpt.entries.size(); ++i) round = bit_equal(again.entries[i].second, ckpt.entries[i].second);
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string ba{std::istreambuf_iterator<char>(fa), {}}, bb{std::istreambuf_iterator<char>(fb), {}};
  round = round && ba == bb;
  note("save/load/restore round trip bit-identical (%zu entries, %zu bytes): %s", ckpt.entries.size(), ba.size(),
       round ? "yes" : "no");

  bool identity = true;
  for (std::size_t k : {1, 2, 3, 5, 7}) {
    const auto avg = train::average_checkpoints(std::vector<train::Checkpoint>(k, ckpt));
    for (std::size_t i = 0; i < ckpt.entries.size(); ++i) identity = identity && bit_equal(avg.entries[i].second, ckpt.entries[i].second);
  }
  note("average of k identical checkpoints is the identity, k in {1,2,3,5,7}: %s", identity ? "yes" : "no");

  auto neg = ckpt;
  for (auto& [n, t] : neg.entries) {
    if (n == train::kStepEntry) continue;
    for (double& v : t.mutable_data()) v = -v;
  }
  const auto zero = train::average_checkpoints({ckpt, neg});
  bool zeros = true;
  for (const auto& [n, t] : zero.entries) {
    if (n == train::kStepEntry) continue;
    for (double v : t.data()) zeros = zeros && v == 0.0;
  }
  note("average of +p and -p is exactly zero: %s", zeros ? "yes" : "no");
  return round && identity && zeros;
}

bool heatmap() {
  const std::vector<double> row{4.1, 3.3, 3.2, 1.7, 2.3, 1.1, 0.0, 0.0, 0.1, 0.8, 0.5,
                                0.2, 0.5, 0.0, 0.5, 0.2, 0.0, 0.0, 0.1, 0.2, 0.0};
  const auto mask = cli::mask_row(row);
  std::set<double> masked, kept;
  for (std::size_t i = 0; i < row.size(); ++i) (mask[i] ? masked : kept).insert(row[i]);
  const bool rule = masked == std::set<double>{0.0, 0.1, 0.2} &&
                    kept == std::set<double>{0.5, 0.8, 1.1, 1.7, 2.3, 3.2, 3.3, 4.1};
  std::string ms, ks;
  for (double v : masked) ms += std::to_string(v).substr(0, 3) + " ";
  for (double v : kept) ks += std::to_string(v).substr(0, 3) + " ";
  note("row max 4.1: masked {%s} kept {%s}", ms.c_str(), ks.c_str());

  // The same row as the last encoder row of a checkpoint, exported to CSV.
  fs::create_directories(g_work);
  auto cfg = testing::tiny_config(NormPlacement::PreNorm, AggregationMode::DlclLearned, 21, 4);
  model::Transformer m(cfg, 1);
  const auto& weights = m.encoder_aggregator()->weights().rows.back();
  for (std::size_t k = 0; k < row.size(); ++k) weights[k]->value = Tensor::scalar(row[k]);
  const auto rows = cli::heatmap_from_checkpoint(train::capture(m, 0));
  const auto csv = g_work / "heatmap.csv";
  cli::write_heatmap_csv(rows, csv);
  bool exported = true;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.stack != "encoder" || r.to != 21) continue;
    exported = exported && r.weight == row[r.from] && r.masked == mask[r.from];
    ++n;
  }
  exported = exported && n == row.size();

  const std::string cmd = std::string(DLCL_PYTHON) + " " + DLCL_HEATMAP_READER + " " + csv.string() +
                          " > " + (g_work / "reader.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream rf(g_work / "reader.txt");
  std::string line, last;
  while (std::getline(rf, line)) last = line;
  note("exported CSV row 21 carries the same flags: %s; independent reader: %s (exit %d)",
       exported ? "yes" : "no", last.c_str(), status);
  return rule && exported && status == 0;
}

struct Criterion {
  int id;
  const char* title;
  std::function<bool()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      only.insert(std::atoi(argv[i]));
    }
  }

  const std::vector<Criterion> criteria{
      {1, "autodiff finite-difference soundness", autodiff_soundness},
      {2, "pre-norm Jacobian factorization", [] { return factorization(NormPlacement::PreNorm); }},
      {3, "post-norm Jacobian factorization", [] { return factorization(NormPlacement::PostNorm); }},
      {4, "post-norm vanishing gradient at init", vanishing_gradient},
      {5, "residual passthrough equals standard", special_case},
      {6, "12-layer pre-norm DLCL trains the copy task", trainability},
      {7, "aggregation ablations train without divergence", ablations},
      {8, "learning-rate schedule and Adam fixpoint", schedule},
      {9, "greedy and beam decoding", decoding},
      {10, "checkpoint persistence and averaging", persistence},
      {11, "heatmap masking", heatmap},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    std::printf("[%2d] %s\n", c.id, c.title);
    std::fflush(stdout);
    bool ok = false;
    try {
      ok = c.run();
    } catch (const std::exception& e) {
      note("error: %s", e.what());
    }
    std::printf("%s %d: %s\n", ok ? "PASS" : "FAIL", c.id, c.title);
    std::fflush(stdout);
    failed += !ok;
  }
  std::printf("%d criteria failed\n", failed);
  return failed ? 1 : 0;
}
