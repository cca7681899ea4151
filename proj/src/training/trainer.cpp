#include "dlcl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dlcl/checkpoint.hpp"
#include "dlcl/error.hpp"
#include "dlcl/graph.hpp"

namespace dlcl::train {

namespace {

// Evaluation sentences come from an index range training never reaches.
constexpr std::uint64_t kEvalIndex = std::uint64_t{1} << 62;

std::uint64_t dropout_seed(std::uint64_t seed, std::size_t step) {
  return seed * 0x9e3779b97f4a7c15ULL + step;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_%06zu.bin", step);
  return dir / name;
}

}  // namespace

void TrainConfig::validate() const {
  if (accumulation < 1) throw ConfigError("accumulation must be >= 1");
  if (batch_tokens < 2) throw ConfigError("batch_tokens must be >= 2");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("smoothing must lie in [0, 1)");
}

double evaluate_accuracy(model::Transformer& model, const Batch& batch) {
  NoGradScope no_grad;
  nn::ForwardContext ctx(false);
  auto r = model.forward(ctx, batch.src, batch.tgt_in);
  return nn::token_accuracy(r.logits, batch.tgt_out, model.config().pad_id).value();
}

std::size_t divergence_window(std::size_t planned_steps) {
  return std::max<std::size_t>(1, std::min<std::size_t>(50, planned_steps / 10));
}

bool is_divergent(double current, double initial, std::size_t step, std::size_t planned_steps) {
  if (!std::isfinite(current)) return true;
  return step >= divergence_window(planned_steps) && 5 * step >= planned_steps && current > initial;
}

TrainResult train_loop(model::Transformer& model, const TaskSpec& task,
                       const SchedulerConfig& sched, const AdamConfig& adam,
                       const TrainConfig& cfg) {
  task.validate();
  sched.validate();
  cfg.validate();
  if (task.vocab_size > model.config().src_vocab || task.vocab_size > model.config().tgt_vocab) {
    throw ConfigError("task vocabulary exceeds the model vocabulary");
  }

  TrainResult result;
  AdamState state(model.parameters(), adam);
  const Batch eval_batch = generate_task_batch(task, cfg.eval_batch_tokens, kEvalIndex);

  auto save = [&](std::size_t step) {
    if (!cfg.checkpoint_dir) return;
    std::filesystem::create_directories(*cfg.checkpoint_dir);
    auto path = checkpoint_path(*cfg.checkpoint_dir, step);
    save_checkpoint(capture(model, step), path);
    result.checkpoints.push_back(path);
  };
  auto evaluate = [&](std::size_t step) {
    const double acc = evaluate_accuracy(model, eval_batch);
    result.evals.push_back({step, acc});
    result.final_accuracy = acc;
    if (cfg.target_accuracy && acc >= *cfg.target_accuracy && !result.reached_target_at) {
      result.reached_target_at = step;
    }
  };

  const std::size_t window = divergence_window(cfg.steps);
  save(0);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<Batch> micro;
    for (std::size_t i = 0; i < cfg.accumulation; ++i) {
      micro.push_back(generate_task_batch(task, cfg.batch_tokens, (step - 1) * cfg.accumulation + i));
    }
    const StepStats stats =
        accumulate_gradients(model, micro, cfg.smoothing, true, dropout_seed(cfg.seed, step));
    MetricsRow row{step, stats.loss, stats.accuracy.value(), lr_at(step, sched),
                   grad_norm(model.parameters())};
    result.metrics.push_back(row);
    result.steps_done = step;

    const std::size_t w = std::min(window, step);
    double current = 0.0;
    for (std::size_t i = step - w; i < step; ++i) current += result.metrics[i].loss / static_cast<double>(w);
    if (step <= window) result.initial_loss = current;
    if (!std::isfinite(stats.loss)) current = stats.loss;

    if (is_divergent(current, result.initial_loss, step, cfg.steps)) {
      result.diverged = true;
      result.divergence_reason = std::isfinite(stats.loss)
                                     ? "loss above the initial loss after 20% of the steps"
                                     : "non-finite loss";
      break;
    }
    try {
      adam_step(model.parameters(), state, row.lr);
    } catch (const NumericError& e) {
      result.diverged = true;
      result.divergence_reason = e.what();
      break;
    }

    if (step % cfg.checkpoint_every == 0) save(step);
    if (cfg.eval_every && step % cfg.eval_every == 0) {
      evaluate(step);
      if (result.reached_target_at) break;
    }
  }
  if (result.evals.empty() || result.evals.back().step != result.steps_done) {
    evaluate(result.steps_done);
  }
  if (cfg.metrics_path) write_metrics_csv(result.metrics, *cfg.metrics_path);
  return result;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "step,loss,token_acc,lr,grad_norm\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.step, r.loss, r.token_acc,
                  r.lr, r.grad_norm);
    out << buf;
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace dlcl::train
