#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dlcl/model.hpp"
#include "dlcl/optim.hpp"
#include "dlcl/tasks.hpp"

namespace dlcl::train {

struct TrainConfig {
  std::size_t steps = 2000;           // optimizer updates
  std::size_t accumulation = 1;       // micro-batches per update
  std::size_t batch_tokens = 256;     // target tokens per micro-batch
  std::size_t checkpoint_every = 200;
  std::size_t eval_every = 100;       // 0 disables periodic evaluation
  std::size_t eval_batch_tokens = 512;
  double smoothing = 0.1;
  std::uint64_t seed = 1;
  // Stop once evaluation accuracy reaches this value (disabled when unset).
  std::optional<double> target_accuracy;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> metrics_path;

  void validate() const;
};

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double token_acc = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct EvalPoint {
  std::size_t step = 0;
  double accuracy = 0.0;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::vector<EvalPoint> evals;
  std::vector<std::filesystem::path> checkpoints;
  std::size_t steps_done = 0;
  double initial_loss = 0.0;  // mean over the first divergence window
  double final_accuracy = 0.0;  // teacher-forced, dropout off, held-out batch
  std::optional<std::size_t> reached_target_at;
  bool diverged = false;
  std::string divergence_reason;
};

// Teacher-forced token accuracy with dropout off.
double evaluate_accuracy(model::Transformer& model, const Batch& batch);

// Losses are compared as means over a window of max(1, min(50, steps / 10))
// steps: the initial loss is the mean of the first window, the current loss
// the mean of the latest one.
std::size_t divergence_window(std::size_t planned_steps);

// Divergent when the current loss is non-finite, or when it exceeds the
// initial loss once 20% of the planned steps (and a full window) have passed.
bool is_divergent(double current, double initial, std::size_t step, std::size_t planned_steps);

TrainResult train_loop(model::Transformer& model, const TaskSpec& task,
                       const SchedulerConfig& sched, const AdamConfig& adam,
                       const TrainConfig& cfg);

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

}  // namespace dlcl::train
