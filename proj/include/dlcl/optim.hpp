#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dlcl/model.hpp"
#include "dlcl/parameter.hpp"
#include "dlcl/tasks.hpp"

namespace dlcl::train {

struct SchedulerConfig {
  double lr_max = 7e-4;
  std::size_t warmup = 4000;
  double lr_init = 1e-7;

  void validate() const;
};

// Linear warmup from lr_init to lr_max, then lr_max * sqrt(warmup / step).
double lr_at(std::size_t step, const SchedulerConfig& cfg);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// beta2 = 0.98 for post-norm, 0.997 for pre-norm.
AdamConfig adam_config_for(model::NormPlacement norm);

struct AdamState {
  AdamConfig cfg;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m, v;  // parallel to the store order

  AdamState(const ParameterStore& store, AdamConfig cfg);
};

// Bias-corrected Adam on every trainable parameter. Throws NumericError
// without touching any parameter when a gradient is non-finite.
void adam_step(ParameterStore& store, AdamState& state, double lr);

double grad_norm(const ParameterStore& store);

struct StepStats {
  double loss = 0.0;  // mean per non-pad target token over all micro-batches
  std::size_t tokens = 0;
  nn::Accuracy accuracy;
};

// Zeroes the gradients, then backpropagates each micro-batch with its loss
// weighted by its share of target tokens, so the accumulated gradient equals
// that of the concatenated batch.
StepStats accumulate_gradients(model::Transformer& model, std::span<const Batch> micro_batches,
                               double smoothing, bool train, std::uint64_t dropout_seed);

}  // namespace dlcl::train
