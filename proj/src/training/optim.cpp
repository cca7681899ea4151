#include "dlcl/optim.hpp"

#include <cmath>

#include "dlcl/error.hpp"
#include "dlcl/graph.hpp"
#include "dlcl/ops.hpp"

namespace dlcl::train {

void SchedulerConfig::validate() const {
  if (warmup < 1) throw ConfigError("warmup must be >= 1");
  if (!(lr_init < lr_max)) throw ConfigError("lr_init must be below lr_max");
}

double lr_at(std::size_t step, const SchedulerConfig& cfg) {
  if (step < 1) step = 1;
  const double s = static_cast<double>(step), w = static_cast<double>(cfg.warmup);
  // Both branches meet at step == warmup; the decay branch hits lr_max exactly.
  if (step < cfg.warmup) return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * s / w;
  return cfg.lr_max * std::sqrt(w / s);
}

AdamConfig adam_config_for(model::NormPlacement norm) {
  AdamConfig c;
  c.beta2 = norm == model::NormPlacement::PreNorm ? 0.997 : 0.98;
  return c;
}

AdamState::AdamState(const ParameterStore& store, AdamConfig c) : cfg(c) {
  for (const auto& p : store) {
    m.emplace_back(p->value.numel(), 0.0);
    v.emplace_back(p->value.numel(), 0.0);
  }
}

void adam_step(ParameterStore& store, AdamState& state, double lr) {
  if (state.m.size() != store.size()) throw Error("adam_step: state does not match the store");
  for (const auto& p : store) {
    if (!p->trainable || !p->has_grad) continue;
    for (double g : p->grad.data()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in '" + p->name + "', step aborted", 0);
      }
    }
  }
  ++state.t;
  const auto& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  std::size_t i = 0;
  for (const auto& p : store) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    ++i;
    if (!p->trainable || !p->has_grad) continue;
    auto g = p->grad.data();
    auto w = p->value.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

double grad_norm(const ParameterStore& store) {
  double s = 0.0;
  for (const auto& p : store) {
    if (!p->trainable || !p->has_grad) continue;
    for (double g : p->grad.data()) s += g * g;
  }
  return std::sqrt(s);
}

StepStats accumulate_gradients(model::Transformer& model, std::span<const Batch> micro_batches,
                               double smoothing, bool train, std::uint64_t dropout_seed) {
  if (micro_batches.empty()) throw Error("accumulate_gradients: empty micro-batch list");
  StepStats stats;
  for (const auto& b : micro_batches) stats.tokens += b.target_tokens();
  if (stats.tokens == 0) throw Error("accumulate_gradients: no target tokens");

  const auto& cfg = model.config();
  nn::SmoothingConfig sc{smoothing, cfg.tgt_vocab, cfg.pad_id};
  model.parameters().zero_grad();
  for (std::size_t i = 0; i < micro_batches.size(); ++i) {
    const Batch& b = micro_batches[i];
    const double share = static_cast<double>(b.target_tokens()) / static_cast<double>(stats.tokens);
    nn::ForwardContext ctx(train, dropout_seed + i);
    Graph g;
    GraphScope scope(g);
    auto r = model.forward(ctx, b.src, b.tgt_in);
    auto loss = nn::label_smoothed_cross_entropy(r.logits, b.tgt_out, sc);
    stats.loss += share * loss.loss.item();
    auto acc = nn::token_accuracy(r.logits, b.tgt_out, cfg.pad_id);
    stats.accuracy.correct += acc.correct;
    stats.accuracy.total += acc.total;
    g.backward(ops::scale(loss.loss, share));
  }
  return stats;
}

}  // namespace dlcl::train
