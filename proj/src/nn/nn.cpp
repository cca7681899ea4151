#include "dlcl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dlcl/error.hpp"
#include "dlcl/graph.hpp"
#include "dlcl/ops.hpp"

namespace dlcl::nn {

Tensor ForwardContext::bind(Parameter& p) const {
  if (Graph* g = active_graph()) return g->watch(p);
  return p.value.with_shape(p.value.shape());
}

Tensor ForwardContext::dropout(const Tensor& x, double rate) {
  if (!train_ || rate <= 0.0) return x;
  if (rate >= 1.0) throw Error("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double k = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = keep(rng_) ? k : 0.0;
  return ops::mul(x, Tensor(x.shape(), std::move(mask)));
}

std::size_t TokenBatch::non_pad_count() const {
  std::size_t n = 0;
  for (int id : ids) n += id != pad_id;
  return n;
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<int>>& rows, int pad_id) {
  if (rows.empty()) throw Error("TokenBatch: no rows");
  TokenBatch b;
  b.batch = rows.size();
  b.pad_id = pad_id;
  for (const auto& r : rows) b.length = std::max(b.length, r.size());
  if (b.length == 0) throw Error("TokenBatch: all rows empty");
  b.ids.assign(b.batch * b.length, pad_id);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), b.ids.begin() + i * b.length);
  }
  return b;
}

LayerNormParams make_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t d,
                                double eps) {
  if (eps <= 0.0) throw Error("layer norm eps must be positive");
  LayerNormParams p;
  p.gain = &store.add(prefix + ".gain", Tensor::full({d}, 1.0));
  p.bias = &store.add(prefix + ".bias", Tensor::zeros({d}));
  p.eps = eps;
  return p;
}

Tensor layer_norm(const ForwardContext& ctx, const Tensor& x, const LayerNormParams& p) {
  const std::size_t d = p.gain->value.numel();
  if (x.rank() == 0 || x.shape().back() != d) {
    throw ShapeError("layer_norm: input " + shape_string(x.shape()) + " does not end in d=" +
                     std::to_string(d));
  }
  return ops::layer_norm(x, ctx.bind(*p.gain), ctx.bind(*p.bias), p.eps);
}

LinearParams make_linear(ParameterStore& store, const std::string& prefix, std::size_t in,
                         std::size_t out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> w(in * out);
  for (auto& v : w) v = u(rng);
  LinearParams p;
  p.weight = &store.add(prefix + ".weight", Tensor({in, out}, std::move(w)));
  p.bias = &store.add(prefix + ".bias", Tensor::zeros({out}));
  return p;
}

Tensor linear(const ForwardContext& ctx, const Tensor& x, const LinearParams& p) {
  const auto& ws = p.weight->value.shape();
  if (x.rank() == 0 || x.shape().back() != ws[0]) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(ws));
  }
  const std::size_t rows = x.numel() / ws[0];
  Tensor flat = ops::reshape(x, {rows, ws[0]});
  Tensor y = ops::add_row(ops::matmul(flat, ctx.bind(*p.weight)), ctx.bind(*p.bias));
  Shape out = x.shape();
  out.back() = ws[1];
  return ops::reshape(y, std::move(out));
}

void AttentionConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ConfigError("attention: heads (" + std::to_string(heads) + ") must divide d_model (" +
                      std::to_string(d_model) + ")");
  }
}

AttentionParams make_attention(ParameterStore& store, const std::string& prefix,
                               const AttentionConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  AttentionParams p;
  p.query = make_linear(store, prefix + ".query", cfg.d_model, cfg.d_model, rng);
  p.key = make_linear(store, prefix + ".key", cfg.d_model, cfg.d_model, rng);
  p.value = make_linear(store, prefix + ".value", cfg.d_model, cfg.d_model, rng);
  p.output = make_linear(store, prefix + ".output", cfg.d_model, cfg.d_model, rng);
  return p;
}

Tensor attention_mask(std::size_t batch, std::size_t tq, const TokenBatch* keys, bool causal) {
  const std::size_t tk = keys ? keys->length : tq;
  if (keys && keys->batch != batch) {
    throw ShapeError("attention_mask: key batch " + std::to_string(keys->batch) + " vs " +
                     std::to_string(batch));
  }
  if (causal && tk != tq) throw ShapeError("attention_mask: causal mask needs tq == tk");
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> m(batch * tq * tk, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t j = 0; j < tk; ++j) {
        const bool blocked = (causal && j > i) || (keys && keys->is_pad(b, j));
        if (blocked) m[(b * tq + i) * tk + j] = ninf;
      }
  return Tensor({batch, tq, tk}, std::move(m));
}

namespace {

// [b, t, d] -> [b * h, t, d_k]
Tensor split_heads(const Tensor& x, std::size_t h) {
  const std::size_t b = x.dim(0), t = x.dim(1), dk = x.dim(2) / h;
  Tensor y = ops::reshape(x, {b, t, h, dk});
  y = ops::transpose(y, 1, 2);
  return ops::reshape(y, {b * h, t, dk});
}

// [b * h, t, d_k] -> [b, t, h * d_k]
Tensor merge_heads(const Tensor& x, std::size_t b, std::size_t h) {
  const std::size_t t = x.dim(1), dk = x.dim(2);
  Tensor y = ops::reshape(x, {b, h, t, dk});
  y = ops::transpose(y, 1, 2);
  return ops::reshape(y, {b, t, h * dk});
}

Tensor as_batched(const Tensor& x) {
  if (x.rank() == 3) return x;
  if (x.rank() == 2) return ops::reshape(x, {1, x.dim(0), x.dim(1)});
  throw ShapeError("attention: expected [t, d] or [b, t, d], got " + shape_string(x.shape()));
}

}  // namespace

AttentionOutput multi_head_attention(ForwardContext& ctx, const Tensor& query, const Tensor& key,
                                     const Tensor& value, const Tensor* mask,
                                     const AttentionConfig& cfg, const AttentionParams& p,
                                     double attention_dropout) {
  cfg.validate();
  const Tensor q3 = as_batched(query), k3 = as_batched(key), v3 = as_batched(value);
  const std::size_t b = q3.dim(0), tq = q3.dim(1), tk = k3.dim(1), h = cfg.heads;
  if (q3.dim(2) != cfg.d_model || k3.dim(2) != cfg.d_model || v3.shape() != k3.shape() ||
      k3.dim(0) != b) {
    throw ShapeError("attention: query " + shape_string(query.shape()) + ", key " +
                     shape_string(key.shape()) + ", value " + shape_string(value.shape()) +
                     " incompatible with d_model " + std::to_string(cfg.d_model));
  }

  Tensor q = split_heads(linear(ctx, q3, p.query), h);
  Tensor k = split_heads(linear(ctx, k3, p.key), h);
  Tensor v = split_heads(linear(ctx, v3, p.value), h);

  Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)),
                             1.0 / std::sqrt(static_cast<double>(cfg.d_k())));
  if (mask) {
    if (mask->shape() != Shape{b, tq, tk}) {
      throw ShapeError("attention: mask " + shape_string(mask->shape()) + " does not match [" +
                       std::to_string(b) + ", " + std::to_string(tq) + ", " + std::to_string(tk) + "]");
    }
    std::vector<double> expanded(b * h * tq * tk);
    auto src = mask->data();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < h; ++j)
        std::copy_n(src.begin() + i * tq * tk, tq * tk, expanded.begin() + (i * h + j) * tq * tk);
    scores = ops::add(scores, Tensor({b * h, tq, tk}, std::move(expanded)));
  }
  Tensor weights = ops::softmax(scores);
  Tensor attended = ops::matmul(ctx.dropout(weights, attention_dropout), v);
  Tensor out = linear(ctx, merge_heads(attended, b, h), p.output);
  if (query.rank() == 2) out = ops::reshape(out, {tq, cfg.d_model});
  return {out, weights};
}

FeedForwardParams make_feed_forward(ParameterStore& store, const std::string& prefix,
                                    std::size_t d_model, std::size_t d_ff, std::mt19937_64& rng) {
  FeedForwardParams p;
  p.inner = make_linear(store, prefix + ".inner", d_model, d_ff, rng);
  p.outer = make_linear(store, prefix + ".outer", d_ff, d_model, rng);
  return p;
}

Tensor feed_forward(ForwardContext& ctx, const Tensor& x, const FeedForwardParams& p,
                    double inner_dropout) {
  Tensor hidden = ops::relu(linear(ctx, x, p.inner));
  return linear(ctx, ctx.dropout(hidden, inner_dropout), p.outer);
}

EmbeddingParams make_embedding(ParameterStore& store, const std::string& prefix,
                               std::size_t vocab, std::size_t d_model, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(d_model)));
  std::vector<double> t(vocab * d_model);
  for (auto& v : t) v = n(rng);
  EmbeddingParams p;
  p.table = &store.add(prefix + ".table", Tensor({vocab, d_model}, std::move(t)));
  p.d_model = d_model;
  return p;
}

Tensor sinusoidal_positions(std::size_t length, std::size_t d_model) {
  std::vector<double> pe(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double pair = static_cast<double>(i - i % 2);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, pair / static_cast<double>(d_model));
      pe[pos * d_model + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({length, d_model}, std::move(pe));
}

Tensor embed(const ForwardContext& ctx, const TokenBatch& tokens, const EmbeddingParams& p) {
  const std::size_t d = p.d_model;
  Tensor rows = ops::gather_rows(ctx.bind(*p.table), tokens.ids);
  rows = ops::scale(rows, std::sqrt(static_cast<double>(d)));
  const Tensor pe = sinusoidal_positions(tokens.length, d);
  std::vector<double> pos(tokens.batch * tokens.length * d);
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    std::copy(pe.data().begin(), pe.data().end(), pos.begin() + b * tokens.length * d);
  }
  Tensor out = ops::add(rows, Tensor({tokens.batch * tokens.length, d}, std::move(pos)));
  return ops::reshape(out, {tokens.batch, tokens.length, d});
}

Tensor embed(const ForwardContext& ctx, std::span<const int> tokens, const EmbeddingParams& p) {
  TokenBatch b;
  b.batch = 1;
  b.length = tokens.size();
  b.ids.assign(tokens.begin(), tokens.end());
  b.pad_id = -1;
  Tensor out = embed(ctx, b, p);
  return ops::reshape(out, {tokens.size(), p.d_model});
}

void SmoothingConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("label smoothing must lie in [0, 1)");
  if (pad_id < 0 || static_cast<std::size_t>(pad_id) >= vocab_size) {
    throw ConfigError("pad id must be smaller than the vocabulary size");
  }
}

LossResult label_smoothed_cross_entropy(const Tensor& logits, std::span<const int> targets,
                                        const SmoothingConfig& cfg) {
  cfg.validate();
  const std::size_t v = cfg.vocab_size;
  if (logits.rank() == 0 || logits.shape().back() != v) {
    throw ShapeError("loss: logits " + shape_string(logits.shape()) + " vs vocabulary " +
                     std::to_string(v));
  }
  const std::size_t n = logits.numel() / v;
  if (targets.size() != n) {
    throw ShapeError("loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                     " logit rows");
  }
  std::vector<double> q(n * v, 0.0);
  std::size_t tokens = 0;
  const double off = cfg.epsilon / static_cast<double>(v);
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t == cfg.pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ShapeError("loss: target id " + std::to_string(t) + " out of range");
    }
    ++tokens;
    for (std::size_t j = 0; j < v; ++j) q[i * v + j] = off;
    q[i * v + static_cast<std::size_t>(t)] += 1.0 - cfg.epsilon;
  }
  if (tokens == 0) throw Error("loss: batch contains only padding");
  Tensor logp = ops::log_softmax(ops::reshape(logits, {n, v}));
  Tensor total = ops::sum(ops::mul(Tensor({n, v}, std::move(q)), logp));
  return {ops::scale(total, -1.0 / static_cast<double>(tokens)), tokens};
}

Accuracy token_accuracy(const Tensor& logits, std::span<const int> targets, int pad_id) {
  const std::size_t v = logits.shape().back();
  const std::size_t n = logits.numel() / v;
  if (targets.size() != n) throw ShapeError("token_accuracy: target count mismatch");
  Accuracy acc;
  auto x = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == pad_id) continue;
    const auto row = x.subspan(i * v, v);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    ++acc.total;
    acc.correct += best == targets[i];
  }
  return acc;
}

}  // namespace dlcl::nn
