#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlcl/parameter.hpp"
#include "dlcl/tensor.hpp"

namespace dlcl::nn {

// Per-forward state: train/eval switch and the dropout stream.
class ForwardContext {
 public:
  explicit ForwardContext(bool train = false, std::uint64_t dropout_seed = 0)
      : train_(train), rng_(dropout_seed) {}

  bool training() const { return train_; }

  // Tracked leaf when a graph is active, plain value otherwise.
  Tensor bind(Parameter& p) const;

  // Inverted dropout; identity in eval mode or when rate == 0.
  Tensor dropout(const Tensor& x, double rate);

 private:
  bool train_;
  std::mt19937_64 rng_;
};

// Padded id matrix [batch, length], row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;
  int pad_id = 0;

  int at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
  bool is_pad(std::size_t b, std::size_t t) const { return at(b, t) == pad_id; }
  std::size_t non_pad_count() const;
  static TokenBatch from_rows(const std::vector<std::vector<int>>& rows, int pad_id);
};

struct LayerNormParams {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
  double eps = 1e-6;
};

LayerNormParams make_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t d,
                                double eps = 1e-6);
Tensor layer_norm(const ForwardContext& ctx, const Tensor& x, const LayerNormParams& p);

struct LinearParams {
  Parameter* weight = nullptr;  // [in, out]
  Parameter* bias = nullptr;    // [out]
};

// Xavier-uniform weight, zero bias.
LinearParams make_linear(ParameterStore& store, const std::string& prefix, std::size_t in,
                         std::size_t out, std::mt19937_64& rng);
Tensor linear(const ForwardContext& ctx, const Tensor& x, const LinearParams& p);

struct AttentionConfig {
  std::size_t d_model = 0;
  std::size_t heads = 1;

  std::size_t d_k() const { return d_model / heads; }
  void validate() const;
};

struct AttentionParams {
  LinearParams query, key, value, output;
};

AttentionParams make_attention(ParameterStore& store, const std::string& prefix,
                               const AttentionConfig& cfg, std::mt19937_64& rng);

// Additive masks of shape [batch, tq, tk]: 0 where attention is allowed,
// -inf where it is forbidden.
Tensor attention_mask(std::size_t batch, std::size_t tq, const TokenBatch* keys, bool causal);

struct AttentionOutput {
  Tensor output;   // same rank as the query input
  Tensor weights;  // [batch * heads, tq, tk]
};

// query: [b, tq, d] (or [tq, d]); key/value: [b, tk, d] (or [tk, d]).
AttentionOutput multi_head_attention(ForwardContext& ctx, const Tensor& query, const Tensor& key,
                                     const Tensor& value, const Tensor* mask,
                                     const AttentionConfig& cfg, const AttentionParams& p,
                                     double attention_dropout = 0.0);

struct FeedForwardParams {
  LinearParams inner, outer;
};

FeedForwardParams make_feed_forward(ParameterStore& store, const std::string& prefix,
                                    std::size_t d_model, std::size_t d_ff, std::mt19937_64& rng);
// linear -> relu -> (dropout) -> linear, row-wise.
Tensor feed_forward(ForwardContext& ctx, const Tensor& x, const FeedForwardParams& p,
                    double inner_dropout = 0.0);

struct EmbeddingParams {
  Parameter* table = nullptr;  // [vocab, d]
  std::size_t d_model = 0;
};

// Table initialized from normal(0, d^-1/2).
EmbeddingParams make_embedding(ParameterStore& store, const std::string& prefix,
                               std::size_t vocab, std::size_t d_model, std::mt19937_64& rng);

// [length, d] sinusoidal position table: sin on even, cos on odd columns.
Tensor sinusoidal_positions(std::size_t length, std::size_t d_model);

// sqrt(d) * table[id] + position, for every token; returns [batch, length, d].
Tensor embed(const ForwardContext& ctx, const TokenBatch& tokens, const EmbeddingParams& p);
// Single unpadded sequence; returns [t, d].
Tensor embed(const ForwardContext& ctx, std::span<const int> tokens, const EmbeddingParams& p);

struct SmoothingConfig {
  double epsilon = 0.1;
  std::size_t vocab_size = 0;
  int pad_id = 0;

  void validate() const;
};

struct LossResult {
  Tensor loss;  // mean over non-pad tokens
  std::size_t tokens = 0;
};

// logits: [n, V] or [b, t, V]; targets: one id per logits row.
LossResult label_smoothed_cross_entropy(const Tensor& logits, std::span<const int> targets,
                                        const SmoothingConfig& cfg);

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

Accuracy token_accuracy(const Tensor& logits, std::span<const int> targets, int pad_id);

}  // namespace dlcl::nn
