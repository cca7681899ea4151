#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlcl/nn.hpp"
#include "dlcl/parameter.hpp"
#include "dlcl/tensor.hpp"

namespace dlcl::model {

enum class NormPlacement { PostNorm, PreNorm };

enum class AggregationMode {
  Standard,             // x_{l+1} = y_l
  DlclLearned,          // trainable weights, aggregation LN
  DlclAllOne,           // frozen 1
  DlclAverage,          // frozen 1/(l+1)
  DlclAverageNoLN,      // frozen 1/(l+1), aggregation LN removed
  ResidualPassthrough,  // frozen (0, ..., 0, 1), aggregation LN bypassed
};

std::string to_string(NormPlacement norm);
std::string to_string(AggregationMode mode);
NormPlacement parse_norm(const std::string& text);
AggregationMode parse_aggregation(const std::string& text);

struct ModelConfig {
  std::size_t encoder_depth = 6;
  std::size_t decoder_depth = 1;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t heads = 4;
  NormPlacement norm = NormPlacement::PreNorm;
  AggregationMode aggregation = AggregationMode::Standard;
  std::size_t src_vocab = 16;
  std::size_t tgt_vocab = 16;
  double residual_dropout = 0.1;
  double attention_dropout = 0.1;
  double ffn_dropout = 0.1;
  double ln_eps = 1e-6;
  int pad_id = 0;

  void validate() const;
  // Stable textual form of every architecture field; the checkpoint hash
  // is computed over it.
  std::string canonical() const;
  nn::AttentionConfig attention() const { return {d_model, heads}; }
};

// Attention/FFN dropout defaults: 0.1 for pre-norm, off for post-norm.
void apply_default_dropout(ModelConfig& cfg);

// Ragged lower-triangular weight table; rows[l] feeds layer l+1 and holds
// l+1 scalars, one per earlier output y_0..y_l.
struct DlclWeights {
  std::vector<std::vector<Parameter*>> rows;

  std::size_t scalar_count() const;
  std::vector<std::vector<double>> values() const;
};

struct WeightPreset {
  std::vector<std::vector<double>> rows;
  bool trainable = false;
  bool uses_norm = true;  // aggregation LN present
};

WeightPreset make_weight_preset(AggregationMode mode, std::size_t depth);

// Per-unit values recorded for gradient-flow analysis.
struct ResidualTrace {
  Tensor branch;  // F(x) (post-norm) or F(LN(x)) (pre-norm)
  Tensor sum;     // x + branch, before any post-norm LN
};

using Sublayer = std::function<Tensor(const Tensor&)>;

// PostNorm: LN(x + F(x)). PreNorm: x + F(LN(x)).
Tensor residual_unit(nn::ForwardContext& ctx, const Tensor& x, const Sublayer& sublayer,
                     NormPlacement norm, const nn::LayerNormParams& ln, double dropout = 0.0,
                     ResidualTrace* trace = nullptr);

// sum_k w_k * LN_k(y_k)
Tensor dlcl_combine_pre(const nn::ForwardContext& ctx, std::span<const Tensor> outputs,
                        std::span<const Tensor> weights, std::span<const nn::LayerNormParams> lns);
// LN(sum_k w_k * y_k)
Tensor dlcl_combine_post(const nn::ForwardContext& ctx, std::span<const Tensor> outputs,
                         std::span<const Tensor> weights, const nn::LayerNormParams& ln);
// sum_k w_k * y_k
Tensor weighted_sum(std::span<const Tensor> outputs, std::span<const Tensor> weights);

// Builds the input of layer l+1 from y_0..y_l for one stack.
class LayerAggregator {
 public:
  LayerAggregator(ParameterStore& store, const std::string& prefix, AggregationMode mode,
                  NormPlacement norm, std::size_t depth, std::size_t d_model, double eps);

  Tensor input_for(nn::ForwardContext& ctx, std::span<const Tensor> outputs) const;

  AggregationMode mode() const { return mode_; }
  const DlclWeights& weights() const { return weights_; }

 private:
  AggregationMode mode_;
  NormPlacement norm_;
  bool uses_norm_ = false;
  DlclWeights weights_;
  std::vector<nn::LayerNormParams> lns_;  // per producer (pre) or per row (post)
};

struct EncoderLayer {
  nn::LayerNormParams attention_ln, ffn_ln;
  nn::AttentionParams self_attention;
  nn::FeedForwardParams ffn;
};

struct DecoderLayer {
  nn::LayerNormParams self_ln, cross_ln, ffn_ln;
  nn::AttentionParams self_attention, cross_attention;
  nn::FeedForwardParams ffn;
};

struct EncoderTrace {
  Tensor output;           // [b, t, d] after the top LN for pre-norm
  std::vector<Tensor> y;   // y_0 (embedding) .. y_L
  std::vector<Tensor> x;   // x_1 .. x_L (layer inputs)
};

struct ForwardResult {
  EncoderTrace encoder;
  Tensor logits;  // [b, t_tgt, vocab]
};

class Transformer {
 public:
  Transformer(ModelConfig cfg, std::uint64_t seed);
  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  EncoderTrace encode(nn::ForwardContext& ctx, const nn::TokenBatch& src);
  Tensor decode(nn::ForwardContext& ctx, const nn::TokenBatch& tgt_in, const Tensor& memory,
                const nn::TokenBatch& src);
  ForwardResult forward(nn::ForwardContext& ctx, const nn::TokenBatch& src,
                        const nn::TokenBatch& tgt_in);

  // Sub-layer F of encoder residual unit `unit` (2*layer for attention,
  // 2*layer+1 for the FFN) applied to an unpadded [t, d] input.
  Tensor encoder_sublayer(nn::ForwardContext& ctx, std::size_t unit, const Tensor& x);
  const nn::LayerNormParams& encoder_unit_norm(std::size_t unit) const;
  const nn::LayerNormParams* encoder_top_norm() const;

  const LayerAggregator* encoder_aggregator() const;
  const LayerAggregator* decoder_aggregator() const;

  // Zero the output projections of every residual branch.
  void zero_residual_projections();
  void zero_cross_attention();

 private:
  Tensor encoder_layer(nn::ForwardContext& ctx, const EncoderLayer& layer, const Tensor& x,
                       const Tensor* mask);

  ModelConfig cfg_;
  ParameterStore store_;
  nn::EmbeddingParams src_embedding_, tgt_embedding_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  std::optional<LayerAggregator> encoder_agg_, decoder_agg_;
  std::optional<nn::LayerNormParams> encoder_top_ln_, decoder_top_ln_;
  nn::LinearParams output_projection_;
};

}  // namespace dlcl::model
