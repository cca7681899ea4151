#include "dlcl/model.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "dlcl/error.hpp"
#include "dlcl/graph.hpp"
#include "dlcl/ops.hpp"

namespace dlcl::model {

std::string to_string(NormPlacement norm) {
  return norm == NormPlacement::PreNorm ? "pre" : "post";
}

std::string to_string(AggregationMode mode) {
  switch (mode) {
    case AggregationMode::Standard: return "standard";
    case AggregationMode::DlclLearned: return "dlcl";
    case AggregationMode::DlclAllOne: return "dlcl_all_one";
    case AggregationMode::DlclAverage: return "dlcl_average";
    case AggregationMode::DlclAverageNoLN: return "dlcl_average_no_ln";
    case AggregationMode::ResidualPassthrough: return "residual_passthrough";
  }
  return "unknown";
}

NormPlacement parse_norm(const std::string& text) {
  if (text == "pre" || text == "prenorm" || text == "pre-norm") return NormPlacement::PreNorm;
  if (text == "post" || text == "postnorm" || text == "post-norm") return NormPlacement::PostNorm;
  throw ConfigError("unknown norm placement '" + text + "' (expected pre or post)");
}

AggregationMode parse_aggregation(const std::string& text) {
  for (auto m : {AggregationMode::Standard, AggregationMode::DlclLearned, AggregationMode::DlclAllOne,
                 AggregationMode::DlclAverage, AggregationMode::DlclAverageNoLN,
                 AggregationMode::ResidualPassthrough}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown aggregation mode '" + text + "'");
}

void ModelConfig::validate() const {
  if (encoder_depth < 1 || decoder_depth < 1) throw ConfigError("encoder and decoder depth must be >= 1");
  attention().validate();
  if (d_ff == 0) throw ConfigError("d_ff must be positive");
  if (src_vocab < 4 || tgt_vocab < 4) throw ConfigError("vocabularies need at least 4 ids");
  if (pad_id < 0 || static_cast<std::size_t>(pad_id) >= std::min(src_vocab, tgt_vocab)) {
    throw ConfigError("pad id outside vocabulary");
  }
  for (double r : {residual_dropout, attention_dropout, ffn_dropout}) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
  }
  if (ln_eps <= 0.0) throw ConfigError("ln_eps must be positive");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "encoder_depth=" << encoder_depth << ";decoder_depth=" << decoder_depth
     << ";d_model=" << d_model << ";d_ff=" << d_ff << ";heads=" << heads
     << ";norm=" << to_string(norm) << ";aggregation=" << to_string(aggregation)
     << ";src_vocab=" << src_vocab << ";tgt_vocab=" << tgt_vocab << ";pad_id=" << pad_id;
  os.precision(17);
  os << ";ln_eps=" << ln_eps;
  return os.str();
}

void apply_default_dropout(ModelConfig& cfg) {
  cfg.residual_dropout = 0.1;
  const double inner = cfg.norm == NormPlacement::PreNorm ? 0.1 : 0.0;
  cfg.attention_dropout = inner;
  cfg.ffn_dropout = inner;
}

std::size_t DlclWeights::scalar_count() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.size();
  return n;
}

std::vector<std::vector<double>> DlclWeights::values() const {
  std::vector<std::vector<double>> out;
  for (const auto& r : rows) {
    auto& row = out.emplace_back();
    for (const Parameter* p : r) row.push_back(p->value[0]);
  }
  return out;
}

WeightPreset make_weight_preset(AggregationMode mode, std::size_t depth) {
  if (depth < 1) throw ConfigError("weight preset needs depth >= 1");
  WeightPreset p;
  if (mode == AggregationMode::Standard) {
    p.uses_norm = false;
    return p;
  }
  for (std::size_t r = 1; r <= depth; ++r) {
    std::vector<double> row(r);
    for (std::size_t k = 0; k < r; ++k) {
      switch (mode) {
        case AggregationMode::DlclAllOne: row[k] = 1.0; break;
        case AggregationMode::ResidualPassthrough: row[k] = (k + 1 == r) ? 1.0 : 0.0; break;
        default: row[k] = 1.0 / static_cast<double>(r); break;
      }
    }
    p.rows.push_back(std::move(row));
  }
  p.trainable = mode == AggregationMode::DlclLearned;
  p.uses_norm = !(mode == AggregationMode::DlclAverageNoLN ||
                  mode == AggregationMode::ResidualPassthrough);
  return p;
}

Tensor residual_unit(nn::ForwardContext& ctx, const Tensor& x, const Sublayer& sublayer,
                     NormPlacement norm, const nn::LayerNormParams& ln, double dropout,
                     ResidualTrace* trace) {
  if (norm == NormPlacement::PostNorm) {
    Tensor branch = ctx.dropout(sublayer(x), dropout);
    Tensor y = ops::add(x, branch);
    if (trace) *trace = {branch, y};
    return nn::layer_norm(ctx, y, ln);
  }
  Tensor branch = ctx.dropout(sublayer(nn::layer_norm(ctx, x, ln)), dropout);
  Tensor y = ops::add(x, branch);
  if (trace) *trace = {branch, y};
  return y;
}

namespace {

void check_row(std::span<const Tensor> outputs, std::size_t weights) {
  if (outputs.empty()) throw ShapeError("aggregation: no layer outputs");
  if (weights != outputs.size()) {
    throw ShapeError("aggregation: weight row has " + std::to_string(weights) + " entries for " +
                     std::to_string(outputs.size()) + " layer outputs");
  }
  for (const auto& y : outputs) {
    if (y.shape() != outputs[0].shape()) {
      throw ShapeError("aggregation: output shapes differ " + shape_string(y.shape()) + " vs " +
                       shape_string(outputs[0].shape()));
    }
  }
}

}  // namespace

Tensor weighted_sum(std::span<const Tensor> outputs, std::span<const Tensor> weights) {
  check_row(outputs, weights.size());
  Tensor acc = ops::scale(outputs[0], weights[0]);
  for (std::size_t k = 1; k < outputs.size(); ++k) {
    acc = ops::add(acc, ops::scale(outputs[k], weights[k]));
  }
  return acc;
}

Tensor dlcl_combine_pre(const nn::ForwardContext& ctx, std::span<const Tensor> outputs,
                        std::span<const Tensor> weights, std::span<const nn::LayerNormParams> lns) {
  check_row(outputs, weights.size());
  if (lns.size() < outputs.size()) throw ShapeError("aggregation: missing layer norms");
  std::vector<Tensor> normed;
  normed.reserve(outputs.size());
  for (std::size_t k = 0; k < outputs.size(); ++k) normed.push_back(nn::layer_norm(ctx, outputs[k], lns[k]));
  return weighted_sum(normed, weights);
}

Tensor dlcl_combine_post(const nn::ForwardContext& ctx, std::span<const Tensor> outputs,
                         std::span<const Tensor> weights, const nn::LayerNormParams& ln) {
  return nn::layer_norm(ctx, weighted_sum(outputs, weights), ln);
}

LayerAggregator::LayerAggregator(ParameterStore& store, const std::string& prefix,
                                 AggregationMode mode, NormPlacement norm, std::size_t depth,
                                 std::size_t d_model, double eps)
    : mode_(mode), norm_(norm) {
  const WeightPreset preset = make_weight_preset(mode, depth);
  uses_norm_ = preset.uses_norm;
  for (std::size_t r = 0; r < preset.rows.size(); ++r) {
    auto& row = weights_.rows.emplace_back();
    for (std::size_t k = 0; k < preset.rows[r].size(); ++k) {
      const std::string name =
          prefix + ".row" + std::to_string(r + 1) + ".w" + std::to_string(k);
      row.push_back(&store.add(name, Tensor::scalar(preset.rows[r][k]), preset.trainable));
    }
  }
  if (!uses_norm_) return;
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string name = norm == NormPlacement::PreNorm
                                 ? prefix + ".ln" + std::to_string(i)
                                 : prefix + ".row" + std::to_string(i + 1) + ".ln";
    lns_.push_back(nn::make_layer_norm(store, name, d_model, eps));
  }
}

Tensor LayerAggregator::input_for(nn::ForwardContext& ctx, std::span<const Tensor> outputs) const {
  if (mode_ == AggregationMode::Standard) return outputs.back();
  const std::size_t row = outputs.size() - 1;
  if (row >= weights_.rows.size()) throw ShapeError("aggregation: more outputs than rows");
  std::vector<Tensor> w;
  for (Parameter* p : weights_.rows[row]) w.push_back(ctx.bind(*p));
  if (!uses_norm_) return weighted_sum(outputs, w);
  if (norm_ == NormPlacement::PreNorm) return dlcl_combine_pre(ctx, outputs, w, lns_);
  return dlcl_combine_post(ctx, outputs, w, lns_[row]);
}

Transformer::Transformer(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const auto att = cfg_.attention();
  const std::size_t d = cfg_.d_model;

  src_embedding_ = nn::make_embedding(store_, "encoder.embedding", cfg_.src_vocab, d, rng);
  for (std::size_t l = 0; l < cfg_.encoder_depth; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l);
    EncoderLayer layer;
    layer.attention_ln = nn::make_layer_norm(store_, p + ".self_attn_ln", d, cfg_.ln_eps);
    layer.self_attention = nn::make_attention(store_, p + ".self_attn", att, rng);
    layer.ffn_ln = nn::make_layer_norm(store_, p + ".ffn_ln", d, cfg_.ln_eps);
    layer.ffn = nn::make_feed_forward(store_, p + ".ffn", d, cfg_.d_ff, rng);
    encoder_.push_back(layer);
  }
  encoder_agg_.emplace(store_, "encoder.dlcl", cfg_.aggregation, cfg_.norm, cfg_.encoder_depth, d,
                       cfg_.ln_eps);
  if (cfg_.norm == NormPlacement::PreNorm) {
    encoder_top_ln_ = nn::make_layer_norm(store_, "encoder.top_ln", d, cfg_.ln_eps);
  }

  tgt_embedding_ = nn::make_embedding(store_, "decoder.embedding", cfg_.tgt_vocab, d, rng);
  for (std::size_t l = 0; l < cfg_.decoder_depth; ++l) {
    const std::string p = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.self_ln = nn::make_layer_norm(store_, p + ".self_attn_ln", d, cfg_.ln_eps);
    layer.self_attention = nn::make_attention(store_, p + ".self_attn", att, rng);
    layer.cross_ln = nn::make_layer_norm(store_, p + ".cross_attn_ln", d, cfg_.ln_eps);
    layer.cross_attention = nn::make_attention(store_, p + ".cross_attn", att, rng);
    layer.ffn_ln = nn::make_layer_norm(store_, p + ".ffn_ln", d, cfg_.ln_eps);
    layer.ffn = nn::make_feed_forward(store_, p + ".ffn", d, cfg_.d_ff, rng);
    decoder_.push_back(layer);
  }
  decoder_agg_.emplace(store_, "decoder.dlcl", cfg_.aggregation, cfg_.norm, cfg_.decoder_depth, d,
                       cfg_.ln_eps);
  if (cfg_.norm == NormPlacement::PreNorm) {
    decoder_top_ln_ = nn::make_layer_norm(store_, "decoder.top_ln", d, cfg_.ln_eps);
  }
  output_projection_ = nn::make_linear(store_, "decoder.output", d, cfg_.tgt_vocab, rng);
}

Tensor Transformer::encoder_layer(nn::ForwardContext& ctx, const EncoderLayer& layer,
                                  const Tensor& x, const Tensor* mask) {
  const auto att = cfg_.attention();
  Tensor h = residual_unit(
      ctx, x,
      [&](const Tensor& t) {
        return nn::multi_head_attention(ctx, t, t, t, mask, att, layer.self_attention,
                                        cfg_.attention_dropout)
            .output;
      },
      cfg_.norm, layer.attention_ln, cfg_.residual_dropout);
  return residual_unit(
      ctx, h, [&](const Tensor& t) { return nn::feed_forward(ctx, t, layer.ffn, cfg_.ffn_dropout); },
      cfg_.norm, layer.ffn_ln, cfg_.residual_dropout);
}

EncoderTrace Transformer::encode(nn::ForwardContext& ctx, const nn::TokenBatch& src) {
  EncoderTrace trace;
  const Tensor mask = nn::attention_mask(src.batch, src.length, &src, false);
  trace.y.push_back(ctx.dropout(nn::embed(ctx, src, src_embedding_), cfg_.residual_dropout));
  for (const auto& layer : encoder_) {
    trace.x.push_back(encoder_agg_->input_for(ctx, trace.y));
    trace.y.push_back(encoder_layer(ctx, layer, trace.x.back(), &mask));
  }
  trace.output = encoder_top_ln_ ? nn::layer_norm(ctx, trace.y.back(), *encoder_top_ln_)
                                 : trace.y.back();
  return trace;
}

Tensor Transformer::decode(nn::ForwardContext& ctx, const nn::TokenBatch& tgt_in,
                           const Tensor& memory, const nn::TokenBatch& src) {
  const auto att = cfg_.attention();
  const Tensor self_mask = nn::attention_mask(tgt_in.batch, tgt_in.length, &tgt_in, true);
  const Tensor cross_mask = nn::attention_mask(tgt_in.batch, tgt_in.length, &src, false);
  std::vector<Tensor> z;
  z.push_back(ctx.dropout(nn::embed(ctx, tgt_in, tgt_embedding_), cfg_.residual_dropout));
  for (const auto& layer : decoder_) {
    Tensor x = decoder_agg_->input_for(ctx, z);
    x = residual_unit(
        ctx, x,
        [&](const Tensor& t) {
          return nn::multi_head_attention(ctx, t, t, t, &self_mask, att, layer.self_attention,
                                          cfg_.attention_dropout)
              .output;
        },
        cfg_.norm, layer.self_ln, cfg_.residual_dropout);
    x = residual_unit(
        ctx, x,
        [&](const Tensor& t) {
          return nn::multi_head_attention(ctx, t, memory, memory, &cross_mask, att,
                                          layer.cross_attention, cfg_.attention_dropout)
              .output;
        },
        cfg_.norm, layer.cross_ln, cfg_.residual_dropout);
    x = residual_unit(
        ctx, x, [&](const Tensor& t) { return nn::feed_forward(ctx, t, layer.ffn, cfg_.ffn_dropout); },
        cfg_.norm, layer.ffn_ln, cfg_.residual_dropout);
    z.push_back(x);
  }
  Tensor top = decoder_top_ln_ ? nn::layer_norm(ctx, z.back(), *decoder_top_ln_) : z.back();
  return nn::linear(ctx, top, output_projection_);
}

ForwardResult Transformer::forward(nn::ForwardContext& ctx, const nn::TokenBatch& src,
                                   const nn::TokenBatch& tgt_in) {
  if (src.batch != tgt_in.batch) throw ShapeError("forward: source and target batch sizes differ");
  ForwardResult r;
  r.encoder = encode(ctx, src);
  r.logits = decode(ctx, tgt_in, r.encoder.output, src);
  return r;
}

Tensor Transformer::encoder_sublayer(nn::ForwardContext& ctx, std::size_t unit, const Tensor& x) {
  if (unit >= 2 * encoder_.size()) throw Error("encoder_sublayer: unit out of range");
  const auto& layer = encoder_[unit / 2];
  if (unit % 2 == 0) {
    return nn::multi_head_attention(ctx, x, x, x, nullptr, cfg_.attention(), layer.self_attention,
                                    cfg_.attention_dropout)
        .output;
  }
  return nn::feed_forward(ctx, x, layer.ffn, cfg_.ffn_dropout);
}

const nn::LayerNormParams& Transformer::encoder_unit_norm(std::size_t unit) const {
  if (unit >= 2 * encoder_.size()) throw Error("encoder_unit_norm: unit out of range");
  const auto& layer = encoder_[unit / 2];
  return unit % 2 == 0 ? layer.attention_ln : layer.ffn_ln;
}

const nn::LayerNormParams* Transformer::encoder_top_norm() const {
  return encoder_top_ln_ ? &*encoder_top_ln_ : nullptr;
}

const LayerAggregator* Transformer::encoder_aggregator() const { return &*encoder_agg_; }
const LayerAggregator* Transformer::decoder_aggregator() const { return &*decoder_agg_; }

namespace {

void zero(const nn::LinearParams& p) {
  p.weight->value = Tensor::zeros(p.weight->value.shape());
  p.bias->value = Tensor::zeros(p.bias->value.shape());
}

}  // namespace

void Transformer::zero_residual_projections() {
  for (const auto& l : encoder_) {
    zero(l.self_attention.output);
    zero(l.ffn.outer);
  }
  for (const auto& l : decoder_) {
    zero(l.self_attention.output);
    zero(l.cross_attention.output);
    zero(l.ffn.outer);
  }
}

void Transformer::zero_cross_attention() {
  for (const auto& l : decoder_) zero(l.cross_attention.output);
}

}  // namespace dlcl::model
