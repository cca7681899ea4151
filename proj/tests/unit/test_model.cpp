#include <cmath>
#include <random>

#include "doctest.h"
#include "dlcl/error.hpp"
#include "dlcl/graph.hpp"
#include "dlcl/model.hpp"
#include "dlcl/ops.hpp"
#include "dlcl/tasks.hpp"
#include "fd_cases.hpp"

using namespace dlcl;
using namespace dlcl::model;

namespace {

Tensor random_tensor(const Shape& s, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = n(rng);
  return Tensor(s, std::move(v));
}

Tensor logits_of(Transformer& m, const train::Batch& b) {
  nn::ForwardContext ctx(false);
  return m.forward(ctx, b.src, b.tgt_in).logits;
}

}  // namespace

TEST_CASE("enum names round trip") {
  for (auto n : {NormPlacement::PreNorm, NormPlacement::PostNorm}) CHECK(parse_norm(to_string(n)) == n);
  for (auto m : {AggregationMode::Standard, AggregationMode::DlclLearned, AggregationMode::DlclAllOne,
                 AggregationMode::DlclAverage, AggregationMode::DlclAverageNoLN,
                 AggregationMode::ResidualPassthrough}) {
    CHECK(parse_aggregation(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_norm("sideways"), ConfigError);
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.encoder_depth = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ModelConfig post;
  post.norm = NormPlacement::PostNorm;
  apply_default_dropout(post);
  CHECK(post.attention_dropout == 0.0);
  CHECK(post.residual_dropout == 0.1);
  ModelConfig pre;
  apply_default_dropout(pre);
  CHECK(pre.attention_dropout == 0.1);
  CHECK(pre.ffn_dropout == 0.1);
  CHECK(pre.canonical() != post.canonical());
}

TEST_CASE("residual unit examples") {
  ParameterStore store;
  auto ln = nn::make_layer_norm(store, "ln", 2);
  nn::ForwardContext ctx;
  Tensor x = Tensor::vector({1, -1});
  auto zero = [](const Tensor& t) { return ops::scale(t, 0.0); };
  auto ident = [](const Tensor& t) { return t; };

  CHECK(bit_equal(residual_unit(ctx, x, zero, NormPlacement::PostNorm, ln), nn::layer_norm(ctx, x, ln)));
  CHECK(bit_equal(residual_unit(ctx, Tensor::vector({0.3, 7}), zero, NormPlacement::PreNorm, ln),
                  Tensor::vector({0.3, 7})));
  Tensor y = residual_unit(ctx, x, ident, NormPlacement::PostNorm, ln);
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("aggregation combine examples") {
  ParameterStore store;
  std::mt19937_64 rng(11);
  std::vector<nn::LayerNormParams> lns;
  for (int i = 0; i < 3; ++i) lns.push_back(nn::make_layer_norm(store, "ln" + std::to_string(i), 4));
  for (auto& l : lns) {
    l.gain->value = random_tensor({4}, rng);
    l.bias->value = random_tensor({4}, rng);
  }
  nn::ForwardContext ctx;
  std::vector<Tensor> y{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
  const Tensor one[] = {Tensor::scalar(1)};

  CHECK(bit_equal(dlcl_combine_pre(ctx, std::span(y).first(1), one, std::span(lns).first(1)),
                  nn::layer_norm(ctx, y[0], lns[0])));
  const Tensor zeros[] = {Tensor::scalar(0), Tensor::scalar(0)};
  const Tensor zeroed = dlcl_combine_pre(ctx, std::span(y).first(2), zeros, std::span(lns).first(2));
  for (double v : zeroed.data()) CHECK(v == 0.0);
  const Tensor half[] = {Tensor::scalar(0.5), Tensor::scalar(0.5)};
  Tensor expect = ops::add(ops::scale(nn::layer_norm(ctx, y[0], lns[0]), 0.5),
                           ops::scale(nn::layer_norm(ctx, y[1], lns[1]), 0.5));
  CHECK(max_abs_diff(dlcl_combine_pre(ctx, std::span(y).first(2), half, std::span(lns).first(2)), expect) <= 1e-15);

  CHECK(bit_equal(dlcl_combine_post(ctx, std::span(y).first(1), one, lns[0]), nn::layer_norm(ctx, y[0], lns[0])));
  const std::vector<Tensor> same{y[0], y[0]};
  const Tensor cancel[] = {Tensor::scalar(1), Tensor::scalar(-1)};
  Tensor c = dlcl_combine_post(ctx, same, cancel, lns[1]);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(c[r * 4 + j] == lns[1].bias->value[j]);

  const Tensor w3[] = {Tensor::scalar(0.2), Tensor::scalar(-1.3), Tensor::scalar(0.7)};
  Tensor sum = ops::add(ops::add(ops::scale(y[0], Tensor::scalar(0.2)), ops::scale(y[1], Tensor::scalar(-1.3))),
                        ops::scale(y[2], Tensor::scalar(0.7)));
  CHECK(bit_equal(dlcl_combine_post(ctx, y, w3, lns[2]), nn::layer_norm(ctx, sum, lns[2])));

  CHECK_THROWS(dlcl_combine_pre(ctx, y, half, lns));
}

TEST_CASE("weight presets") {
  auto avg = make_weight_preset(AggregationMode::DlclAverage, 3);
  CHECK(avg.rows == std::vector<std::vector<double>>{{1}, {0.5, 0.5}, {1.0 / 3, 1.0 / 3, 1.0 / 3}});
  CHECK_FALSE(avg.trainable);
  CHECK(avg.uses_norm);
  auto pass = make_weight_preset(AggregationMode::ResidualPassthrough, 3);
  CHECK(pass.rows == std::vector<std::vector<double>>{{1}, {0, 1}, {0, 0, 1}});
  CHECK_FALSE(pass.uses_norm);
  auto ones = make_weight_preset(AggregationMode::DlclAllOne, 3);
  CHECK(ones.rows == std::vector<std::vector<double>>{{1}, {1, 1}, {1, 1, 1}});
  CHECK_FALSE(make_weight_preset(AggregationMode::DlclAverageNoLN, 3).uses_norm);
  auto learned = make_weight_preset(AggregationMode::DlclLearned, 3);
  CHECK(learned.trainable);
  CHECK(learned.rows == avg.rows);
}

TEST_CASE("aggregation weight count is L(L+1)/2") {
  for (std::size_t L : {1, 2, 5, 12}) {
    Transformer m(testing::tiny_config(NormPlacement::PreNorm, AggregationMode::DlclLearned, L, 4), 1);
    CHECK(m.encoder_aggregator()->weights().scalar_count() == L * (L + 1) / 2);
    std::size_t named = 0;
    for (const auto& p : m.parameters()) named += p->name.rfind("encoder.dlcl.row", 0) == 0 && p->name.find(".w") != std::string::npos;
    CHECK(named == L * (L + 1) / 2);
  }
}

TEST_CASE("trace lengths and pre-norm identity path") {
  for (std::size_t L : {1, 2, 7, 30}) {
    for (auto mode : {AggregationMode::Standard, AggregationMode::ResidualPassthrough}) {
      Transformer m(testing::tiny_config(NormPlacement::PreNorm, mode, L, 4), L);
      m.zero_residual_projections();
      auto src = nn::TokenBatch::from_rows({{3, 4, 5, 2}, {6, 2}}, 0);
      nn::ForwardContext ctx;
      auto trace = m.encode(ctx, src);
      CHECK(trace.y.size() == L + 1);
      CHECK(trace.x.size() == L);
      CHECK(bit_equal(trace.y.back(), trace.y.front()));
      CHECK(bit_equal(trace.output, nn::layer_norm(ctx, trace.y.front(), *m.encoder_top_norm())));
    }
  }
}

TEST_CASE("post-norm standard encoder matches hand-composed units") {
  Transformer m(testing::tiny_config(NormPlacement::PostNorm, AggregationMode::Standard, 2, 4), 3);
  const std::vector<int> ids{3, 7, 2};
  nn::ForwardContext ctx;
  auto trace = m.encode(ctx, nn::TokenBatch::from_rows({ids}, 0));
  Tensor x = ops::reshape(trace.y[0], {3, 4});
  for (std::size_t unit = 0; unit < 4; ++unit) {
    x = nn::layer_norm(ctx, ops::add(x, m.encoder_sublayer(ctx, unit, x)), m.encoder_unit_norm(unit));
  }
  CHECK(max_abs_diff(ops::reshape(trace.output, {3, 4}), x) <= 1e-12);
}

TEST_CASE("residual passthrough equals standard stacking") {
  for (auto norm : {NormPlacement::PreNorm, NormPlacement::PostNorm}) {
    for (std::size_t L : {2, 6}) {
      auto e = testing::passthrough_vs_standard(norm, L, 5);
      CAPTURE(L);
      CHECK(e.forward <= 1e-9);
      CHECK(e.gradient <= 1e-9);
    }
  }
}

TEST_CASE("decoder is causal") {
  Transformer m(testing::tiny_config(NormPlacement::PreNorm, AggregationMode::DlclLearned, 2), 4);
  auto a = train::make_batch(train::TaskKind::Copy, {{3, 4, 5, 6, 7}});
  auto b = a;
  // permute the last two decoder inputs
  std::swap(b.tgt_in.ids[4], b.tgt_in.ids[5]);
  Tensor la = logits_of(m, a), lb = logits_of(m, b);
  const std::size_t v = 12;
  for (std::size_t i = 0; i < 4 * v; ++i) CHECK(la[i] == lb[i]);
  bool later_differs = false;
  for (std::size_t i = 4 * v; i < 6 * v; ++i) later_differs |= la[i] != lb[i];
  CHECK(later_differs);
}

TEST_CASE("zeroed cross attention makes logits source independent") {
  Transformer m(testing::tiny_config(NormPlacement::PostNorm, AggregationMode::DlclLearned, 2), 6);
  auto a = train::make_batch(train::TaskKind::Copy, {{3, 4, 5}});
  auto b = a;
  b.src.ids = {9, 10, 11, 2};
  CHECK_FALSE(bit_equal(logits_of(m, a), logits_of(m, b)));
  m.zero_cross_attention();
  CHECK(bit_equal(logits_of(m, a), logits_of(m, b)));
}

TEST_CASE("zeroed projections leave logits depending only on the embedding path") {
  Transformer m(testing::tiny_config(NormPlacement::PreNorm, AggregationMode::Standard, 1), 2);
  m.zero_residual_projections();
  auto a = train::make_batch(train::TaskKind::Copy, {{3, 4, 5}});
  auto b = a;
  b.src.ids = {8, 8, 8, 2};
  CHECK(bit_equal(logits_of(m, a), logits_of(m, b)));
}

TEST_CASE("gradients reach the aggregation weights") {
  for (auto norm : {NormPlacement::PreNorm, NormPlacement::PostNorm}) {
    Transformer m(testing::tiny_config(norm, AggregationMode::DlclLearned, 6), 8);
    train::TaskSpec spec;
    spec.vocab_size = 12;
    auto batch = train::generate_task_batch(spec, 60, 3);
    m.parameters().zero_grad();
    Graph g;
    GraphScope scope(g);
    nn::ForwardContext ctx;
    auto out = m.forward(ctx, batch.src, batch.tgt_in);
    g.backward(nn::label_smoothed_cross_entropy(out.logits, batch.tgt_out, {0.1, 12, 0}).loss);
    std::size_t total = 0, nonzero = 0;
    for (const auto* agg : {m.encoder_aggregator(), m.decoder_aggregator()}) {
      for (const auto& row : agg->weights().rows)
        for (const Parameter* p : row) {
          CHECK(p->has_grad);
          ++total;
          nonzero += p->grad[0] != 0.0;
        }
    }
    CHECK(static_cast<double>(nonzero) >= 0.95 * static_cast<double>(total));
  }
}

TEST_CASE("frozen presets are not trainable") {
  Transformer m(testing::tiny_config(NormPlacement::PreNorm, AggregationMode::DlclAverage, 3), 1);
  for (const auto& row : m.encoder_aggregator()->weights().rows)
    for (const Parameter* p : row) CHECK_FALSE(p->trainable);
}
