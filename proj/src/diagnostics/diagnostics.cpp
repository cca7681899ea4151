#include "dlcl/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "dlcl/error.hpp"
#include "dlcl/gradcheck.hpp"
#include "dlcl/graph.hpp"
#include "dlcl/ops.hpp"

namespace dlcl::diag {

double GradientReport::bottom_top_ratio() const {
  if (norms.size() < 2) throw Error("bottom_top_ratio: report has no layer entries");
  return norms[1] / norms.back();
}

GradientReport probe_gradient_norms(model::Transformer& model, const train::Batch& batch,
                                    std::uint64_t seed, double smoothing) {
  GradientReport report;
  report.config = model.config();
  report.seed = seed;

  model.parameters().zero_grad();
  nn::ForwardContext ctx(false);
  Graph g;
  GraphScope scope(g);
  auto r = model.forward(ctx, batch.src, batch.tgt_in);
  nn::SmoothingConfig sc{smoothing, model.config().tgt_vocab, model.config().pad_id};
  Tensor loss = nn::label_smoothed_cross_entropy(r.logits, batch.tgt_out, sc).loss;
  report.loss = loss.item();
  g.backward(loss);

  report.norms.push_back(l2_norm(g.grad(r.encoder.y.front())));
  for (const auto& x : r.encoder.x) report.norms.push_back(l2_norm(g.grad(x)));

  report.divergent = !std::isfinite(report.loss);
  for (double n : report.norms) report.divergent = report.divergent || !std::isfinite(n);
  model.parameters().zero_grad();
  return report;
}

void export_report_csv(const GradientReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "layer,grad_norm\n";
  char buf[64];
  for (std::size_t l = 0; l < report.norms.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%.17g", report.norms[l]);
    out << l << ',' << buf << '\n';
  }
  if (report.divergent) out << "# divergent\n";
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

GradientReport read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  GradientReport report;
  std::string line;
  std::getline(in, line);
  if (line != "layer,grad_norm") throw IoError("unexpected report header '" + line + "'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line == "# divergent") report.divergent = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw IoError("malformed report row '" + line + "'");
    if (std::stoul(line.substr(0, comma)) != report.norms.size()) {
      throw IoError("report rows out of order at '" + line + "'");
    }
    report.norms.push_back(std::strtod(line.c_str() + comma + 1, nullptr));
  }
  return report;
}

namespace {

struct TinyStack {
  std::unique_ptr<model::Transformer> model;
  Tensor input;  // [t, d]
};

TinyStack build_stack(const FactorizationSetup& s) {
  if (s.depth < 1 || s.depth > kMaxFactorDepth || s.d_model < 2 || s.d_model > kMaxFactorWidth ||
      s.tokens < 1 || s.tokens > kMaxFactorTokens) {
    throw ConfigError("factorization check refused: needs 1 <= depth <= " +
                      std::to_string(kMaxFactorDepth) + ", 2 <= d <= " +
                      std::to_string(kMaxFactorWidth) + ", 1 <= t <= " +
                      std::to_string(kMaxFactorTokens) + " (got depth " + std::to_string(s.depth) +
                      ", d " + std::to_string(s.d_model) + ", t " + std::to_string(s.tokens) + ")");
  }
  model::ModelConfig cfg;
  cfg.encoder_depth = (s.depth + 1) / 2;
  cfg.decoder_depth = 1;
  cfg.d_model = s.d_model;
  cfg.heads = s.d_model >= 4 ? 2 : 1;
  cfg.d_ff = 2 * s.d_model;
  cfg.norm = s.norm;
  cfg.src_vocab = cfg.tgt_vocab = 4;
  cfg.residual_dropout = cfg.attention_dropout = cfg.ffn_dropout = 0.0;

  TinyStack st;
  st.model = std::make_unique<model::Transformer>(cfg, s.seed);
  std::mt19937_64 rng(s.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Move the norms away from unit gain / zero bias so J_LN is generic.
  for (std::size_t k = 0; k < s.depth; ++k) {
    const auto& ln = st.model->encoder_unit_norm(k);
    for (auto& v : ln.gain->value.mutable_data()) v = 1.0 + 0.2 * normal(rng);
    for (auto& v : ln.bias->value.mutable_data()) v = 0.2 * normal(rng);
  }
  if (s.zero_branches) st.model->zero_residual_projections();
  std::vector<double> x(s.tokens * s.d_model);
  for (auto& v : x) v = normal(rng);
  st.input = Tensor({s.tokens, s.d_model}, std::move(x));
  return st;
}

Tensor add_matrices(const Tensor& a, const Tensor& b) {
  NoGradScope no_grad;
  return ops::add(a, b);
}

}  // namespace

FactorizationCheck check_prenorm_factorization(const FactorizationSetup& setup) {
  if (setup.norm != model::NormPlacement::PreNorm) throw ConfigError("expected a pre-norm setup");
  TinyStack st = build_stack(setup);
  const std::size_t L = setup.depth, n = st.input.numel();

  nn::ForwardContext ctx(false);
  Graph g;
  GraphScope scope(g);
  std::vector<Tensor> xs{g.variable(st.input)}, fs;
  for (std::size_t k = 0; k < L; ++k) {
    const auto& ln = st.model->encoder_unit_norm(k);
    fs.push_back(st.model->encoder_sublayer(ctx, k, nn::layer_norm(ctx, xs[k], ln)));
    xs.push_back(ops::add(xs[k], fs[k]));
  }

  FactorizationCheck check;
  check.placement = setup.norm;
  check.depth = L;
  for (std::size_t l = 0; l < L; ++l) {
    Tensor end_to_end = jacobian(g, xs[L], xs[l]);
    Tensor assembled = identity_matrix(n);
    Tensor sum = xs[l].detach();
    for (std::size_t k = l; k < L; ++k) {
      assembled = add_matrices(assembled, jacobian(g, fs[k], xs[l]));
      sum = add_matrices(sum, fs[k].detach());
    }
    check.max_rel_error = std::max(check.max_rel_error, max_relative_error(assembled, end_to_end));
    check.forward_identity_error =
        std::max(check.forward_identity_error, max_abs_diff(sum, xs[L].detach()));
    if (l == 0) {
      check.assembled_jacobian = assembled;
      check.end_to_end_jacobian = end_to_end;
    }
  }
  return check;
}

FactorizationCheck check_postnorm_factorization(const FactorizationSetup& setup) {
  if (setup.norm != model::NormPlacement::PostNorm) throw ConfigError("expected a post-norm setup");
  TinyStack st = build_stack(setup);
  const std::size_t L = setup.depth, n = st.input.numel();

  nn::ForwardContext ctx(false);
  Graph g;
  std::vector<Tensor> xs, ys;
  {
    GraphScope scope(g);
    xs.push_back(g.variable(st.input));
    for (std::size_t k = 0; k < L; ++k) {
      ys.push_back(ops::add(xs[k], st.model->encoder_sublayer(ctx, k, xs[k])));
      xs.push_back(nn::layer_norm(ctx, ys[k], st.model->encoder_unit_norm(k)));
    }
  }

  // Per-unit factors J_LN(y_k) (I + J_F(x_k)), each on its own graph.
  std::vector<Tensor> factors;
  for (std::size_t k = 0; k < L; ++k) {
    Tensor j_f, j_ln;
    {
      Graph h;
      GraphScope scope(h);
      Tensor v = h.variable(xs[k].detach());
      j_f = jacobian(h, st.model->encoder_sublayer(ctx, k, v), v);
    }
    {
      Graph h;
      GraphScope scope(h);
      Tensor v = h.variable(ys[k].detach());
      j_ln = jacobian(h, nn::layer_norm(ctx, v, st.model->encoder_unit_norm(k)), v);
    }
    factors.push_back(matrix_product(j_ln, add_matrices(identity_matrix(n), j_f)));
  }

  FactorizationCheck check;
  check.placement = setup.norm;
  check.depth = L;
  for (std::size_t l = 0; l < L; ++l) {
    Tensor end_to_end = jacobian(g, xs[L], xs[l]);
    Tensor assembled = identity_matrix(n);
    for (std::size_t k = l; k < L; ++k) assembled = matrix_product(factors[k], assembled);
    check.max_rel_error = std::max(check.max_rel_error, max_relative_error(assembled, end_to_end));
    if (l == 0) {
      check.assembled_jacobian = assembled;
      check.end_to_end_jacobian = end_to_end;
    }
  }
  return check;
}

FactorizationCheck check_factorization(const FactorizationSetup& setup) {
  return setup.norm == model::NormPlacement::PreNorm ? check_prenorm_factorization(setup)
                                                     : check_postnorm_factorization(setup);
}

}  // namespace dlcl::diag
