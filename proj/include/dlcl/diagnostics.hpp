#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dlcl/model.hpp"
#include "dlcl/tasks.hpp"
#include "dlcl/tensor.hpp"

namespace dlcl::diag {

// Gradient norms of one forward/backward pass. norms[0] is the embedding
// output y_0, norms[l] the input x_l of encoder layer l (1-based).
struct GradientReport {
  model::ModelConfig config;
  std::uint64_t seed = 0;
  double loss = 0.0;
  std::vector<double> norms;
  bool divergent = false;

  std::size_t depth() const { return norms.empty() ? 0 : norms.size() - 1; }
  double embedding_norm() const { return norms.at(0); }
  // ||dE/dx_1|| / ||dE/dx_L||
  double bottom_top_ratio() const;
};

// Dropout is disabled for the probe; the loss is the training loss.
GradientReport probe_gradient_norms(model::Transformer& model, const train::Batch& batch,
                                    std::uint64_t seed, double smoothing = 0.1);

void export_report_csv(const GradientReport& report, const std::filesystem::path& path);
// Norms and divergence flag only.
GradientReport read_report_csv(const std::filesystem::path& path);

// Tiny residual stack used for the Jacobian checks: `depth` residual units
// alternating self-attention and feed-forward branches on a [t, d] input.
struct FactorizationSetup {
  model::NormPlacement norm = model::NormPlacement::PreNorm;
  std::size_t depth = 2;
  std::size_t d_model = 4;
  std::size_t tokens = 2;
  std::uint64_t seed = 1;
  bool zero_branches = false;
};

inline constexpr std::size_t kMaxFactorDepth = 4;
inline constexpr std::size_t kMaxFactorWidth = 4;
inline constexpr std::size_t kMaxFactorTokens = 2;

struct FactorizationCheck {
  model::NormPlacement placement = model::NormPlacement::PreNorm;
  std::size_t depth = 0;
  // dx_L/dx_0, both sides
  Tensor assembled_jacobian;
  Tensor end_to_end_jacobian;
  double max_rel_error = 0.0;  // worst over every starting layer l
  // Pre-norm only: max |x_L - x_l - sum_k F(x_k)| over l.
  double forward_identity_error = 0.0;
};

FactorizationCheck check_prenorm_factorization(const FactorizationSetup& setup);
FactorizationCheck check_postnorm_factorization(const FactorizationSetup& setup);
FactorizationCheck check_factorization(const FactorizationSetup& setup);

}  // namespace dlcl::diag
