#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dlcl/diagnostics.hpp"
#include "dlcl/error.hpp"
#include "dlcl/gradcheck.hpp"
#include "fd_cases.hpp"

using namespace dlcl;
using namespace dlcl::model;
using dlcl::diag::FactorizationSetup;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "dlcl_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

train::Batch probe_batch() {
  train::TaskSpec spec;
  spec.vocab_size = 12;
  return train::generate_task_batch(spec, 48, 0);
}

}  // namespace

TEST_CASE("gradient report shape") {
  Transformer m(testing::tiny_config(NormPlacement::PreNorm, AggregationMode::Standard, 1), 1);
  auto r = diag::probe_gradient_norms(m, probe_batch(), 1);
  CHECK(r.norms.size() == 2);
  CHECK(r.depth() == 1);
  CHECK_FALSE(r.divergent);
  for (double n : r.norms) CHECK(std::isfinite(n));
  for (const auto& p : m.parameters()) {
    for (double g : p->grad.data()) CHECK(g == 0.0);
  }
}

TEST_CASE("pre-norm identity path passes gradients unchanged") {
  const auto cfg = testing::tiny_config(NormPlacement::PreNorm, AggregationMode::Standard, 6);
  Transformer m(cfg, 2), fresh(cfg, 2);
  m.zero_residual_projections();
  // Keep the decoder intact so the encoder still receives gradient.
  for (auto& p : m.parameters()) {
    if (p->name.rfind("decoder.", 0) == 0) p->value = fresh.parameters().at(p->name).value;
  }
  auto r = diag::probe_gradient_norms(m, probe_batch(), 2);
  REQUIRE(r.norms.size() == 7);
  CHECK(r.norms[0] > 1e-6);
  for (double n : r.norms) CHECK(std::abs(n - r.norms[0]) <= 1e-9 * r.norms[0]);
  CHECK(r.bottom_top_ratio() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("report csv round trip") {
  Transformer m(testing::tiny_config(NormPlacement::PostNorm, AggregationMode::DlclLearned, 2), 3);
  auto r = diag::probe_gradient_norms(m, probe_batch(), 3);
  const auto path = temp_file("report.csv");
  diag::export_report_csv(r, path);

  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "layer,grad_norm");
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) rows += !line.empty() && line[0] != '#';
  CHECK(rows == 3);

  auto back = diag::read_report_csv(path);
  REQUIRE(back.norms.size() == r.norms.size());
  for (std::size_t i = 0; i < r.norms.size(); ++i) {
    CHECK(std::abs(back.norms[i] - r.norms[i]) <= 1e-12 * std::abs(r.norms[i]));
  }
  CHECK_FALSE(back.divergent);

  r.divergent = true;
  diag::export_report_csv(r, path);
  std::ifstream again(path);
  std::string last, line;
  while (std::getline(again, line)) last = line;
  CHECK(last == "# divergent");
  CHECK(diag::read_report_csv(path).divergent);
}

TEST_CASE("factorization with zero branches is exact") {
  for (auto norm : {NormPlacement::PreNorm, NormPlacement::PostNorm}) {
    FactorizationSetup s;
    s.norm = norm;
    s.depth = 3;
    s.zero_branches = true;
    auto c = diag::check_factorization(s);
    CHECK(c.max_rel_error <= 1e-12);
    if (norm == NormPlacement::PreNorm) {
      CHECK(max_abs_diff(c.end_to_end_jacobian, identity_matrix(8)) <= 1e-12);
    }
  }
}

TEST_CASE("factorization holds on the tiny grid") {
  for (auto norm : {NormPlacement::PreNorm, NormPlacement::PostNorm})
    for (std::size_t d : {2, 4})
      for (std::size_t L : {1, 2, 3, 4})
        for (std::uint64_t seed = 1; seed <= 3; ++seed) {
          FactorizationSetup s{norm, L, d, 2, seed, false};
          auto c = diag::check_factorization(s);
          CAPTURE(d);
          CAPTURE(L);
          CAPTURE(seed);
          CHECK(c.max_rel_error <= 1e-6);
          CHECK(c.assembled_jacobian.shape() == Shape{2 * d, 2 * d});
          if (norm == NormPlacement::PreNorm) CHECK(c.forward_identity_error <= 1e-12);
        }
}

TEST_CASE("factorization guard refuses large setups") {
  CHECK_THROWS_AS(diag::check_factorization({NormPlacement::PreNorm, 5, 4, 2, 1, false}), ConfigError);
  CHECK_THROWS_AS(diag::check_factorization({NormPlacement::PreNorm, 2, 8, 2, 1, false}), ConfigError);
  CHECK_THROWS_AS(diag::check_factorization({NormPlacement::PostNorm, 2, 4, 3, 1, false}), ConfigError);
}
