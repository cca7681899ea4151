#include "dlcl/gradcheck.hpp"

#include <cmath>
#include <string>

#include "dlcl/error.hpp"
#include "dlcl/ops.hpp"

namespace dlcl {
namespace {

double eval_at(const ScalarFn& f, const Tensor& x, std::size_t coord) {
  NoGradScope no_grad;
  Tensor y = f(x);
  if (y.numel() != 1) {
    throw ShapeError("finite_difference_check: function must be scalar-valued, got " +
                     shape_string(y.shape()));
  }
  const double v = y[0];
  if (!std::isfinite(v)) {
    throw NumericError("non-finite function value while perturbing coordinate " +
                           std::to_string(coord),
                       coord);
  }
  return v;
}

}  // namespace

double finite_difference_check(const ScalarFn& f, const Tensor& x, double eps) {
  Tensor analytic;
  {
    Graph g;
    GraphScope scope(g);
    Tensor leaf = g.variable(x);
    Tensor y = f(leaf);
    if (!g.tracks(y)) {
      analytic = Tensor::zeros(x.shape());
    } else {
      g.backward(y);
      analytic = g.grad(leaf);
    }
  }

  double worst = 0.0;
  Tensor probe = x.detach();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    probe.mutable_data()[i] = orig + eps;
    const double fp = eval_at(f, probe, i);
    probe.mutable_data()[i] = orig - eps;
    const double fm = eval_at(f, probe, i);
    probe.mutable_data()[i] = orig;

    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    if (!std::isfinite(a)) {
      throw NumericError("non-finite analytic gradient at coordinate " + std::to_string(i), i);
    }
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

Tensor jacobian(const Graph& graph, const Tensor& output, const Tensor& input) {
  const std::size_t m = output.numel(), n = input.numel();
  if (m * n > kJacobianGuard) {
    throw Error("jacobian: refusing to materialize " + std::to_string(m) + "x" + std::to_string(n) +
                " matrix (guard " + std::to_string(kJacobianGuard) + " entries)");
  }
  if (!graph.tracks(output) || !graph.tracks(input)) {
    throw GraphError("jacobian: output and input must both be recorded on the graph");
  }
  std::vector<double> out(m * n);
  Tensor seed = Tensor::zeros(output.shape());
  for (std::size_t i = 0; i < m; ++i) {
    seed.mutable_data()[i] = 1.0;
    Tensor row = graph.vjp(output, seed).of(input);
    seed.mutable_data()[i] = 0.0;
    std::copy(row.data().begin(), row.data().end(), out.begin() + i * n);
  }
  return Tensor({m, n}, std::move(out));
}

Tensor identity_matrix(std::size_t n) {
  Tensor eye = Tensor::zeros({n, n});
  auto d = eye.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return eye;
}

Tensor matrix_product(const Tensor& a, const Tensor& b) {
  NoGradScope no_grad;
  return ops::matmul(a, b);
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_relative_error: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace dlcl
