#pragma once

#include <cstddef>
#include <functional>

#include "dlcl/graph.hpp"
#include "dlcl/tensor.hpp"

namespace dlcl {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Compares reverse-mode gradients of a scalar function with central
// differences. Returns max over coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Throws NumericError (carrying the coordinate) on non-finite values.
double finite_difference_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

// Dense Jacobian d(output)/d(input) as a [numel(output), numel(input)]
// tensor. Both tensors must be recorded on `graph`.
inline constexpr std::size_t kJacobianGuard = 1'000'000;
Tensor jacobian(const Graph& graph, const Tensor& output, const Tensor& input);

// Row-major matrix helpers over [m, n] tensors, used to assemble Jacobian
// products outside the graph.
Tensor identity_matrix(std::size_t n);
Tensor matrix_product(const Tensor& a, const Tensor& b);
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

}  // namespace dlcl
