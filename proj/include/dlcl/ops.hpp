#pragma once

#include <span>
#include <vector>

#include "dlcl/tensor.hpp"

// Differentiable kernels. Every op computes its value eagerly and, when a
// Graph is active and at least one input is tracked on it, records a backward
// rule. Shapes are explicit: the only broadcasts are scalar scaling and the
// named row-vector ops.
namespace dlcl::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// `s` is a one-element tensor and may itself be differentiable.
Tensor scale(const Tensor& a, const Tensor& s);

// a: [..., d], v: [d]; v is broadcast across every row of a.
Tensor add_row(const Tensor& a, const Tensor& v);
Tensor mul_row(const Tensor& a, const Tensor& v);

// [m, k] x [k, n] -> [m, n], or batched [b, m, k] x [b, k, n] -> [b, m, n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor transpose(const Tensor& a);  // last two axes
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// table: [v, d]; returns [ids.size(), d].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softmax(const Tensor& a);      // over the last axis
Tensor log_softmax(const Tensor& a);  // over the last axis

Tensor sum(const Tensor& a);        // -> scalar
Tensor mean_last(const Tensor& a);  // [..., d] -> [...]
Tensor var_last(const Tensor& a);   // population variance, [..., d] -> [...]

// Per row of the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

}  // namespace dlcl::ops
