#include "dlcl/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dlcl/error.hpp"
#include "dlcl/graph.hpp"

namespace dlcl::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  Graph* g = active_graph();
  if (!g) return false;
  for (const Tensor* t : inputs) {
    if (g->tracks(*t)) return true;
  }
  return false;
}

Tensor finish(Tensor value, std::initializer_list<Tensor> inputs, BackwardFn fn, const char* op) {
  std::vector<Tensor> in(inputs);
  return active_graph()->record(std::move(value), in, std::move(fn), op);
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                   shape_string(b.shape()));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch(op, a, b);
}

std::size_t last_dim(const char* op, const Tensor& a) {
  if (a.rank() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1, got scalar");
  return a.shape().back();
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Tensor v(a.shape(), std::move(out));
  if (!wants_grad({&a, &b})) return v;
  return finish(std::move(v), {a, b}, [](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (auto& dst : gi) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }
  }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  Tensor v(a.shape(), std::move(out));
  if (!wants_grad({&a, &b})) return v;
  return finish(std::move(v), {a, b}, [](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
    for (std::size_t i = 0; i < gi[1].size(); ++i) gi[1][i] -= g[i];
  }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Tensor v(a.shape(), std::move(out));
  if (!wants_grad({&a, &b})) return v;
  return finish(std::move(v), {a, b}, [a, b](std::span<const double> g, std::span<const std::span<double>> gi) {
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i] * y[i];
    for (std::size_t i = 0; i < gi[1].size(); ++i) gi[1][i] += g[i] * x[i];
  }, "mul");
}

Tensor scale(const Tensor& a, double s) {
  Tensor v = map_unary(a, [s](double x) { return x * s; });
  if (!wants_grad({&a})) return v;
  return finish(std::move(v), {a}, [s](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i] * s;
  }, "scale");
}

Tensor scale(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) {
    throw ShapeError("scale: factor must have one element, got " + shape_string(s.shape()));
  }
  const double k = s[0];
  Tensor v = map_unary(a, [k](double x) { return x * k; });
  if (!wants_grad({&a, &s})) return v;
  return finish(std::move(v), {a, s}, [a, k](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i] * k;
    if (!gi[1].empty()) {
      auto x = a.data();
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
      gi[1][0] += acc;
    }
  }, "scale");
}

Tensor add_row(const Tensor& a, const Tensor& v) {
  const std::size_t d = last_dim("add_row", a);
  if (v.rank() != 1 || v.numel() != d) mismatch("add_row", a, v);
  std::vector<double> out(a.numel());
  auto x = a.data(), r = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + r[i % d];
  Tensor val(a.shape(), std::move(out));
  if (!wants_grad({&a, &v})) return val;
  return finish(std::move(val), {a, v}, [d](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
    if (!gi[1].empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[1][i % d] += g[i];
    }
  }, "add_row");
}

Tensor mul_row(const Tensor& a, const Tensor& v) {
  const std::size_t d = last_dim("mul_row", a);
  if (v.rank() != 1 || v.numel() != d) mismatch("mul_row", a, v);
  std::vector<double> out(a.numel());
  auto x = a.data(), r = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * r[i % d];
  Tensor val(a.shape(), std::move(out));
  if (!wants_grad({&a, &v})) return val;
  return finish(std::move(val), {a, v}, [a, v, d](std::span<const double> g, std::span<const std::span<double>> gi) {
    auto x = a.data(), r = v.data();
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i] * r[i % d];
    if (!gi[1].empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[1][i % d] += g[i] * x[i];
    }
  }, "mul_row");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3 && b.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || batched)) mismatch("matmul", a, b);
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != k2 || (batched && b.dim(0) != batch)) mismatch("matmul", a, b);

  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap A(a.data().data() + i * m * k, m, k);
    ConstMap B(b.data().data() + i * k * n, k, n);
    MutMap C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor v(std::move(shape), std::move(out));
  if (!wants_grad({&a, &b})) return v;
  return finish(std::move(v), {a, b},
                [a, b, batch, m, k, n](std::span<const double> g, std::span<const std::span<double>> gi) {
                  for (std::size_t i = 0; i < batch; ++i) {
                    ConstMap G(g.data() + i * m * n, m, n);
                    if (!gi[0].empty()) {
                      ConstMap B(b.data().data() + i * k * n, k, n);
                      MutMap dA(gi[0].data() + i * m * k, m, k);
                      dA.noalias() += G * B.transpose();
                    }
                    if (!gi[1].empty()) {
                      ConstMap A(a.data().data() + i * m * k, m, k);
                      MutMap dB(gi[1].data() + i * k * n, k, n);
                      dB.noalias() += A.transpose() * G;
                    }
                  }
                }, "matmul");
}

namespace {

struct SwapPlan {
  std::size_t pre = 1, a = 1, mid = 1, b = 1, post = 1;
};

SwapPlan plan_swap(const Shape& s, std::size_t ax0, std::size_t ax1) {
  SwapPlan p;
  for (std::size_t i = 0; i < ax0; ++i) p.pre *= s[i];
  p.a = s[ax0];
  for (std::size_t i = ax0 + 1; i < ax1; ++i) p.mid *= s[i];
  p.b = s[ax1];
  for (std::size_t i = ax1 + 1; i < s.size(); ++i) p.post *= s[i];
  return p;
}

// in: [pre, a, mid, b, post] -> out: [pre, b, mid, a, post]; accumulates when `add`.
void swap_copy(const SwapPlan& p, const double* in, double* out, bool add) {
  for (std::size_t i0 = 0; i0 < p.pre; ++i0)
    for (std::size_t ia = 0; ia < p.a; ++ia)
      for (std::size_t im = 0; im < p.mid; ++im)
        for (std::size_t ib = 0; ib < p.b; ++ib) {
          const double* src = in + ((((i0 * p.a + ia) * p.mid + im) * p.b + ib) * p.post);
          double* dst = out + ((((i0 * p.b + ib) * p.mid + im) * p.a + ia) * p.post);
          if (add) {
            for (std::size_t q = 0; q < p.post; ++q) dst[q] += src[q];
          } else {
            std::copy(src, src + p.post, dst);
          }
        }
}

}  // namespace

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= a.rank() || axis1 >= a.rank()) {
    throw ShapeError("transpose: axes " + std::to_string(axis0) + "," + std::to_string(axis1) +
                     " invalid for shape " + shape_string(a.shape()));
  }
  if (axis0 == axis1) return reshape(a, a.shape());
  if (axis0 > axis1) std::swap(axis0, axis1);
  Shape out_shape = a.shape();
  std::swap(out_shape[axis0], out_shape[axis1]);
  const SwapPlan fwd = plan_swap(a.shape(), axis0, axis1);
  std::vector<double> out(a.numel());
  swap_copy(fwd, a.data().data(), out.data(), false);
  Tensor v(out_shape, std::move(out));
  if (!wants_grad({&a})) return v;
  const SwapPlan back = plan_swap(out_shape, axis0, axis1);
  return finish(std::move(v), {a}, [back](std::span<const double> g, std::span<const std::span<double>> gi) {
    swap_copy(back, g.data(), gi[0].data(), true);
  }, "transpose");
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_string(a.shape()));
  return transpose(a, a.rank() - 2, a.rank() - 1);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  Tensor v = a.with_shape(std::move(shape));
  if (!wants_grad({&a})) return v;
  return finish(std::move(v), {a}, [](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i];
  }, "reshape");
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for shape " + shape_string(ref));
  }
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size()) mismatch("concat", parts[0], p);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) mismatch("concat", parts[0], p);
    }
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    auto src = parts[j].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(src.begin() + o * widths[j], src.begin() + (o + 1) * widths[j],
                out.begin() + o * row + offset);
    }
    offset += widths[j];
  }
  Tensor v(out_shape, std::move(out));
  Graph* g = active_graph();
  bool any = false;
  if (g) {
    for (const auto& p : parts) any = any || g->tracks(p);
  }
  if (!any) return v;
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return g->record(std::move(v), inputs,
                   [widths, outer, row](std::span<const double> grad, std::span<const std::span<double>> gi) {
                     std::size_t off = 0;
                     for (std::size_t j = 0; j < gi.size(); ++j) {
                       if (!gi[j].empty()) {
                         for (std::size_t o = 0; o < outer; ++o) {
                           for (std::size_t q = 0; q < widths[j]; ++q) {
                             gi[j][o * widths[j] + q] += grad[o * row + off + q];
                           }
                         }
                       }
                       off += widths[j];
                     }
                   }, "concat");
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_string(table.shape()));
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto src = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range for table " +
                       shape_string(table.shape()));
    }
    std::copy_n(src.begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
  }
  Tensor v({ids.size(), d}, std::move(out));
  if (!wants_grad({&table})) return v;
  std::vector<int> idx(ids.begin(), ids.end());
  return finish(std::move(v), {table}, [idx, d](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gi[0].data() + static_cast<std::size_t>(idx[i]) * d;
      for (std::size_t q = 0; q < d; ++q) dst[q] += g[i * d + q];
    }
  }, "gather_rows");
}

Tensor relu(const Tensor& a) {
  Tensor v = map_unary(a, [](double x) { return x > 0.0 ? x : 0.0; });
  if (!wants_grad({&a})) return v;
  return finish(std::move(v), {a}, [a](std::span<const double> g, std::span<const std::span<double>> gi) {
    auto x = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) gi[0][i] += g[i];
    }
  }, "relu");
}

Tensor exp(const Tensor& a) {
  Tensor v = map_unary(a, [](double x) { return std::exp(x); });
  if (!wants_grad({&a})) return v;
  return finish(v, {a}, [v](std::span<const double> g, std::span<const std::span<double>> gi) {
    auto y = v.data();
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * y[i];
  }, "exp");
}

Tensor log(const Tensor& a) {
  Tensor v = map_unary(a, [](double x) { return std::log(x); });
  if (!wants_grad({&a})) return v;
  return finish(std::move(v), {a}, [a](std::span<const double> g, std::span<const std::span<double>> gi) {
    auto x = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] / x[i];
  }, "log");
}

Tensor softmax(const Tensor& a) {
  const std::size_t d = last_dim("softmax", a);
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < d; ++i) o[i] /= s;
  }
  Tensor v(a.shape(), std::move(out));
  if (!wants_grad({&a})) return v;
  return finish(v, {a}, [v, d, rows](std::span<const double> g, std::span<const std::span<double>> gi) {
    auto y = v.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * d;
      const double* gr = g.data() + r * d;
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
      for (std::size_t i = 0; i < d; ++i) gi[0][r * d + i] += yr[i] * (gr[i] - dot);
    }
  }, "softmax");
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t d = last_dim("log_softmax", a);
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += std::exp(in[i] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t i = 0; i < d; ++i) o[i] = in[i] - lse;
  }
  Tensor v(a.shape(), std::move(out));
  if (!wants_grad({&a})) return v;
  return finish(v, {a}, [v, d, rows](std::span<const double> g, std::span<const std::span<double>> gi) {
    auto y = v.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * d;
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += gr[i];
      for (std::size_t i = 0; i < d; ++i) gi[0][r * d + i] += gr[i] - std::exp(y[r * d + i]) * s;
    }
  }, "log_softmax");
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor v = Tensor::scalar(s);
  if (!wants_grad({&a})) return v;
  return finish(std::move(v), {a}, [](std::span<const double> g, std::span<const std::span<double>> gi) {
    for (auto& x : gi[0]) x += g[0];
  }, "sum");
}

Tensor mean_last(const Tensor& a) {
  const std::size_t d = last_dim("mean_last", a);
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(rows);
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += x[r * d + i];
    out[r] = s / static_cast<double>(d);
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  Tensor v(shape, std::move(out));
  if (!wants_grad({&a})) return v;
  return finish(std::move(v), {a}, [d](std::span<const double> g, std::span<const std::span<double>> gi) {
    const double inv = 1.0 / static_cast<double>(d);
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i / d] * inv;
  }, "mean_last");
}

Tensor var_last(const Tensor& a) {
  const std::size_t d = last_dim("var_last", a);
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(rows), means(rows);
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += x[r * d + i];
    const double mu = s / static_cast<double>(d);
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += (x[r * d + i] - mu) * (x[r * d + i] - mu);
    means[r] = mu;
    out[r] = v / static_cast<double>(d);
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  Tensor v(shape, std::move(out));
  if (!wants_grad({&a})) return v;
  return finish(std::move(v), {a}, [a, means, d](std::span<const double> g, std::span<const std::span<double>> gi) {
    auto x = a.data();
    const double k = 2.0 / static_cast<double>(d);
    for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += g[i / d] * k * (x[i] - means[i / d]);
  }, "var_last");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = last_dim("layer_norm", x);
  if (gain.rank() != 1 || gain.numel() != d) mismatch("layer_norm", x, gain);
  if (bias.rank() != 1 || bias.numel() != d) mismatch("layer_norm", x, bias);
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), inv_sigma(rows), out(x.numel());
  auto in = x.data(), gn = gain.data(), bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - mu) * is;
      xhat[r * d + i] = h;
      out[r * d + i] = h * gn[i] + bs[i];
    }
  }
  Tensor v(x.shape(), std::move(out));
  if (!wants_grad({&x, &gain, &bias})) return v;
  return finish(std::move(v), {x, gain, bias},
                [xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), gain, d, rows](
                    std::span<const double> g, std::span<const std::span<double>> gi) {
                  auto gn = gain.data();
                  const double invd = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = g.data() + r * d;
                    const double* hr = xhat.data() + r * d;
                    if (!gi[0].empty()) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t i = 0; i < d; ++i) {
                        const double dh = gr[i] * gn[i];
                        m1 += dh;
                        m2 += dh * hr[i];
                      }
                      m1 *= invd;
                      m2 *= invd;
                      for (std::size_t i = 0; i < d; ++i) {
                        gi[0][r * d + i] += inv_sigma[r] * (gr[i] * gn[i] - m1 - hr[i] * m2);
                      }
                    }
                    for (std::size_t i = 0; i < d; ++i) {
                      if (!gi[1].empty()) gi[1][i] += gr[i] * hr[i];
                      if (!gi[2].empty()) gi[2][i] += gr[i];
                    }
                  }
                }, "layer_norm");
}

}  // namespace dlcl::ops
