#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dlcl/parameter.hpp"
#include "dlcl/tensor.hpp"

namespace dlcl {

// Backward rule of a recorded op. `grad_in[i]` is empty when input i is a
// constant; otherwise the rule must *add* its contribution into it.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

class Graph;

// Adjoints produced by one reverse sweep.
class Adjoints {
 public:
  Adjoints(std::uint64_t graph_uid, std::vector<std::vector<double>> values,
           std::vector<Shape> shapes);

  // Gradient of the swept output with respect to `t`; zeros if unreachable.
  Tensor of(const Tensor& t) const;

 private:
  std::uint64_t graph_uid_;
  std::vector<std::vector<double>> values_;
  std::vector<Shape> shapes_;
};

// Append-only tape of operations. Nodes are appended in evaluation order so
// the tape is always topologically sorted.
class Graph {
 public:
  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::uint64_t uid() const { return uid_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Leaf bound to a parameter; backward() accumulates into `p.grad`.
  // Frozen parameters come back untracked.
  Tensor watch(Parameter& p);
  // Differentiable leaf with no parameter binding.
  Tensor variable(const Tensor& value);

  Tensor record(Tensor value, std::span<const Tensor> inputs, BackwardFn backward,
                const char* op);

  bool tracks(const Tensor& t) const;

  // Reverse sweep from a scalar loss. Populates gradients of every watched
  // parameter (zeros when unreachable) and keeps adjoints for grad().
  void backward(const Tensor& loss);
  Tensor grad(const Tensor& t) const;

  // Non-consuming vector-Jacobian product seeded with `seed` at `output`.
  Adjoints vjp(const Tensor& output, const Tensor& seed) const;

 private:
  struct Node {
    std::vector<long> inputs;  // -1 for constant inputs
    BackwardFn backward;
    Shape shape;
    Parameter* param = nullptr;
    const char* op = "";
  };

  std::vector<std::vector<double>> sweep(std::size_t output, std::span<const double> seed) const;
  void check_owned(const Tensor& t, const char* what) const;

  std::uint64_t uid_;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, Tensor> watched_;
  bool consumed_ = false;
  std::vector<std::vector<double>> adjoints_;
};

// The graph that ops record onto; null when evaluating without gradients.
Graph* active_graph();

// RAII activation of a graph for the current thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& g);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

// RAII suspension of recording (value-only evaluation).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph* previous_;
};

}  // namespace dlcl
