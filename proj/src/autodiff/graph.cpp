#include "dlcl/graph.hpp"

#include <atomic>

#include "dlcl/error.hpp"

namespace dlcl {
namespace {

std::atomic<std::uint64_t> next_uid{1};
thread_local Graph* current_graph = nullptr;

}  // namespace

Graph* active_graph() { return current_graph; }

GraphScope::GraphScope(Graph& g) : previous_(current_graph) { current_graph = &g; }
GraphScope::~GraphScope() { current_graph = previous_; }

NoGradScope::NoGradScope() : previous_(current_graph) { current_graph = nullptr; }
NoGradScope::~NoGradScope() { current_graph = previous_; }

Adjoints::Adjoints(std::uint64_t graph_uid, std::vector<std::vector<double>> values,
                   std::vector<Shape> shapes)
    : graph_uid_(graph_uid), values_(std::move(values)), shapes_(std::move(shapes)) {}

Tensor Adjoints::of(const Tensor& t) const {
  const auto& h = t.node();
  if (!h.tracked() || h.graph_uid != graph_uid_) {
    throw GraphError("tensor of shape " + shape_string(t.shape()) + " is not part of this graph");
  }
  if (values_[h.index].empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), values_[h.index]);
}

Graph::Graph() : uid_(next_uid++) {}

Tensor Graph::watch(Parameter& p) {
  if (!p.trainable) return p.value.with_shape(p.value.shape());
  if (auto it = watched_.find(&p); it != watched_.end()) return it->second;
  Tensor leaf = p.value.with_shape(p.value.shape());
  Node n;
  n.shape = leaf.shape();
  n.param = &p;
  n.op = "parameter";
  nodes_.push_back(std::move(n));
  leaf.set_node({uid_, nodes_.size() - 1});
  watched_.emplace(&p, leaf);
  return leaf;
}

Tensor Graph::variable(const Tensor& value) {
  Tensor leaf = value.with_shape(value.shape());
  Node n;
  n.shape = leaf.shape();
  n.op = "variable";
  nodes_.push_back(std::move(n));
  leaf.set_node({uid_, nodes_.size() - 1});
  return leaf;
}

bool Graph::tracks(const Tensor& t) const {
  return t.node().tracked() && t.node().graph_uid == uid_;
}

void Graph::check_owned(const Tensor& t, const char* what) const {
  if (!tracks(t)) throw GraphError(std::string(what) + ": tensor is not recorded on this graph");
}

Tensor Graph::record(Tensor value, std::span<const Tensor> inputs, BackwardFn backward,
                     const char* op) {
  if (consumed_) throw GraphError(std::string(op) + ": graph already consumed by backward()");
  Node n;
  n.inputs.reserve(inputs.size());
  bool any = false;
  for (const auto& in : inputs) {
    if (tracks(in)) {
      n.inputs.push_back(static_cast<long>(in.node().index));
      any = true;
    } else {
      if (in.node().tracked()) {
        throw GraphError(std::string(op) + ": input belongs to a different graph");
      }
      n.inputs.push_back(-1);
    }
  }
  if (!any) return value;
  n.backward = std::move(backward);
  n.shape = value.shape();
  n.op = op;
  nodes_.push_back(std::move(n));
  value.set_node({uid_, nodes_.size() - 1});
  return value;
}

std::vector<std::vector<double>> Graph::sweep(std::size_t output,
                                              std::span<const double> seed) const {
  std::vector<std::vector<double>> adj(nodes_.size());
  adj[output].assign(seed.begin(), seed.end());
  std::vector<std::span<double>> grad_in;
  for (std::size_t i = output + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (adj[i].empty() || !n.backward) continue;
    grad_in.assign(n.inputs.size(), std::span<double>{});
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      long src = n.inputs[j];
      if (src < 0) continue;
      auto& buf = adj[static_cast<std::size_t>(src)];
      if (buf.empty()) buf.assign(shape_numel(nodes_[static_cast<std::size_t>(src)].shape), 0.0);
      grad_in[j] = buf;
    }
    n.backward(adj[i], grad_in);
  }
  return adj;
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw GraphError("backward() called twice on a consumed graph");
  if (loss.numel() != 1) {
    throw GraphError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  check_owned(loss, "backward");
  std::vector<double> seed{1.0};
  adjoints_ = sweep(loss.node().index, seed);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Parameter* p = nodes_[i].param;
    if (!p) continue;
    if (adjoints_[i].empty()) {
      if (!p->has_grad) p->zero_grad();
    } else {
      p->accumulate_grad(adjoints_[i]);
    }
  }
  consumed_ = true;
}

Tensor Graph::grad(const Tensor& t) const {
  if (!consumed_) throw GraphError("grad() requested before backward()");
  check_owned(t, "grad");
  const auto& a = adjoints_[t.node().index];
  if (a.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), a);
}

Adjoints Graph::vjp(const Tensor& output, const Tensor& seed) const {
  check_owned(output, "vjp");
  if (seed.numel() != output.numel()) {
    throw ShapeError("vjp seed " + shape_string(seed.shape()) + " vs output " +
                     shape_string(output.shape()));
  }
  std::vector<Shape> shapes;
  shapes.reserve(nodes_.size());
  for (const auto& n : nodes_) shapes.push_back(n.shape);
  return Adjoints(uid_, sweep(output.node().index, seed.data()), std::move(shapes));
}

}  // namespace dlcl
