#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dlcl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Position of a tensor inside a Graph. `graph_uid == 0` means "not tracked".
struct NodeHandle {
  std::uint64_t graph_uid = 0;
  std::size_t index = 0;

  bool tracked() const { return graph_uid != 0; }
};

// Dense row-major float64 array. The buffer is shared between copies and is
// treated as immutable once constructed; mutable_data() detaches first.
class Tensor {
 public:
  Tensor();  // scalar 0
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_->size(); }

  std::span<const double> data() const { return *data_; }
  std::span<double> mutable_data();
  std::vector<double> to_vector() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  // Same buffer, new shape. Element count must match.
  Tensor with_shape(Shape shape) const;

  // Copy of the values with no graph attachment.
  Tensor detach() const;

  const NodeHandle& node() const { return node_; }
  void set_node(NodeHandle node) { node_ = node; }

  bool same_buffer(const Tensor& other) const { return data_ == other.data_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  NodeHandle node_{};
};

bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);

}  // namespace dlcl
