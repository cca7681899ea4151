#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dlcl/tensor.hpp"

namespace dlcl {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value once populated
  bool trainable = true;
  bool has_grad = false;

  void zero_grad();
  void accumulate_grad(std::span<const double> g);
};

// Named parameters in insertion order. Addresses are stable for the lifetime
// of the store, so layers may hold raw pointers into it.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dlcl
