#include "dlcl/parameter.hpp"

#include "dlcl/error.hpp"

namespace dlcl {

void Parameter::zero_grad() {
  grad = Tensor::zeros(value.shape());
  has_grad = true;
}

void Parameter::accumulate_grad(std::span<const double> g) {
  if (!has_grad || grad.shape() != value.shape()) zero_grad();
  if (g.size() != grad.numel()) {
    throw ShapeError("gradient size mismatch for parameter '" + name + "'");
  }
  auto dst = grad.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Parameter& ParameterStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(value);
  p->trainable = trainable;
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterStore::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : params_[it->second].get();
}

Parameter& ParameterStore::at(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw Error("no parameter named '" + std::string(name) + "'");
}

const Parameter& ParameterStore::at(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw Error("no parameter named '" + std::string(name) + "'");
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

}  // namespace dlcl
