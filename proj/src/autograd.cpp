#include "coseg/autograd.hpp"

#include <stdexcept>

namespace coseg {

Parameter::Parameter(std::string n, Tensor v, bool train)
    : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)), trainable(train) {}

Parameter& ParameterSet::add(std::string name, Tensor value, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value), trainable));
  return *params_.back();
}

Parameter& ParameterSet::get(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw std::out_of_range("unknown parameter: " + name);
}

const Parameter& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw std::out_of_range("unknown parameter: " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return true;
  return false;
}

std::vector<Parameter*> ParameterSet::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterSet::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p->trainable) out.push_back(p.get());
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::size_t ParameterSet::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p->trainable) n += p->value.numel();
  return n;
}

const Tensor& Var::value() const {
  if (!tape) throw std::logic_error("Var: not attached to a tape");
  return tape->value(*this);
}

const Tensor& BackwardCtx::out_value() const { return tape_.nodes_[node_].value; }
const Tensor& BackwardCtx::out_grad() const { return tape_.nodes_[node_].grad; }
const Tensor& BackwardCtx::in_value(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value;
}
Tensor* BackwardCtx::in_grad(std::size_t i) {
  auto& in = tape_.nodes_[tape_.nodes_[node_].inputs.at(i)];
  if (!in.requires_grad) return nullptr;
  if (in.grad.empty()) in.grad = Tensor::zeros_like(in.value);
  return &in.grad;
}
std::size_t BackwardCtx::num_inputs() const { return tape_.nodes_[node_].inputs.size(); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (v.tape != this) throw std::logic_error("Tape::record: input from another tape");
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::grad(Var v) const {
  const auto& n = nodes_.at(v.id);
  if (n.grad.empty()) throw std::logic_error("Tape::grad: no gradient recorded for node");
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("Tape::backward: loss from another tape");
  auto& root = nodes_.at(loss.id);
  if (root.value.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  if (!root.requires_grad) return;
  root.grad = Tensor::ones(root.value.shape());

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      BackwardCtx ctx(*this, i);
      n.backward(ctx);
    } else if (n.param) {
      n.param->grad.add_(n.grad);
    }
  }
}

}  // namespace coseg
