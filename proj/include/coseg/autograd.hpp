#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "coseg/tensor.hpp"

namespace coseg {

// A named trainable (or buffer) tensor together with its accumulated
// gradient. Gradients accumulate across backward passes until zero_grad().
struct Parameter {
  Parameter(std::string n, Tensor v, bool train = true);

  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad.fill(0.0); }
};

// Owns parameters with stable addresses, in registration order. Order is
// part of the checkpoint format.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::vector<Parameter*> trainable();

  void zero_grad();
  std::size_t size() const { return params_.size(); }
  // number of trainable scalars
  std::size_t trainable_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

// Handle to a value recorded on a Tape. Only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Passed to a node's backward closure. in_grad(i) is null when input i
// does not need a gradient.
class BackwardCtx {
 public:
  BackwardCtx(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}
  const Tensor& out_value() const;
  const Tensor& out_grad() const;
  const Tensor& in_value(std::size_t i) const;
  Tensor* in_grad(std::size_t i);
  std::size_t num_inputs() const;

 private:
  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardCtx&)>;

// Records differentiable operations in execution order; backward() walks
// the record once in reverse. Single-owner: not safe for concurrent use.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Differentiable input whose gradient is readable through grad().
  Var leaf(Tensor value);
  // Leaf bound to a parameter; backward() adds into parameter.grad.
  Var param(Parameter& p);

  // Adds an operation node. The backward closure is dropped when no input
  // requires a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Propagates d(loss)/d(node) to every node recorded before loss.
  // Node gradients are recomputed from zero; parameter gradients accumulate.
  void backward(Var loss);

 private:
  friend class BackwardCtx;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
};

}  // namespace coseg
