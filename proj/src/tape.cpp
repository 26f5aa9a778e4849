#include "gmt/tape.hpp"

#include <string>

namespace gmt {

Var Tape::constant(Matrix value) {
  Node node;
  node.op = "constant";
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
  Node node;
  node.op = "parameter";
  node.value = p.value;
  node.param = &p;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  const std::size_t id = nodes_.size() - 1;
  param_ids_.emplace(&p, id);
  return {this, id};
}

Var Tape::record(std::string_view op, std::vector<std::size_t> parents, ForwardFn forward, BackwardFn backward,
                 bool allow_infinite) {
  Node node;
  node.op = op;
  node.value = forward(*this);
  if (!allow_infinite && !node.value.all_finite())
    throw DomainError("non-finite value produced by " + std::string(op));
  for (std::size_t p : parents) node.requires_grad = node.requires_grad || nodes_.at(p).requires_grad;
  node.parents = std::move(parents);
  node.forward = std::move(forward);
  node.backward = std::move(backward);
  node.allow_infinite = allow_infinite;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Matrix& Tape::grad(std::size_t id) {
  Node& node = nodes_.at(id);
  if (!node.grad_ready) {
    node.grad = Matrix(node.value.rows(), node.value.cols());
    node.grad_ready = true;
  }
  return node.grad;
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  if (!nodes_.at(id).requires_grad) return;
  grad(id) += g;
}

void Tape::backward(Var output) {
  if (output.tape() != this) throw ConfigurationError("backward on a Var from another tape");
  if (value(output).size() != 1) throw ConfigurationError("backward needs a scalar output, got " + value(output).shape_string());
  if (!requires_grad(output.id())) return;
  grad(output.id())[0] += 1.0;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.grad_ready || !node.requires_grad) continue;
    if (node.backward) node.backward(*this, i);
    if (node.param) node.param->grad += node.grad;
  }
}

bool Tape::replay() {
  bool identical = true;
  for (Node& node : nodes_) {
    if (!node.forward) continue;
    Matrix again = node.forward(*this);
    if (!(again == node.value)) identical = false;
    node.value = std::move(again);
  }
  return identical;
}

}  // namespace gmt
