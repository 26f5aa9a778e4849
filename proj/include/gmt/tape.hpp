#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gmt/matrix.hpp"

namespace gmt {

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Matrix value, bool decay = true)
      : name(std::move(name)), value(std::move(value)), grad(this->value.rows(), this->value.cols()), decay(decay) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
    grad.fill(0.0);
  }

  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;  // AdamW decoupled weight decay applies
};

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records primitive applications in execution order. Each node keeps the closure that
// produced its value, so the tape can be replayed, and the closure that pushes its
// output gradient to its parents. Confined to one thread.
class Tape {
 public:
  using ForwardFn = std::function<Matrix(const Tape&)>;
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf bound to a parameter; the parameter's current value is snapshotted.
  /// Registering the same parameter twice returns the same leaf.
  Var param(Parameter& p);

  Var record(std::string_view op, std::vector<std::size_t> parents, ForwardFn forward, BackwardFn backward,
             bool allow_infinite = false);

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  const Matrix& value(Var v) const { return value(v.id()); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_.at(id).grad_ready; }

  /// Gradient buffer of a node, zero-allocated on first access.
  Matrix& grad(std::size_t id);
  /// Adds g into the gradient of `id` when that node participates in differentiation.
  void accumulate(std::size_t id, const Matrix& g);

  /// Reverse sweep from a 1×1 output; parameter leaves add into Parameter::grad.
  void backward(Var output);

  /// Recomputes every recorded node from its parents. Returns true when all values are
  /// bit-identical to the recorded ones.
  bool replay();

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    std::string_view op;
    Matrix value;
    Matrix grad;
    bool grad_ready = false;
    std::vector<std::size_t> parents;
    ForwardFn forward;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    bool allow_infinite = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_ids_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

}  // namespace gmt
