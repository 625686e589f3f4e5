#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cem/tensor.hpp"

namespace cem {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the
// tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape& tape() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Maps the adjoint of a node's output to adjoints of each of its inputs.
using Pullback = std::function<std::vector<Tensor>(
    const Tensor& grad, const Tensor& output,
    std::span<const Tensor* const> inputs)>;

// Leaf adjoints produced by Tape::backward.
class Gradients {
 public:
  // Gradient of the root with respect to `leaf`. Leaves the root does not
  // depend on get zeros.
  const Tensor& operator[](const Var& leaf) const;
  bool contains(const Var& leaf) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::optional<Tensor>> grads_;
};

// Single-threaded recording of primitive operations. Nodes are appended in
// evaluation order, so node inputs always precede the node.
class Tape {
 public:
  // With `record_pullbacks` false the tape only evaluates values, which is
  // what inference and oracle evaluation want.
  explicit Tape(bool record_pullbacks = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var record(Tensor value, std::vector<Var> inputs, Pullback pullback);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_pullbacks_; }
  bool requires_grad(const Var& v) const;
  bool is_leaf(const Var& v) const;

  Gradients backward(const Var& root) const;

 private:
  enum class Kind { leaf, constant, op };
  struct Node {
    Tensor value;
    Kind kind;
    bool requires_grad;
    std::vector<std::size_t> inputs;
    Pullback pullback;
  };

  void check_owner(const Var& v) const;

  bool record_pullbacks_;
  std::deque<Node> nodes_;
};

}  // namespace cem
