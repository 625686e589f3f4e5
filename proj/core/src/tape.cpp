#include "cem/tape.hpp"

#include "cem/error.hpp"

namespace cem {

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on unbound Var");
  return tape_->value(id_);
}

Tape& Var::tape() const {
  if (!tape_) throw ContractError("tape() on unbound Var");
  return *tape_;
}

const Tensor& Gradients::operator[](const Var& leaf) const {
  if (!tape_ || &leaf.tape() != tape_ || leaf.id() >= grads_.size() ||
      !grads_[leaf.id()]) {
    throw ContractError("no gradient recorded for this Var (not a leaf of "
                        "the differentiated tape)");
  }
  return *grads_[leaf.id()];
}

bool Gradients::contains(const Var& leaf) const {
  return tape_ && leaf.valid() && &leaf.tape() == tape_ &&
         leaf.id() < grads_.size() && grads_[leaf.id()].has_value();
}

Tape::Tape(bool record_pullbacks) : record_pullbacks_(record_pullbacks) {}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Kind::leaf, record_pullbacks_, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Kind::constant, false, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Pullback pullback) {
  bool needs = false;
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  for (const Var& in : inputs) {
    check_owner(in);
    ids.push_back(in.id());
    needs = needs || nodes_[in.id()].requires_grad;
  }
  needs = needs && record_pullbacks_;
  if (!needs) {
    ids.clear();
    pullback = nullptr;
  }
  nodes_.push_back(
      Node{std::move(value), Kind::op, needs, std::move(ids), std::move(pullback)});
  return Var(this, nodes_.size() - 1);
}

bool Tape::requires_grad(const Var& v) const {
  check_owner(v);
  return nodes_[v.id()].requires_grad;
}

bool Tape::is_leaf(const Var& v) const {
  check_owner(v);
  return nodes_[v.id()].kind == Kind::leaf;
}

void Tape::check_owner(const Var& v) const {
  if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("Var does not belong to this tape");
  }
}

Gradients Tape::backward(const Var& root) const {
  check_owner(root);
  if (!record_pullbacks_) {
    throw ContractError("backward() on a tape created without pullbacks");
  }
  const Tensor& root_value = nodes_[root.id()].value;
  if (root_value.size() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " +
                        shape_string(root_value.shape()));
  }

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[root.id()] = Tensor::ones_like(root_value);

  std::vector<const Tensor*> inputs;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || node.kind != Kind::op || !node.pullback) continue;
    inputs.clear();
    for (std::size_t in : node.inputs) inputs.push_back(&nodes_[in].value);
    std::vector<Tensor> contributions =
        node.pullback(*grads[id], node.value, inputs);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (grads[in]) {
        *grads[in] += contributions[k];
      } else {
        grads[in] = std::move(contributions[k]);
      }
    }
    grads[id].reset();
  }

  Gradients out;
  out.tape_ = this;
  out.grads_.resize(nodes_.size());
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].kind != Kind::leaf) continue;
    out.grads_[id] = grads[id] ? std::move(*grads[id])
                               : Tensor::zeros_like(nodes_[id].value);
  }
  if (nodes_[root.id()].kind == Kind::leaf) {
    out.grads_[root.id()] = Tensor::ones_like(root_value);
  }
  return out;
}

}  // namespace cem
