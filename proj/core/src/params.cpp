#include "cem/params.hpp"

namespace cem {

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::embedding:
      return "embedding";
    case ParamGroup::input:
      return "input";
    case ParamGroup::attention:
      return "attention";
    case ParamGroup::mlp:
      return "mlp";
    case ParamGroup::norms:
      return "norms";
    case ParamGroup::preconditioners:
      return "preconditioners";
    case ParamGroup::head:
      return "head";
  }
  return "unknown";
}

ParamBinding::ParamBinding(Tape& tape, bool trainable)
    : tape_(&tape), trainable_(trainable) {}

Var ParamBinding::operator()(const Tensor& param) {
  auto it = bound_.find(&param);
  if (it != bound_.end()) return it->second;
  Var v = trainable_ ? tape_->leaf(param) : tape_->constant(param);
  bound_.emplace(&param, v);
  return v;
}

Var ParamBinding::constant(Tensor value) {
  return tape_->constant(std::move(value));
}

std::optional<Var> ParamBinding::find(const Tensor& param) const {
  auto it = bound_.find(&param);
  if (it == bound_.end()) return std::nullopt;
  return it->second;
}

}  // namespace cem
