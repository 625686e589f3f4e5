#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cem/tape.hpp"
#include "cem/tensor.hpp"

namespace cem {

// Accounting bucket for a stored parameter tensor.
enum class ParamGroup { embedding, input, attention, mlp, norms, preconditioners, head };

const char* to_string(ParamGroup group);

struct ParamRef {
  std::string name;
  Tensor* tensor;
  ParamGroup group;
  bool decay;  // receives AdamW weight decay
};

using ParamList = std::vector<ParamRef>;

// Binds stored parameter tensors to tape leaves, once per tensor. Gradients
// for a parameter are looked up through the Var it was bound to.
class ParamBinding {
 public:
  // With `trainable` false parameters are recorded as constants.
  explicit ParamBinding(Tape& tape, bool trainable = true);

  Var operator()(const Tensor& param);
  Var constant(Tensor value);
  std::optional<Var> find(const Tensor& param) const;
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  bool trainable_;
  std::unordered_map<const Tensor*, Var> bound_;
};

}  // namespace cem
