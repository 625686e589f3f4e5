#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "cem/tape.hpp"
#include "cem/tensor.hpp"

namespace cem {

// Which entries of a softmax row take part in normalization. Masked entries
// receive an additive -inf bias before the max-subtracted exponentials.
class Mask {
 public:
  enum class Kind { none, causal, keep };

  Mask() = default;
  static Mask none() { return Mask(); }
  // Entry (r, c) of every trailing matrix is kept iff c <= r.
  static Mask causal();
  // Explicit keep-mask (nonzero = keep) with the same shape as the input.
  static Mask keep(Tensor keep);

  Kind kind() const { return kind_; }
  bool masked(const Shape& shape, std::size_t flat_row, std::size_t col) const;

 private:
  Kind kind_ = Kind::none;
  std::optional<Tensor> keep_;
};

Tensor softmax_lastdim(const Tensor& x, const Mask& mask = Mask::none());
Tensor log_softmax_lastdim(const Tensor& x, const Mask& mask = Mask::none());

double silu(double z);
double sigmoid(double z);
double softplus(double z);

// Differentiable primitives. Every layer in the library is composed from
// this set, so backward coverage is total.
Var matmul(const Var& a, const Var& b, bool transpose_a = false,
           bool transpose_b = false);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var shift(const Var& a, double offset);

Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var rsqrt(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var softplus(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_lastdim(const Var& a);   // keeps a trailing extent of 1
Var mean_lastdim(const Var& a);  // keeps a trailing extent of 1

// Rows of `table` selected by `indices`: result is [n x cols(table)].
Var gather_rows(const Var& table, std::span<const std::size_t> indices);
// Entry `indices[r]` of each last-dim row r: result is [rows x 1].
Var pick_lastdim(const Var& a, std::span<const std::size_t> indices);

Var softmax_lastdim(const Var& a, const Mask& mask = Mask::none());
Var log_softmax_lastdim(const Var& a, const Mask& mask = Mask::none());

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }

// Global L2 norm over a gradient set.
double global_norm(std::span<const Tensor> grads);
// Rescales every gradient by min(1, max_norm / norm). Returns the norm
// before clipping.
double clip_by_global_norm(std::span<Tensor> grads, double max_norm);

}  // namespace cem
