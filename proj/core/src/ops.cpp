#include "cem/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cem/error.hpp"

namespace cem {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Per-axis strides of `s` laid over an output of rank `r`; broadcast axes get
// stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t lead = r - s.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t acc = 1;
  for (std::size_t i = r; i-- > lead;) {
    const std::size_t e = s[i - lead];
    strides[i] = e == 1 ? 0 : acc;
    acc *= e;
  }
  return strides;
}

template <class F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (b.size() == 1) {
    Tensor out(a.shape());
    const double bv = b[0];
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], bv);
    return out;
  }
  const Shape shape = broadcast_shapes(a.shape(), b.shape());
  Tensor out(shape);
  const auto sa = broadcast_strides(a.shape(), shape);
  const auto sb = broadcast_strides(b.shape(), shape);
  const std::size_t r = shape.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    out[flat] = f(a[oa], b[ob]);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < shape[ax]) break;
      oa -= sa[ax] * shape[ax];
      ob -= sb[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape().record(
      std::move(y), {a},
      [df](const Tensor& g, const Tensor& out,
           std::span<const Tensor* const> in) {
        const Tensor& xin = *in[0];
        Tensor dx(xin.shape());
        for (std::size_t i = 0; i < xin.size(); ++i) {
          dx[i] = g[i] * df(xin[i], out[i]);
        }
        return std::vector<Tensor>{std::move(dx)};
      });
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) {
    throw ContractError("operands live on different tapes");
  }
}

Shape lastdim_reduced(const Shape& s) {
  Shape out = s;
  out.back() = 1;
  return out;
}

}  // namespace

Mask Mask::causal() {
  Mask m;
  m.kind_ = Kind::causal;
  return m;
}

Mask Mask::keep(Tensor keep) {
  Mask m;
  m.kind_ = Kind::keep;
  m.keep_ = std::move(keep);
  return m;
}

bool Mask::masked(const Shape& shape, std::size_t flat_row,
                  std::size_t col) const {
  switch (kind_) {
    case Kind::none:
      return false;
    case Kind::causal: {
      const std::size_t rows = shape.size() >= 2 ? shape[shape.size() - 2] : 1;
      return col > flat_row % rows;
    }
    case Kind::keep: {
      if (keep_->shape() != shape) {
        throw DimensionError("keep-mask shape " + shape_string(keep_->shape()) +
                             " does not match " + shape_string(shape));
      }
      return (*keep_)[flat_row * shape.back() + col] == 0.0;
    }
  }
  return false;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double silu(double z) { return z * sigmoid(z); }

double softplus(double z) {
  // log(1 + e^z) without overflow.
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

Tensor softmax_lastdim(const Tensor& x, const Mask& mask) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = kNegInf;
    for (std::size_t c = 0; c < n; ++c) {
      if (!mask.masked(x.shape(), r, c)) mx = std::max(mx, x[r * n + c]);
    }
    if (mx == kNegInf) {
      throw DomainError("softmax row " + std::to_string(r) +
                        " is fully masked");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double e =
          mask.masked(x.shape(), r, c) ? 0.0 : std::exp(x[r * n + c] - mx);
      out[r * n + c] = e;
      total += e;
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= total;
  }
  return out;
}

Tensor log_softmax_lastdim(const Tensor& x, const Mask& mask) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = kNegInf;
    for (std::size_t c = 0; c < n; ++c) {
      if (!mask.masked(x.shape(), r, c)) mx = std::max(mx, x[r * n + c]);
    }
    if (mx == kNegInf) {
      throw DomainError("log-softmax row " + std::to_string(r) +
                        " is fully masked");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!mask.masked(x.shape(), r, c)) total += std::exp(x[r * n + c] - mx);
    }
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] =
          mask.masked(x.shape(), r, c) ? kNegInf : x[r * n + c] - lse;
    }
  }
  return out;
}

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  require_same_tape(a, b);
  Tensor y = matmul(a.value(), b.value(), transpose_a, transpose_b);
  return a.tape().record(
      std::move(y), {a, b},
      [transpose_a, transpose_b](const Tensor& g, const Tensor&,
                                 std::span<const Tensor* const> in) {
        const Tensor& A = *in[0];
        const Tensor& B = *in[1];
        Tensor da;
        Tensor db;
        if (!transpose_a && !transpose_b) {
          da = matmul(g, B, false, true);
          db = matmul(A, g, true, false);
        } else if (!transpose_a && transpose_b) {
          da = matmul(g, B, false, false);
          db = matmul(g, A, true, false);
        } else if (transpose_a && !transpose_b) {
          da = matmul(B, g, false, true);
          db = matmul(A, g, false, false);
        } else {
          da = matmul(B, g, true, true);
          db = matmul(g, A, true, true);
        }
        return std::vector<Tensor>{std::move(da), std::move(db)};
      });
}

Var transpose(const Var& a) {
  return a.tape().record(
      transpose(a.value()), {a},
      [](const Tensor& g, const Tensor&, std::span<const Tensor* const>) {
        return std::vector<Tensor>{transpose(g)};
      });
}

Var reshape(const Var& a, Shape shape) {
  return a.tape().record(
      a.value().reshaped(std::move(shape)), {a},
      [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in) {
        return std::vector<Tensor>{g.reshaped(in[0]->shape())};
      });
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(
      broadcast_binary(a.value(), b.value(),
                       [](double x, double y) { return x + y; }),
      {a, b},
      [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in) {
        return std::vector<Tensor>{sum_to_shape(g, in[0]->shape()),
                                   sum_to_shape(g, in[1]->shape())};
      });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(
      broadcast_binary(a.value(), b.value(),
                       [](double x, double y) { return x - y; }),
      {a, b},
      [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in) {
        Tensor gb = sum_to_shape(g, in[1]->shape());
        gb *= -1.0;
        return std::vector<Tensor>{sum_to_shape(g, in[0]->shape()),
                                   std::move(gb)};
      });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(
      broadcast_binary(a.value(), b.value(),
                       [](double x, double y) { return x * y; }),
      {a, b},
      [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in) {
        auto times = [](double x, double y) { return x * y; };
        return std::vector<Tensor>{
            sum_to_shape(broadcast_binary(g, *in[1], times), in[0]->shape()),
            sum_to_shape(broadcast_binary(g, *in[0], times), in[1]->shape())};
      });
}

Var div(const Var& a, const Var& b) {
  require_same_tape(a, b);
  return a.tape().record(
      broadcast_binary(a.value(), b.value(),
                       [](double x, double y) { return x / y; }),
      {a, b},
      [](const Tensor& g, const Tensor& out,
         std::span<const Tensor* const> in) {
        Tensor ga = broadcast_binary(g, *in[1],
                                     [](double x, double y) { return x / y; });
        // d(a/b)/db = -(a/b)/b
        Tensor gb = broadcast_binary(
            broadcast_binary(g, out, [](double x, double y) { return -x * y; }),
            *in[1], [](double x, double y) { return x / y; });
        return std::vector<Tensor>{sum_to_shape(ga, in[0]->shape()),
                                   sum_to_shape(gb, in[1]->shape())};
      });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var shift(const Var& a, double offset) {
  return unary(
      a, [offset](double x) { return x + offset; },
      [](double, double) { return 1.0; });
}

Var exp(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Var rsqrt(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / std::sqrt(x); },
      [](double x, double y) { return -0.5 * y / x; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return silu(x); },
      [](double x, double) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var softplus(const Var& a) {
  return unary(
      a, [](double x) { return softplus(x); },
      [](double x, double) { return sigmoid(x); });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(
      Tensor::scalar(s), {a},
      [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in) {
        return std::vector<Tensor>{Tensor(in[0]->shape(), g[0])};
      });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var sum_lastdim(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor y(lastdim_reduced(x.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += x[r * n + c];
    y[r] = s;
  }
  return a.tape().record(
      std::move(y), {a},
      [](const Tensor& g, const Tensor&, std::span<const Tensor* const> in) {
        const std::size_t n = in[0]->shape().back();
        Tensor dx(in[0]->shape());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[i / n];
        return std::vector<Tensor>{std::move(dx)};
      });
}

Var mean_lastdim(const Var& a) {
  return scale(sum_lastdim(a),
               1.0 / static_cast<double>(a.value().shape().back()));
}

Var gather_rows(const Var& table, std::span<const std::size_t> indices) {
  const Tensor& t = table.value();
  if (t.rank() != 2) {
    throw DimensionError("gather_rows: table must be a matrix, got " +
                         shape_string(t.shape()));
  }
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  const std::size_t d = t.dim(1);
  Tensor y({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= t.dim(0)) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) +
                           " out of range for " + shape_string(t.shape()));
    }
    auto src = t.row(indices[i]);
    std::copy(src.begin(), src.end(), y.row(i).begin());
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return table.tape().record(
      std::move(y), {table},
      [idx = std::move(idx)](const Tensor& g, const Tensor&,
                             std::span<const Tensor* const> in) {
        Tensor dt(in[0]->shape());
        const std::size_t d = dt.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t c = 0; c < d; ++c) dt.at(idx[i], c) += g.at(i, c);
        }
        return std::vector<Tensor>{std::move(dt)};
      });
}

Var pick_lastdim(const Var& a, std::span<const std::size_t> indices) {
  const Tensor& x = a.value();
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  if (indices.size() != rows) {
    throw DimensionError("pick_lastdim: " + std::to_string(indices.size()) +
                         " indices for " + std::to_string(rows) + " rows");
  }
  Tensor y({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    if (indices[r] >= n) {
      throw DimensionError("pick_lastdim: index out of range");
    }
    y[r] = x[r * n + indices[r]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return a.tape().record(
      std::move(y), {a},
      [idx = std::move(idx)](const Tensor& g, const Tensor&,
                             std::span<const Tensor* const> in) {
        Tensor dx(in[0]->shape());
        const std::size_t n = dx.shape().back();
        for (std::size_t r = 0; r < idx.size(); ++r) dx[r * n + idx[r]] = g[r];
        return std::vector<Tensor>{std::move(dx)};
      });
}

Var softmax_lastdim(const Var& a, const Mask& mask) {
  return a.tape().record(
      softmax_lastdim(a.value(), mask), {a},
      [](const Tensor& g, const Tensor& y, std::span<const Tensor* const>) {
        const std::size_t n = y.shape().back();
        const std::size_t rows = y.size() / n;
        Tensor dx(y.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < n; ++c) s += g[r * n + c] * y[r * n + c];
          for (std::size_t c = 0; c < n; ++c) {
            dx[r * n + c] = y[r * n + c] * (g[r * n + c] - s);
          }
        }
        return std::vector<Tensor>{std::move(dx)};
      });
}

Var log_softmax_lastdim(const Var& a, const Mask& mask) {
  return a.tape().record(
      log_softmax_lastdim(a.value(), mask), {a},
      [](const Tensor& g, const Tensor& y, std::span<const Tensor* const>) {
        const std::size_t n = y.shape().back();
        const std::size_t rows = y.size() / n;
        Tensor dx(y.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            if (y[r * n + c] != kNegInf) s += g[r * n + c];
          }
          for (std::size_t c = 0; c < n; ++c) {
            const double yv = y[r * n + c];
            dx[r * n + c] = yv == kNegInf ? 0.0 : g[r * n + c] - std::exp(yv) * s;
          }
        }
        return std::vector<Tensor>{std::move(dx)};
      });
}

double global_norm(std::span<const Tensor> grads) {
  double s = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.data()) s += v * v;
  }
  return std::sqrt(s);
}

double clip_by_global_norm(std::span<Tensor> grads, double max_norm) {
  if (!(max_norm > 0.0)) {
    throw ContractError("clip threshold must be positive");
  }
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor& g : grads) g *= factor;
  }
  return norm;
}

}  // namespace cem
