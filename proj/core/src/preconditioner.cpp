#include <cmath>

#include "cem/error.hpp"
#include "cem/layers.hpp"
#include "cem/ops.hpp"

namespace cem::layers {
namespace {

constexpr double kLowRankInitStd = 0.02;

void check_dim(const PreconditionerParams& params, std::size_t dim) {
  if (params.mode == PreconditionerMode::identity) return;
  if (params.p.size() != dim) {
    throw DimensionError("preconditioner diagonal has length " +
                         std::to_string(params.p.size()) + ", gradient has " +
                         std::to_string(dim));
  }
  if (params.mode == PreconditionerMode::diag_low_rank &&
      (params.u.rank() != 2 || params.u.dim(0) != dim ||
       params.u.shape() != params.v.shape())) {
    throw DimensionError("preconditioner factors must share shape [" +
                         std::to_string(dim) + " x R], got " +
                         shape_string(params.u.shape()) + " and " +
                         shape_string(params.v.shape()));
  }
}

}  // namespace

const char* to_string(PreconditionerMode mode) {
  switch (mode) {
    case PreconditionerMode::identity:
      return "identity";
    case PreconditionerMode::diagonal:
      return "diagonal";
    case PreconditionerMode::diag_low_rank:
      return "diag_low_rank";
  }
  return "identity";
}

PreconditionerMode preconditioner_mode_from_string(const std::string& s) {
  if (s == "identity") return PreconditionerMode::identity;
  if (s == "diagonal") return PreconditionerMode::diagonal;
  if (s == "diag_low_rank") return PreconditionerMode::diag_low_rank;
  throw ConfigError("unknown preconditioner mode '" + s +
                    "' (expected identity, diagonal or diag_low_rank)");
}

PreconditionerParams PreconditionerParams::init(PreconditionerMode mode,
                                                std::size_t dim,
                                                std::size_t rank, Rng& rng) {
  PreconditionerParams params;
  params.mode = mode;
  if (mode == PreconditionerMode::identity) return params;
  params.p = Tensor({dim}, 1.0 / std::sqrt(static_cast<double>(dim)));
  if (mode == PreconditionerMode::diag_low_rank) {
    if (rank == 0) throw ConfigError("preconditioner rank must be positive");
    params.u = rng.normal_tensor({dim, rank}, kLowRankInitStd);
    params.v = Tensor({dim, rank});
  }
  return params;
}

std::size_t PreconditionerParams::parameter_count() const {
  switch (mode) {
    case PreconditionerMode::identity:
      return 0;
    case PreconditionerMode::diagonal:
      return p.size();
    case PreconditionerMode::diag_low_rank:
      return p.size() + u.size() + v.size();
  }
  return 0;
}

Var apply_preconditioner(const Var& g, const PreconditionerParams& params,
                         ParamBinding& bind) {
  if (params.mode == PreconditionerMode::identity) return g;
  const std::size_t dim = g.shape().back();
  check_dim(params, dim);
  const Var diag =
      softplus(scale(bind(params.p), std::sqrt(static_cast<double>(dim))));
  Var out = g * diag;
  if (params.mode == PreconditionerMode::diag_low_rank) {
    const Var u = bind(params.u);
    const Var v = bind(params.v);
    // Row form of P g: g U V^T + g V U^T.
    out = out + matmul(matmul(g, u), v, false, true) +
          matmul(matmul(g, v), u, false, true);
  }
  return out;
}

Tensor apply_preconditioner(const Tensor& g, const PreconditionerParams& params) {
  if (params.mode == PreconditionerMode::identity) return g;
  Tape tape(false);
  ParamBinding bind(tape, false);
  const bool vector_input = g.rank() == 1;
  const Tensor rows = vector_input ? g.reshaped({1, g.size()}) : g;
  Tensor out = apply_preconditioner(tape.constant(rows), params, bind).value();
  return vector_input ? out.reshaped(g.shape()) : out;
}

Tensor materialize_preconditioner(const PreconditionerParams& params,
                                  std::size_t dim) {
  Tensor p = Tensor::identity(dim);
  if (params.mode == PreconditionerMode::identity) return p;
  check_dim(params, dim);
  const double root = std::sqrt(static_cast<double>(dim));
  for (std::size_t i = 0; i < dim; ++i) p.at(i, i) = softplus(root * params.p[i]);
  if (params.mode == PreconditionerMode::diag_low_rank) {
    p += matmul(params.u, params.v, false, true);
    p += matmul(params.v, params.u, false, true);
  }
  return p;
}

}  // namespace cem::layers
