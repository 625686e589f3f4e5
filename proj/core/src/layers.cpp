#include "cem/layers.hpp"

#include <cmath>

#include "cem/error.hpp"
#include "cem/ops.hpp"

namespace cem::layers {
namespace {

Var apply_activation(const Var& x, Activation sigma) {
  switch (sigma) {
    case Activation::silu:
      return silu(x);
    case Activation::sigmoid:
      return sigmoid(x);
    case Activation::softplus:
      return softplus(x);
  }
  return silu(x);
}

void require_rows(const Tensor& t, std::size_t dim, const char* what) {
  if (t.rank() != 2 || t.dim(1) != dim) {
    throw DimensionError(std::string(what) + ": expected [J x " +
                         std::to_string(dim) + "], got " +
                         shape_string(t.shape()));
  }
}

Tensor distance_bias(std::size_t n, double slope) {
  Tensor b({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = static_cast<double>(i > j ? i - j : j - i);
      b.at(i, j) = -slope * d;
    }
  }
  return b;
}

// b_self on the diagonal, b_cross elsewhere.
Var self_cross_bias(const AlibiBias& alibi, std::size_t n, ParamBinding& bind) {
  Tensor off({n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) off.at(i, i) = 0.0;
  return bind(alibi.self_bias) * bind.constant(Tensor::identity(n)) +
         bind(alibi.cross_bias) * bind.constant(std::move(off));
}

std::vector<Var> alibi_biases(const AlibiBias& alibi, std::size_t heads,
                              std::size_t n, ParamBinding& bind) {
  if (alibi.slopes.size() < heads) {
    throw ConfigError("alibi needs one slope per head");
  }
  const Var shared = self_cross_bias(alibi, n, bind);
  std::vector<Var> out;
  for (std::size_t k = 0; k < heads; ++k) {
    out.push_back(bind.constant(distance_bias(n, alibi.slopes[k])) + shared);
  }
  return out;
}

Var step_scale(const Tensor& step_size, bool learnable, ParamBinding& bind) {
  return learnable ? bind(step_size) : bind.constant(step_size);
}

void check_norm(const std::optional<RmsNormParams>& norm, std::size_t dim) {
  if (norm && norm->gain.size() != dim) {
    throw DimensionError("inner norm gain must have length " +
                         std::to_string(dim));
  }
}

}  // namespace

const char* to_string(DiagonalMode mode) {
  switch (mode) {
    case DiagonalMode::none:
      return "none";
    case DiagonalMode::shared:
      return "shared";
    case DiagonalMode::per_head:
      return "per_head";
  }
  return "none";
}

DiagonalMode diagonal_mode_from_string(const std::string& s) {
  if (s == "none") return DiagonalMode::none;
  if (s == "shared") return DiagonalMode::shared;
  if (s == "per_head") return DiagonalMode::per_head;
  throw ConfigError("unknown diagonal mode '" + s +
                    "' (expected none, shared or per_head)");
}

RmsNormParams RmsNormParams::ones(std::size_t dim, double eps) {
  return RmsNormParams{Tensor({dim}, 1.0), eps};
}

AlibiBias AlibiBias::geometric(std::size_t heads) {
  AlibiBias a;
  a.slopes = energy::AlibiParams::geometric(heads).slopes;
  return a;
}

energy::AlibiParams AlibiBias::to_energy() const {
  return energy::AlibiParams{slopes, self_bias.item(), cross_bias.item()};
}

ReferenceMhaParams ReferenceMhaParams::init(std::size_t heads,
                                            std::size_t model_dim,
                                            std::size_t head_dim,
                                            double stddev, Rng& rng) {
  ReferenceMhaParams p;
  for (std::size_t k = 0; k < heads; ++k) {
    p.wq.push_back(rng.normal_tensor({head_dim, model_dim}, stddev));
    p.wk.push_back(rng.normal_tensor({head_dim, model_dim}, stddev));
    p.wv.push_back(rng.normal_tensor({head_dim, model_dim}, stddev));
    p.wo.push_back(rng.normal_tensor({head_dim, model_dim}, stddev));
  }
  return p;
}

std::size_t ReferenceMhaParams::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t k = 0; k < heads(); ++k) {
    n += wq[k].size() + wk[k].size() + wv[k].size() + wo[k].size();
  }
  return n;
}

GatedMlpParams GatedMlpParams::init(std::size_t model_dim,
                                    std::size_t hidden_dim, double stddev,
                                    Rng& rng) {
  return GatedMlpParams{rng.normal_tensor({hidden_dim, model_dim}, stddev),
                        rng.normal_tensor({hidden_dim, model_dim}, stddev),
                        rng.normal_tensor({model_dim, hidden_dim}, stddev)};
}

std::size_t GatedMlpParams::parameter_count() const {
  return wg.size() + wu.size() + wd.size();
}

PlainMlpParams PlainMlpParams::init(std::size_t model_dim,
                                    std::size_t hidden_dim, double stddev,
                                    Rng& rng) {
  return PlainMlpParams{rng.normal_tensor({hidden_dim, model_dim}, stddev),
                        rng.normal_tensor({model_dim, hidden_dim}, stddev)};
}

std::size_t PlainMlpParams::parameter_count() const {
  return w_in.size() + w_out.size();
}

std::size_t CemAttentionParams::core_parameter_count() const {
  std::size_t n = 0;
  for (std::size_t k = 0; k < heads(); ++k) n += wq[k].size() + wk[k].size();
  return n;
}

void CemAttentionParams::validate() const {
  if (wq.empty() || wq.size() != wk.size()) {
    throw ConfigError("CEM attention needs matching W^Q/W^K per head");
  }
  const Shape head_shape = wq.front().shape();
  if (head_shape.size() != 2) {
    throw DimensionError("head projections must be matrices");
  }
  for (std::size_t k = 0; k < heads(); ++k) {
    if (wq[k].shape() != head_shape || wk[k].shape() != head_shape) {
      throw DimensionError("all head projections must share shape " +
                           shape_string(head_shape));
    }
  }
  const std::size_t expected_diag =
      diagonal == DiagonalMode::none ? 0
      : diagonal == DiagonalMode::shared ? 1
                                         : heads();
  if (diag.size() != expected_diag) {
    throw ConfigError(std::string("diagonal mode ") + to_string(diagonal) +
                      " expects " + std::to_string(expected_diag) +
                      " diagonal vectors, got " + std::to_string(diag.size()));
  }
  for (const Tensor& d : diag) {
    if (d.size() != model_dim()) {
      throw DimensionError("diagonal vectors must have length D_h");
    }
  }
  if (!precond.empty() && precond.size() != heads()) {
    throw ConfigError("need one preconditioner per head");
  }
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  if (steps == 0) throw ConfigError("recursion steps must be >= 1");
  check_norm(inner_norm, model_dim());
}

void CemMlpParams::validate() const {
  if (w.rank() != 2 || w.shape() != v.shape()) {
    throw DimensionError("W and V must share shape [D_m x D_h], got " +
                         shape_string(w.shape()) + " and " +
                         shape_string(v.shape()));
  }
  if (steps == 0) throw ConfigError("recursion steps must be >= 1");
  check_norm(inner_norm, model_dim());
}

Var rmsnorm(const Var& x, const RmsNormParams& params, ParamBinding& bind) {
  if (!(params.eps > 0.0)) throw ConfigError("RMSNorm eps must be positive");
  const Var inv_rms = rsqrt(shift(mean_lastdim(square(x)), params.eps));
  return x * inv_rms * bind(params.gain);
}

Tensor rmsnorm(const Tensor& x, const RmsNormParams& params) {
  Tape tape(false);
  ParamBinding bind(tape, false);
  return rmsnorm(tape.constant(x), params, bind).value();
}

Var reference_mha(const Var& h, const ReferenceMhaParams& params, double tau,
                  ParamBinding& bind, const AlibiBias* alibi) {
  if (params.heads() == 0) throw ConfigError("reference MHA needs heads");
  const std::size_t model_dim = params.wq.front().dim(1);
  require_rows(h.value(), model_dim, "reference_mha");
  const std::size_t n = h.value().dim(0);
  std::vector<Var> biases;
  if (alibi) biases = alibi_biases(*alibi, params.heads(), n, bind);

  Var out;
  for (std::size_t k = 0; k < params.heads(); ++k) {
    const Var q = matmul(h, bind(params.wq[k]), false, true);
    const Var key = matmul(h, bind(params.wk[k]), false, true);
    const Var value = matmul(h, bind(params.wv[k]), false, true);
    Var scores = scale(matmul(q, key, false, true), 1.0 / tau);
    if (alibi) scores = scores + biases[k];
    const Var weights = softmax_lastdim(scores, Mask::causal());
    const Var head = matmul(matmul(weights, value), bind(params.wo[k]));
    out = out.valid() ? out + head : head;
  }
  return out;
}

Tensor reference_mha(const Tensor& h, const ReferenceMhaParams& params,
                     double tau) {
  Tape tape(false);
  ParamBinding bind(tape, false);
  return reference_mha(tape.constant(h), params, tau, bind).value();
}

Tensor reference_mha_concat(const Tensor& h, const ReferenceMhaParams& params,
                            double tau) {
  std::vector<Tensor> heads;
  std::vector<Tensor> out_blocks;
  for (std::size_t k = 0; k < params.heads(); ++k) {
    const Tensor q = matmul(h, params.wq[k], false, true);
    const Tensor key = matmul(h, params.wk[k], false, true);
    const Tensor value = matmul(h, params.wv[k], false, true);
    Tensor scores = matmul(q, key, false, true);
    scores *= 1.0 / tau;
    heads.push_back(matmul(softmax_lastdim(scores, Mask::causal()), value));
    out_blocks.push_back(params.wo[k]);
  }
  // W^O = [W_1^O; ...; W_K^O] stacked along rows.
  const std::size_t head_dim = params.wo.front().dim(0);
  const std::size_t model_dim = params.wo.front().dim(1);
  Tensor wo({params.heads() * head_dim, model_dim});
  for (std::size_t k = 0; k < params.heads(); ++k) {
    for (std::size_t r = 0; r < head_dim; ++r) {
      auto src = out_blocks[k].row(r);
      std::copy(src.begin(), src.end(), wo.row(k * head_dim + r).begin());
    }
  }
  return matmul(concat_cols(heads), wo);
}

Var reference_gated_mlp(const Var& h, const GatedMlpParams& params,
                        Activation sigma, ParamBinding& bind) {
  require_rows(h.value(), params.wg.dim(1), "reference_gated_mlp");
  const Var gate = matmul(h, bind(params.wg), false, true);
  const Var up = apply_activation(matmul(h, bind(params.wu), false, true), sigma);
  return matmul(gate * up, bind(params.wd), false, true);
}

Tensor reference_gated_mlp(const Tensor& h, const GatedMlpParams& params,
                           Activation sigma) {
  Tape tape(false);
  ParamBinding bind(tape, false);
  return reference_gated_mlp(tape.constant(h), params, sigma, bind).value();
}

Var plain_mlp(const Var& h, const PlainMlpParams& params, Activation sigma,
              ParamBinding& bind) {
  require_rows(h.value(), params.w_in.dim(1), "plain_mlp");
  const Var hidden =
      apply_activation(matmul(h, bind(params.w_in), false, true), sigma);
  return matmul(hidden, bind(params.w_out), false, true);
}

RecursionOutput cem_attention(const Var& context, const Var& x_init,
                              const CemAttentionParams& params,
                              ParamBinding& bind, const StepObserver& observer) {
  params.validate();
  const std::size_t dim = params.model_dim();
  require_rows(context.value(), dim, "cem_attention context");
  require_rows(x_init.value(), dim, "cem_attention x_init");
  const std::size_t n = context.value().dim(0);
  if (x_init.value().dim(0) != n) {
    throw DimensionError("cem_attention: context has " + std::to_string(n) +
                         " rows but x_init has " +
                         std::to_string(x_init.value().dim(0)));
  }
  const std::size_t heads = params.heads();
  const double inv_tau = 1.0 / params.tau;

  // Frozen across the recursion: keys (= values), diagonals, position bias.
  std::vector<Var> keys;
  for (std::size_t k = 0; k < heads; ++k) {
    keys.push_back(matmul(context, bind(params.wk[k]), false, true));
  }
  std::vector<Var> diags;
  for (const Tensor& d : params.diag) diags.push_back(bind(d));
  std::vector<Var> biases;
  if (params.alibi) biases = alibi_biases(*params.alibi, heads, n, bind);
  const Var eta = step_scale(params.step_size, params.learn_step_size, bind);

  Var x = x_init;
  Var update;
  if (observer) observer(0, x.value());
  for (std::size_t t = 0; t < params.steps; ++t) {
    const Var u = params.inner_norm ? rmsnorm(x, *params.inner_norm, bind) : x;
    Var shared_diag_scores;
    if (params.diagonal == DiagonalMode::shared) {
      shared_diag_scores = matmul(u * diags[0], context, false, true);
    }
    Var total;
    for (std::size_t k = 0; k < heads; ++k) {
      const Var wq = bind(params.wq[k]);
      Var scores = matmul(matmul(u, wq, false, true), keys[k], false, true);
      if (params.diagonal == DiagonalMode::shared) {
        scores = scores + shared_diag_scores;
      } else if (params.diagonal == DiagonalMode::per_head) {
        scores = scores + matmul(u * diags[k], context, false, true);
      }
      scores = scale(scores, inv_tau);
      if (params.alibi) scores = scores + biases[k];
      const Var weights = softmax_lastdim(scores, Mask::causal());
      Var contrib = matmul(matmul(weights, keys[k]), wq);
      if (!params.precond.empty()) {
        contrib = apply_preconditioner(contrib, params.precond[k], bind);
      }
      total = total.valid() ? total + contrib : contrib;
    }
    const Var step = total * eta;
    x = x + step;
    update = update.valid() ? update + step : step;
    if (observer) observer(t + 1, x.value());
  }
  return RecursionOutput{x, update};
}

Tensor cem_attention(const Tensor& context, const Tensor& x_init,
                     const CemAttentionParams& params,
                     const StepObserver& observer) {
  Tape tape(false);
  ParamBinding bind(tape, false);
  return cem_attention(tape.constant(context), tape.constant(x_init), params,
                       bind, observer)
      .state.value();
}

RecursionOutput cem_mlp(const Var& h, const CemMlpParams& params,
                        ParamBinding& bind, const StepObserver& observer) {
  params.validate();
  require_rows(h.value(), params.model_dim(), "cem_mlp");
  const Var v = bind(params.v);
  const Var gamma = matmul(h, bind(params.w), false, true);
  const Var eta = step_scale(params.step_size, params.learn_step_size, bind);

  Var x = h;
  Var update;
  if (observer) observer(0, x.value());
  for (std::size_t t = 0; t < params.steps; ++t) {
    const Var u = params.inner_norm ? rmsnorm(x, *params.inner_norm, bind) : x;
    const Var g = matmul(gamma * silu(matmul(u, v, false, true)), v);
    const Var step = apply_preconditioner(g, params.precond, bind) * eta;
    x = x + step;
    update = update.valid() ? update + step : step;
    if (observer) observer(t + 1, x.value());
  }
  return RecursionOutput{x, update};
}

Tensor cem_mlp(const Tensor& h, const CemMlpParams& params,
               const StepObserver& observer) {
  Tape tape(false);
  ParamBinding bind(tape, false);
  return cem_mlp(tape.constant(h), params, bind, observer).state.value();
}

void append_params(const std::string& prefix, ReferenceMhaParams& p,
                   ParamList& out) {
  for (std::size_t k = 0; k < p.heads(); ++k) {
    const std::string i = std::to_string(k);
    out.push_back({prefix + ".wq." + i, &p.wq[k], ParamGroup::attention, true});
    out.push_back({prefix + ".wk." + i, &p.wk[k], ParamGroup::attention, true});
    out.push_back({prefix + ".wv." + i, &p.wv[k], ParamGroup::attention, true});
    out.push_back({prefix + ".wo." + i, &p.wo[k], ParamGroup::attention, true});
  }
}

void append_params(const std::string& prefix, GatedMlpParams& p,
                   ParamList& out) {
  out.push_back({prefix + ".wg", &p.wg, ParamGroup::mlp, true});
  out.push_back({prefix + ".wu", &p.wu, ParamGroup::mlp, true});
  out.push_back({prefix + ".wd", &p.wd, ParamGroup::mlp, true});
}

void append_params(const std::string& prefix, PlainMlpParams& p,
                   ParamList& out) {
  out.push_back({prefix + ".w_in", &p.w_in, ParamGroup::mlp, true});
  out.push_back({prefix + ".w_out", &p.w_out, ParamGroup::mlp, true});
}

void append_params(const std::string& prefix, RmsNormParams& p,
                   ParamList& out) {
  out.push_back({prefix + ".gain", &p.gain, ParamGroup::norms, false});
}

namespace {

void append_preconditioner(const std::string& prefix, PreconditionerParams& p,
                           ParamList& out) {
  if (p.mode == PreconditionerMode::identity) return;
  out.push_back({prefix + ".p", &p.p, ParamGroup::preconditioners, false});
  if (p.mode == PreconditionerMode::diag_low_rank) {
    out.push_back({prefix + ".u", &p.u, ParamGroup::preconditioners, false});
    out.push_back({prefix + ".v", &p.v, ParamGroup::preconditioners, false});
  }
}

}  // namespace

void append_params(const std::string& prefix, CemAttentionParams& p,
                   ParamList& out) {
  for (std::size_t k = 0; k < p.heads(); ++k) {
    const std::string i = std::to_string(k);
    out.push_back({prefix + ".wq." + i, &p.wq[k], ParamGroup::attention, true});
    out.push_back({prefix + ".wk." + i, &p.wk[k], ParamGroup::attention, true});
  }
  for (std::size_t k = 0; k < p.diag.size(); ++k) {
    out.push_back({prefix + ".diag." + std::to_string(k), &p.diag[k],
                   ParamGroup::attention, true});
  }
  if (p.alibi) {
    out.push_back({prefix + ".alibi.self", &p.alibi->self_bias,
                   ParamGroup::attention, false});
    out.push_back({prefix + ".alibi.cross", &p.alibi->cross_bias,
                   ParamGroup::attention, false});
  }
  if (p.learn_step_size) {
    out.push_back(
        {prefix + ".step_size", &p.step_size, ParamGroup::attention, false});
  }
  for (std::size_t k = 0; k < p.precond.size(); ++k) {
    append_preconditioner(prefix + ".precond." + std::to_string(k),
                          p.precond[k], out);
  }
  if (p.inner_norm) append_params(prefix + ".inner_norm", *p.inner_norm, out);
}

void append_params(const std::string& prefix, CemMlpParams& p, ParamList& out) {
  out.push_back({prefix + ".w", &p.w, ParamGroup::mlp, true});
  out.push_back({prefix + ".v", &p.v, ParamGroup::mlp, true});
  if (p.learn_step_size) {
    out.push_back({prefix + ".step_size", &p.step_size, ParamGroup::mlp, false});
  }
  append_preconditioner(prefix + ".precond", p.precond, out);
  if (p.inner_norm) append_params(prefix + ".inner_norm", *p.inner_norm, out);
}

}  // namespace cem::layers
