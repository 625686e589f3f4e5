#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cem/energy.hpp"
#include "cem/params.hpp"
#include "cem/random.hpp"
#include "cem/tape.hpp"
#include "cem/tensor.hpp"

// Reference (untied) Transformer layers, their CEM counterparts, and the
// learned preconditioners. All sequence inputs are [J x D_h], one row per
// token, with causal masking over rows.
namespace cem::layers {

enum class DiagonalMode { none, shared, per_head };
enum class PreconditionerMode { identity, diagonal, diag_low_rank };
enum class Activation { silu, sigmoid, softplus };

const char* to_string(DiagonalMode mode);
const char* to_string(PreconditionerMode mode);
DiagonalMode diagonal_mode_from_string(const std::string& s);
PreconditionerMode preconditioner_mode_from_string(const std::string& s);

struct RmsNormParams {
  Tensor gain;
  double eps = 1e-6;

  static RmsNormParams ones(std::size_t dim, double eps = 1e-6);
};

// P = diag(softplus(sqrt(D_h) p)) + U V^T + V U^T
struct PreconditionerParams {
  PreconditionerMode mode = PreconditionerMode::identity;
  Tensor p;  // [D_h]
  Tensor u;  // [D_h x R]
  Tensor v;  // [D_h x R]

  // p = 1/sqrt(D_h) (so the diagonal starts at softplus(1)), U ~ N(0, 0.02^2),
  // V = 0.
  static PreconditionerParams init(PreconditionerMode mode, std::size_t dim,
                                   std::size_t rank, Rng& rng);
  std::size_t parameter_count() const;
};

// Head-specific linear position bias plus learnable self/cross offsets shared
// by all heads.
struct AlibiBias {
  std::vector<double> slopes;
  Tensor self_bias = Tensor::scalar(0.0);
  Tensor cross_bias = Tensor::scalar(0.0);

  static AlibiBias geometric(std::size_t heads);
  energy::AlibiParams to_energy() const;
};

// Per-head projections, each [D_r x D_h]. wo[k] is the k-th head block of
// the output projection.
struct ReferenceMhaParams {
  std::vector<Tensor> wq, wk, wv, wo;

  static ReferenceMhaParams init(std::size_t heads, std::size_t model_dim,
                                 std::size_t head_dim, double stddev, Rng& rng);
  std::size_t heads() const { return wq.size(); }
  std::size_t parameter_count() const;
};

struct GatedMlpParams {
  Tensor wg;  // [D_m x D_h]
  Tensor wu;  // [D_m x D_h]
  Tensor wd;  // [D_h x D_m]

  static GatedMlpParams init(std::size_t model_dim, std::size_t hidden_dim,
                             double stddev, Rng& rng);
  std::size_t parameter_count() const;
};

struct PlainMlpParams {
  Tensor w_in;   // [D_m x D_h]
  Tensor w_out;  // [D_h x D_m]

  static PlainMlpParams init(std::size_t model_dim, std::size_t hidden_dim,
                             double stddev, Rng& rng);
  std::size_t parameter_count() const;
};

// Tied attention: keys and values both come from wk, outputs project back
// through wq^T. There are no value or output matrices.
struct CemAttentionParams {
  std::vector<Tensor> wq, wk;  // [D_r x D_h] per head
  DiagonalMode diagonal = DiagonalMode::none;
  std::vector<Tensor> diag;    // [D_h]; one if shared, K if per-head
  std::vector<PreconditionerParams> precond;  // one per head
  std::optional<AlibiBias> alibi;
  std::optional<RmsNormParams> inner_norm;    // nullopt: identity
  double tau = 1.0;
  std::size_t steps = 1;
  Tensor step_size = Tensor::scalar(1.0);
  bool learn_step_size = false;

  std::size_t heads() const { return wq.size(); }
  std::size_t model_dim() const { return wq.front().dim(1); }
  // W^Q and W^K only.
  std::size_t core_parameter_count() const;
  void validate() const;
};

// Tied gated MLP: gate W, up V, down V^T.
struct CemMlpParams {
  Tensor w;  // [D_m x D_h]
  Tensor v;  // [D_m x D_h]
  PreconditionerParams precond;
  std::optional<RmsNormParams> inner_norm;
  std::size_t steps = 1;
  Tensor step_size = Tensor::scalar(1.0);
  bool learn_step_size = false;

  std::size_t model_dim() const { return w.dim(1); }
  std::size_t core_parameter_count() const { return w.size() + v.size(); }
  void validate() const;
};

// Called with the recursion state x^(t) for t = 0..T.
using StepObserver = std::function<void(std::size_t step, const Tensor& state)>;

struct RecursionOutput {
  Var state;   // x^(T)
  Var update;  // x^(T) - x^(0), accumulated step by step
};

Var rmsnorm(const Var& x, const RmsNormParams& params, ParamBinding& bind);
Tensor rmsnorm(const Tensor& x, const RmsNormParams& params);

// Row-wise P g without materializing P.
Var apply_preconditioner(const Var& g, const PreconditionerParams& params,
                         ParamBinding& bind);
Tensor apply_preconditioner(const Tensor& g, const PreconditionerParams& params);
Tensor materialize_preconditioner(const PreconditionerParams& params,
                                  std::size_t dim);

// sum_k W_k^O^T sum_{j<=i} softmax_j(k_j . q_i / tau + b_ijk) v_j
Var reference_mha(const Var& h, const ReferenceMhaParams& params, double tau,
                  ParamBinding& bind, const AlibiBias* alibi = nullptr);
Tensor reference_mha(const Tensor& h, const ReferenceMhaParams& params,
                     double tau);
// Conventional form: per-head outputs concatenated, then one [K D_r x D_h]
// output projection.
Tensor reference_mha_concat(const Tensor& h, const ReferenceMhaParams& params,
                            double tau);

// W^d ((W^g h) o sigma(W^u h))
Var reference_gated_mlp(const Var& h, const GatedMlpParams& params,
                        Activation sigma, ParamBinding& bind);
Tensor reference_gated_mlp(const Tensor& h, const GatedMlpParams& params,
                           Activation sigma);
// W_out sigma(W_in h)
Var plain_mlp(const Var& h, const PlainMlpParams& params, Activation sigma,
              ParamBinding& bind);

// Keys/values come from `context` once; each row of `x_init` is then updated
// `steps` times:
//   x <- x + eta sum_k P_k W_k^Q^T sum_j softmax_j(a_ijk) W_k^K h_j
//   a_ijk = (k_j . W_k^Q u_i + h_j^T D_k u_i) / tau + b_ijk,  u = norm(x)
RecursionOutput cem_attention(const Var& context, const Var& x_init,
                              const CemAttentionParams& params,
                              ParamBinding& bind,
                              const StepObserver& observer = nullptr);
Tensor cem_attention(const Tensor& context, const Tensor& x_init,
                     const CemAttentionParams& params,
                     const StepObserver& observer = nullptr);

// gamma = h W^T once, then x <- x + eta P (gamma o SiLU(norm(x) V^T)) V.
RecursionOutput cem_mlp(const Var& h, const CemMlpParams& params,
                        ParamBinding& bind,
                        const StepObserver& observer = nullptr);
Tensor cem_mlp(const Tensor& h, const CemMlpParams& params,
               const StepObserver& observer = nullptr);

void append_params(const std::string& prefix, ReferenceMhaParams& p,
                   ParamList& out);
void append_params(const std::string& prefix, GatedMlpParams& p,
                   ParamList& out);
void append_params(const std::string& prefix, PlainMlpParams& p,
                   ParamList& out);
void append_params(const std::string& prefix, CemAttentionParams& p,
                   ParamList& out);
void append_params(const std::string& prefix, CemMlpParams& p, ParamList& out);
void append_params(const std::string& prefix, RmsNormParams& p,
                   ParamList& out);

}  // namespace cem::layers
