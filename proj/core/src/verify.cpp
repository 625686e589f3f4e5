#include "cem/verify.hpp"

#include <algorithm>
#include <cmath>

#include "cem/error.hpp"
#include "cem/ops.hpp"

namespace cem::verify {
namespace {

constexpr double kStationaryGradNorm = 1e-8;

std::size_t pick(Rng& rng, std::initializer_list<std::size_t> options) {
  return *(options.begin() + rng.index(options.size()));
}

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  return rng.normal_tensor({rows, cols}, scale / std::sqrt(static_cast<double>(cols)));
}

layers::CemAttentionParams equivalence_attention(Rng& rng, std::size_t heads,
                                                 std::size_t dim, std::size_t rank) {
  layers::CemAttentionParams p;
  for (std::size_t k = 0; k < heads; ++k) {
    p.wq.push_back(random_matrix(rng, rank, dim, 1.0));
    p.wk.push_back(random_matrix(rng, rank, dim, 1.0));
  }
  p.tau = std::sqrt(static_cast<double>(rank));
  return p;
}

energy::InteractionEnergySpec to_energy_spec(const layers::CemAttentionParams& p) {
  energy::InteractionEnergySpec spec;
  spec.form = energy::InteractionForm::low_rank;
  spec.tau = p.tau;
  for (std::size_t k = 0; k < p.heads(); ++k) {
    energy::HeadInteraction h;
    h.wq = p.wq[k];
    h.wk = p.wk[k];
    spec.heads.push_back(std::move(h));
  }
  if (p.alibi) spec.alibi = p.alibi->to_energy();
  return spec;
}

void require_pure_gradient(bool inner_norm, bool identity) {
  if (inner_norm || !identity) {
    throw ConfigError("descent monitoring needs the inner norm bypassed and P = I");
  }
}

double max_abs_rows(const Tensor& a, const Tensor& b, std::size_t rows) {
  double worst = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto x = a.row(r);
    auto y = b.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) worst = std::max(worst, std::abs(x[c] - y[c]));
  }
  return worst;
}

void randomize(model::Model& m, Rng& rng, double scale) {
  for (const ParamRef& p : m.parameters()) {
    for (double& v : p.tensor->data()) v += rng.normal(0.0, scale);
  }
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step) {
  Tensor probe = x;
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = f(probe);
    probe[i] = x[i] - step;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError("finite differences hit a non-finite value at coordinate " +
                        std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const TensorCheck& t : tensors) worst = std::max(worst, t.max_rel_error);
  return worst;
}

void to_json(nlohmann::json& j, const GradCheckReport& r) {
  j = nlohmann::json{{"step", r.step}, {"max_rel_error", r.max_rel_error()}};
  auto& list = j["tensors"] = nlohmann::json::array();
  for (const TensorCheck& t : r.tensors) {
    list.push_back({{"name", t.name},
                    {"checked", t.checked},
                    {"max_rel_error", t.max_rel_error},
                    {"worst_index", t.worst_index},
                    {"analytic", t.analytic},
                    {"numeric", t.numeric}});
  }
}

GradCheckReport check_model_gradients(model::Model& m, const ModelLoss& loss,
                                      std::size_t max_coords, std::uint64_t seed,
                                      double step) {
  Tape tape;
  ParamBinding bind(tape);
  const Var root = loss(m, bind);
  const Gradients grads = tape.backward(root);

  auto evaluate = [&]() {
    Tape t(false);
    ParamBinding b(t, false);
    return loss(m, b).value().item();
  };

  Rng rng(seed);
  GradCheckReport report;
  report.step = step;
  for (const ParamRef& p : m.parameters()) {
    const auto v = bind.find(*p.tensor);
    const Tensor analytic = v ? grads[*v] : Tensor::zeros_like(*p.tensor);
    Tensor& param = *p.tensor;
    std::vector<std::size_t> coords;
    if (param.size() <= max_coords) {
      for (std::size_t i = 0; i < param.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < max_coords; ++i) coords.push_back(rng.index(param.size()));
    }
    TensorCheck check;
    check.name = p.name;
    for (std::size_t i : coords) {
      const double saved = param[i];
      param[i] = saved + step;
      const double up = evaluate();
      param[i] = saved - step;
      const double down = evaluate();
      param[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw OracleError("non-finite loss probing " + p.name);
      }
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[i], numeric);
      ++check.checked;
      if (err >= check.max_rel_error) {
        check.max_rel_error = err;
        check.worst_index = i;
        check.analytic = analytic[i];
        check.numeric = numeric;
      }
    }
    report.tensors.push_back(std::move(check));
  }
  return report;
}

model::Model random_cem_stack(std::uint64_t seed, std::size_t vocab) {
  model::ModelConfig cfg;
  cfg.head = model::TaskHead::lm_logits;
  cfg.vocab = vocab;
  cfg.layers = 2;
  auto& b = cfg.block;
  b.model_dim = 8;
  b.heads = 2;
  b.head_dim = 4;
  b.hidden_dim = 16;
  b.attn_steps = 2;
  b.mlp_steps = 2;
  b.diagonal = layers::DiagonalMode::shared;
  b.attn_precond = layers::PreconditionerMode::diag_low_rank;
  b.mlp_precond = layers::PreconditionerMode::diag_low_rank;
  b.attn_precond_rank = 2;
  b.mlp_precond_rank = 4;
  b.alibi = true;
  b.inner_norm = true;
  b.init_std = 0.3;
  model::Model m = model::build_model(cfg, seed);
  Rng rng(seed ^ 0xA5A5A5A5ULL);
  randomize(m, rng, 0.1);
  return m;
}

void to_json(nlohmann::json& j, const CheckResult& r) {
  j = nlohmann::json{{"name", r.name},         {"passed", r.passed},
                     {"instances", r.instances}, {"worst", r.worst},
                     {"tolerance", r.tolerance}, {"worst_seed", r.worst_seed}};
  if (!r.detail.empty()) j["detail"] = r.detail;
}

CheckResult tied_attention_equivalence(std::size_t configs, std::uint64_t seed,
                                       double tolerance, bool untie) {
  CheckResult out;
  out.name = untie ? "tied_attention_equivalence(untied control)" : "tied_attention_equivalence";
  out.tolerance = tolerance;
  for (std::size_t c = 0; c < configs; ++c) {
    const std::uint64_t s = seed + c;
    Rng rng(s);
    const std::size_t heads = pick(rng, {1, 2, 4});
    const std::size_t dim = pick(rng, {8, 16});
    const std::size_t rank = dim / heads;
    const std::size_t len = 1 + rng.index(16);
    const Tensor h = rng.normal_tensor({len, dim});
    const layers::CemAttentionParams p = equivalence_attention(rng, heads, dim, rank);

    layers::ReferenceMhaParams ref;
    ref.wq = p.wq;
    ref.wk = p.wk;
    ref.wv = p.wk;
    ref.wo = p.wq;
    if (untie) {
      for (Tensor& w : ref.wv) w = random_matrix(rng, rank, dim, 1.0);
    }
    const Tensor update = layers::cem_attention(h, h, p) - h;
    const double dev = max_abs_diff(update, layers::reference_mha(h, ref, p.tau));
    ++out.instances;
    if (dev >= out.worst) {
      out.worst = dev;
      out.worst_seed = s;
    }
  }
  out.passed = out.worst <= tolerance;
  return out;
}

CheckResult tied_mlp_equivalence(std::size_t configs, std::uint64_t seed, double tolerance,
                                 bool untie) {
  CheckResult out;
  out.name = untie ? "tied_mlp_equivalence(untied control)" : "tied_mlp_equivalence";
  out.tolerance = tolerance;
  for (std::size_t c = 0; c < configs; ++c) {
    const std::uint64_t s = seed + c;
    Rng rng(s);
    const std::size_t dim = pick(rng, {8, 16});
    const std::size_t hidden = dim * pick(rng, {1, 2, 4});
    const std::size_t len = 1 + rng.index(16);
    const Tensor h = rng.normal_tensor({len, dim});
    layers::CemMlpParams p;
    p.w = random_matrix(rng, hidden, dim, 1.0);
    p.v = random_matrix(rng, hidden, dim, 1.0);
    layers::GatedMlpParams ref{p.w, p.v, transpose(p.v)};
    if (untie) ref.wu = random_matrix(rng, hidden, dim, 1.0);
    const Tensor update = layers::cem_mlp(h, p) - h;
    const double dev =
        max_abs_diff(update, layers::reference_gated_mlp(h, ref, layers::Activation::silu));
    ++out.instances;
    if (dev >= out.worst) {
      out.worst = dev;
      out.worst_seed = s;
    }
  }
  out.passed = out.worst <= tolerance;
  return out;
}

CheckResult concat_equivalence(std::size_t instances, std::uint64_t seed, double tolerance) {
  CheckResult out;
  out.name = "concat_equivalence";
  out.tolerance = tolerance;
  for (std::size_t c = 0; c < instances; ++c) {
    const std::uint64_t s = seed + c;
    Rng rng(s);
    const std::size_t heads = 1 + rng.index(4);
    const std::size_t dim = pick(rng, {4, 8, 16});
    const std::size_t rank = 1 + rng.index(dim);
    const std::size_t len = 1 + rng.index(12);
    const Tensor h = rng.normal_tensor({len, dim});
    const auto p = layers::ReferenceMhaParams::init(heads, dim, rank,
                                                    1.0 / std::sqrt(static_cast<double>(dim)), rng);
    const double tau = std::sqrt(static_cast<double>(rank));
    const double dev =
        max_abs_diff(layers::reference_mha(h, p, tau), layers::reference_mha_concat(h, p, tau));
    ++out.instances;
    if (dev >= out.worst) {
      out.worst = dev;
      out.worst_seed = s;
    }
  }
  out.passed = out.worst <= tolerance;
  return out;
}

energy::InteractionEnergySpec random_interaction_spec(Rng& rng, std::size_t heads,
                                                      std::size_t dim) {
  energy::InteractionEnergySpec spec;
  spec.form = static_cast<energy::InteractionForm>(rng.index(3));
  const std::size_t rank = std::max<std::size_t>(1, dim / heads);
  spec.tau = std::sqrt(static_cast<double>(rank));
  for (std::size_t k = 0; k < heads; ++k) {
    energy::HeadInteraction h;
    if (spec.form == energy::InteractionForm::full) {
      h.full = random_matrix(rng, dim, dim, 1.0);
    } else {
      h.wq = random_matrix(rng, rank, dim, 1.0);
      h.wk = random_matrix(rng, rank, dim, 1.0);
      if (spec.form == energy::InteractionForm::diag_low_rank) {
        h.diag = rng.normal_tensor({dim}, 0.5);
      }
    }
    spec.heads.push_back(std::move(h));
  }
  if (rng.index(2) == 1) {
    energy::AlibiParams alibi = energy::AlibiParams::geometric(heads);
    alibi.b_self = rng.normal(0.0, 0.5);
    alibi.b_cross = rng.normal(0.0, 0.5);
    spec.alibi = alibi;
  }
  return spec;
}

energy::ElementwiseEnergySpec random_elementwise_spec(Rng& rng, std::size_t dim) {
  return {random_matrix(rng, 2 * dim, dim, 1.0), random_matrix(rng, 2 * dim, dim, 1.0)};
}

CheckResult interaction_gradient_identity(std::size_t instances, std::uint64_t seed,
                                          double tolerance) {
  CheckResult out;
  out.name = "interaction_gradient_identity";
  out.tolerance = tolerance;
  for (std::size_t c = 0; c < instances; ++c) {
    const std::uint64_t s = seed + c;
    Rng rng(s);
    const std::size_t heads = pick(rng, {1, 2, 4});
    const std::size_t dim = pick(rng, {4, 8, 16});
    const std::size_t i = 1 + rng.index(8);
    const auto spec = random_interaction_spec(rng, heads, dim);
    const Tensor history = rng.normal_tensor({i, dim});
    const Tensor x = rng.normal_tensor({dim});
    const Tensor analytic = energy::interaction_energy_grad(x.data(), history, spec, i);
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& p) { return energy::interaction_energy(p.data(), history, spec, i); },
        x);
    ++out.instances;
    for (std::size_t d = 0; d < dim; ++d) {
      const double err = relative_error(analytic[d], numeric[d]);
      if (err >= out.worst) {
        out.worst = err;
        out.worst_seed = s;
      }
    }
  }
  out.passed = out.worst <= tolerance;
  return out;
}

CheckResult elementwise_gradient_identity(std::size_t instances, std::uint64_t seed,
                                          double tolerance) {
  CheckResult out;
  out.name = "elementwise_gradient_identity";
  out.tolerance = tolerance;
  for (std::size_t c = 0; c < instances; ++c) {
    const std::uint64_t s = seed + c;
    Rng rng(s);
    const std::size_t dim = pick(rng, {4, 8, 16});
    const auto spec = random_elementwise_spec(rng, dim);
    const Tensor h = rng.normal_tensor({dim});
    const Tensor x = rng.normal_tensor({dim});
    const Tensor analytic = energy::elementwise_energy_grad(x.data(), h.data(), spec);
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& p) { return energy::elementwise_energy(p.data(), h.data(), spec); },
        x);
    ++out.instances;
    for (std::size_t d = 0; d < dim; ++d) {
      const double err = relative_error(analytic[d], numeric[d]);
      if (err >= out.worst) {
        out.worst = err;
        out.worst_seed = s;
      }
    }
  }
  out.passed = out.worst <= tolerance;
  return out;
}

const char* to_string(DescentVerdict v) {
  switch (v) {
    case DescentVerdict::descending:
      return "descending";
    case DescentVerdict::stationary:
      return "stationary";
    case DescentVerdict::failed:
      return "failed";
  }
  return "failed";
}

DescentTrace descent_trace(const DescentProblem& problem, double initial_eta,
                           double min_eta) {
  DescentTrace trace;
  for (double eta = initial_eta; eta >= min_eta; eta *= 0.5) {
    const std::vector<Tensor> states = problem.recursion(eta);
    trace.energies.clear();
    for (const Tensor& x : states) trace.energies.push_back(problem.energy(x));
    trace.step_size = eta;
    bool all_stationary = true;
    bool ok = true;
    for (std::size_t t = 0; t + 1 < states.size(); ++t) {
      if (l2_norm(problem.gradient(states[t])) <= kStationaryGradNorm) continue;
      all_stationary = false;
      if (!(trace.energies[t + 1] < trace.energies[t])) {
        ok = false;
        break;
      }
    }
    if (all_stationary) {
      trace.verdict = DescentVerdict::stationary;
      return trace;
    }
    if (ok) {
      trace.verdict = DescentVerdict::descending;
      return trace;
    }
  }
  trace.verdict = DescentVerdict::failed;
  return trace;
}

DescentProblem attention_descent_problem(const Tensor& context,
                                         const layers::CemAttentionParams& params,
                                         bool flip_sign) {
  bool identity = params.diagonal == layers::DiagonalMode::none;
  for (const auto& p : params.precond) {
    identity = identity && p.mode == layers::PreconditionerMode::identity;
  }
  require_pure_gradient(params.inner_norm.has_value(), identity);
  const std::size_t i = context.dim(0);
  const auto spec = to_energy_spec(params);
  DescentProblem problem;
  problem.recursion = [context, params, flip_sign, i](double eta) {
    layers::CemAttentionParams p = params;
    p.step_size = Tensor::scalar(flip_sign ? -eta : eta);
    std::vector<Tensor> states;
    layers::cem_attention(context, context, p, [&](std::size_t, const Tensor& x) {
      auto last = x.row(i - 1);
      states.push_back(Tensor::vector(std::vector<double>(last.begin(), last.end())));
    });
    return states;
  };
  problem.energy = [context, spec, i](const Tensor& x) {
    return energy::interaction_energy(x.data(), context, spec, i);
  };
  problem.gradient = [context, spec, i](const Tensor& x) {
    return energy::interaction_energy_grad(x.data(), context, spec, i);
  };
  return problem;
}

DescentProblem mlp_descent_problem(const Tensor& h, const layers::CemMlpParams& params,
                                   bool flip_sign) {
  require_pure_gradient(params.inner_norm.has_value(),
                        params.precond.mode == layers::PreconditionerMode::identity);
  const Tensor row = h.rank() == 1 ? h.reshaped({1, h.size()}) : h;
  if (row.dim(0) != 1) throw DimensionError("mlp descent monitors a single token");
  const energy::ElementwiseEnergySpec spec{params.w, params.v};
  const Tensor h_vec = row.reshaped({row.size()});
  DescentProblem problem;
  problem.recursion = [row, params, flip_sign](double eta) {
    layers::CemMlpParams p = params;
    p.step_size = Tensor::scalar(flip_sign ? -eta : eta);
    std::vector<Tensor> states;
    layers::cem_mlp(row, p, [&](std::size_t, const Tensor& x) {
      states.push_back(x.reshaped({x.size()}));
    });
    return states;
  };
  problem.energy = [spec, h_vec](const Tensor& x) {
    return energy::elementwise_energy(x.data(), h_vec.data(), spec);
  };
  problem.gradient = [spec, h_vec](const Tensor& x) {
    return energy::elementwise_energy_grad(x.data(), h_vec.data(), spec);
  };
  return problem;
}

CheckResult attention_descent(std::size_t instances, std::uint64_t seed, std::size_t steps,
                              bool flip_sign) {
  CheckResult out;
  out.name = flip_sign ? "attention_descent(sign-flip mutant detected)" : "attention_descent";
  out.tolerance = 1e-8;
  std::size_t good = 0;
  double smallest_eta = 1.0;
  for (std::size_t c = 0; c < instances; ++c) {
    const std::uint64_t s = seed + c;
    Rng rng(s);
    const std::size_t heads = pick(rng, {1, 2, 4});
    const std::size_t dim = pick(rng, {4, 8, 16});
    const std::size_t rank = std::max<std::size_t>(1, dim / heads);
    const std::size_t i = 1 + rng.index(8);
    layers::CemAttentionParams p = equivalence_attention(rng, heads, dim, rank);
    p.steps = steps;
    if (rng.index(2) == 1) {
      p.alibi = layers::AlibiBias::geometric(heads);
      p.alibi->self_bias = Tensor::scalar(rng.normal(0.0, 0.5));
      p.alibi->cross_bias = Tensor::scalar(rng.normal(0.0, 0.5));
    }
    const Tensor context = rng.normal_tensor({i, dim});
    const DescentTrace trace =
        descent_trace(attention_descent_problem(context, p, flip_sign));
    const bool success = flip_sign ? trace.verdict == DescentVerdict::failed
                                   : trace.verdict == DescentVerdict::descending;
    if (success) {
      ++good;
      if (!flip_sign) smallest_eta = std::min(smallest_eta, trace.step_size);
    } else {
      out.worst_seed = s;
    }
    ++out.instances;
  }
  out.worst = flip_sign ? 0.0 : smallest_eta;
  out.passed = good == instances;
  out.detail = std::to_string(good) + "/" + std::to_string(instances) + " instances";
  return out;
}

CheckResult mlp_descent(std::size_t instances, std::uint64_t seed, std::size_t steps,
                        bool flip_sign) {
  CheckResult out;
  out.name = flip_sign ? "mlp_descent(sign-flip mutant detected)" : "mlp_descent";
  out.tolerance = 1e-8;
  std::size_t good = 0;
  double smallest_eta = 1.0;
  for (std::size_t c = 0; c < instances; ++c) {
    const std::uint64_t s = seed + c;
    Rng rng(s);
    const std::size_t dim = pick(rng, {4, 8, 16});
    layers::CemMlpParams p;
    p.w = random_matrix(rng, 2 * dim, dim, 1.0);
    p.v = random_matrix(rng, 2 * dim, dim, 1.0);
    p.steps = steps;
    const Tensor h = rng.normal_tensor({1, dim});
    const DescentTrace trace = descent_trace(mlp_descent_problem(h, p, flip_sign));
    const bool success = flip_sign ? trace.verdict == DescentVerdict::failed
                                   : trace.verdict == DescentVerdict::descending;
    if (success) {
      ++good;
      if (!flip_sign) smallest_eta = std::min(smallest_eta, trace.step_size);
    } else {
      out.worst_seed = s;
    }
    ++out.instances;
  }
  out.worst = flip_sign ? 0.0 : smallest_eta;
  out.passed = good == instances;
  out.detail = std::to_string(good) + "/" + std::to_string(instances) + " instances";
  return out;
}

CheckResult causality_check(std::size_t instances, std::uint64_t seed, double tolerance) {
  CheckResult out;
  out.name = "causality";
  out.tolerance = tolerance;
  auto record = [&](double dev, std::uint64_t s) {
    ++out.instances;
    if (dev >= out.worst) {
      out.worst = dev;
      out.worst_seed = s;
    }
  };
  for (std::size_t c = 0; c < instances; ++c) {
    const std::uint64_t s = seed + c;
    for (std::size_t steps : {1, 2, 4}) {
      Rng rng(s * 7 + steps);
      const std::size_t heads = pick(rng, {1, 2, 4});
      const std::size_t dim = pick(rng, {8, 16});
      const std::size_t rank = dim / heads;
      const std::size_t len = 2 + rng.index(11);
      const std::size_t pos = rng.index(len - 1);  // rows <= pos must not change
      const Tensor h = rng.normal_tensor({len, dim});
      Tensor h2 = h;
      for (std::size_t r = pos + 1; r < len; ++r) {
        for (double& v : h2.row(r)) v += rng.normal(0.0, 3.0);
      }

      layers::ReferenceMhaParams ref = layers::ReferenceMhaParams::init(
          heads, dim, rank, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
      record(max_abs_rows(layers::reference_mha(h, ref, 2.0),
                          layers::reference_mha(h2, ref, 2.0), pos + 1),
             s);

      for (auto mode : {layers::DiagonalMode::none, layers::DiagonalMode::shared,
                        layers::DiagonalMode::per_head}) {
        layers::CemAttentionParams p = equivalence_attention(rng, heads, dim, rank);
        p.steps = steps;
        p.diagonal = mode;
        const std::size_t n_diag = mode == layers::DiagonalMode::none     ? 0
                                   : mode == layers::DiagonalMode::shared ? 1
                                                                          : heads;
        for (std::size_t k = 0; k < n_diag; ++k) p.diag.push_back(rng.normal_tensor({dim}, 0.3));
        for (std::size_t k = 0; k < heads; ++k) {
          auto pc = layers::PreconditionerParams::init(
              layers::PreconditionerMode::diag_low_rank, dim, 2, rng);
          pc.v = rng.normal_tensor({dim, 2}, 0.05);
          p.precond.push_back(std::move(pc));
        }
        p.alibi = layers::AlibiBias::geometric(heads);
        p.inner_norm = layers::RmsNormParams::ones(dim);
        record(max_abs_rows(layers::cem_attention(h, h, p), layers::cem_attention(h2, h2, p),
                            pos + 1),
               s);
      }

      layers::CemMlpParams mp;
      mp.w = random_matrix(rng, 2 * dim, dim, 1.0);
      mp.v = random_matrix(rng, 2 * dim, dim, 1.0);
      mp.steps = steps;
      mp.inner_norm = layers::RmsNormParams::ones(dim);
      mp.precond = layers::PreconditionerParams::init(layers::PreconditionerMode::diagonal, dim,
                                                      0, rng);
      record(max_abs_rows(layers::cem_mlp(h, mp), layers::cem_mlp(h2, mp), pos + 1), s);

      model::Model m = random_cem_stack(s);
      for (auto& b : m.blocks) {
        b.cem_attn->steps = steps;
        b.cem_mlp->steps = steps;
      }
      std::vector<std::size_t> tokens(len), tokens2;
      for (auto& t : tokens) t = rng.index(m.config.vocab);
      tokens2 = tokens;
      for (std::size_t r = pos + 1; r < len; ++r) {
        tokens2[r] = (tokens2[r] + 1 + rng.index(m.config.vocab - 1)) % m.config.vocab;
      }
      record(max_abs_rows(model::lm_logits(m, tokens), model::lm_logits(m, tokens2), pos + 1),
             s);
    }
  }
  out.passed = out.worst <= tolerance;
  return out;
}

CheckResult model_gradient_check(std::size_t instances, std::uint64_t seed, double tolerance) {
  CheckResult out;
  out.name = "model_gradient_check";
  out.tolerance = tolerance;
  for (std::size_t c = 0; c < instances; ++c) {
    const std::uint64_t s = seed + c;
    model::Model m = random_cem_stack(s);
    Rng rng(s + 17);
    std::vector<std::size_t> window(7);
    for (auto& t : window) t = rng.index(m.config.vocab);
    const GradCheckReport report = check_model_gradients(
        m, [&](const model::Model& mm, ParamBinding& b) { return model::lm_loss(mm, window, b); },
        6, s);
    ++out.instances;
    for (const TensorCheck& t : report.tensors) {
      if (t.max_rel_error >= out.worst) {
        out.worst = t.max_rel_error;
        out.worst_seed = s;
        out.detail = t.name + " analytic=" + std::to_string(t.analytic) +
                     " numeric=" + std::to_string(t.numeric);
      }
    }
  }
  out.passed = out.worst <= tolerance;
  return out;
}

CheckResult parameter_ratio_check() {
  CheckResult out;
  out.name = "parameter_ratios";
  bool ok = true;
  struct Shape3 {
    std::size_t heads, dim, hidden;
  };
  for (const Shape3 sh : {Shape3{1, 8, 16}, Shape3{2, 16, 64}, Shape3{4, 32, 96},
                          Shape3{8, 672, 1792}, Shape3{12, 864, 2304}}) {
    model::ModelConfig ref;
    ref.block.model_dim = sh.dim;
    ref.block.heads = sh.heads;
    ref.block.head_dim = sh.dim / sh.heads;
    ref.block.hidden_dim = sh.hidden;
    ref.block.attention = model::AttentionKind::reference;
    ref.block.mlp = model::MlpKind::reference_gated;
    model::ModelConfig cem = ref;
    cem.block.attention = model::AttentionKind::cem;
    cem.block.mlp = model::MlpKind::cem;
    const auto a = model::count_parameters(ref);
    const auto b = model::count_parameters(cem);
    ok = ok && 2 * b.attention_core == a.attention_core && 3 * b.mlp_core == 2 * a.mlp_core;
    ++out.instances;
  }
  out.passed = ok;
  out.detail = "attention core 1/2, MLP core 2/3 (integer-exact)";
  return out;
}

nlohmann::json run_suite(const SuiteOptions& o) {
  std::vector<CheckResult> checks;
  checks.push_back(tied_attention_equivalence(o.equivalence_configs, o.seed));
  checks.push_back(tied_mlp_equivalence(o.equivalence_configs, o.seed));
  auto control_a = tied_attention_equivalence(o.equivalence_configs, o.seed, 1e-10, true);
  auto control_m = tied_mlp_equivalence(o.equivalence_configs, o.seed, 1e-10, true);
  // A negative control passes when the untied reference is caught.
  for (CheckResult* c : {&control_a, &control_m}) {
    c->passed = !c->passed;
    checks.push_back(*c);
  }
  checks.push_back(concat_equivalence(50, o.seed));
  checks.push_back(interaction_gradient_identity(o.gradient_instances, o.seed));
  checks.push_back(elementwise_gradient_identity(o.gradient_instances, o.seed));
  checks.push_back(model_gradient_check(o.model_instances, o.seed));
  checks.push_back(parameter_ratio_check());
  checks.push_back(attention_descent(o.descent_instances, o.seed));
  checks.push_back(mlp_descent(o.descent_instances, o.seed));
  checks.push_back(attention_descent(o.descent_instances, o.seed, 8, true));
  checks.push_back(mlp_descent(o.descent_instances, o.seed, 8, true));
  checks.push_back(causality_check(o.causality_instances, o.seed));

  nlohmann::json out;
  bool passed = true;
  out["checks"] = nlohmann::json::array();
  for (const CheckResult& c : checks) {
    passed = passed && c.passed;
    out["checks"].push_back(c);
  }
  out["passed"] = passed;
  return out;
}

}  // namespace cem::verify
