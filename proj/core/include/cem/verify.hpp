#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cem/energy.hpp"
#include "cem/layers.hpp"
#include "cem/model.hpp"
#include "cem/random.hpp"

// Oracles the layer and model code is checked against. Nothing here calls
// into a layer except to obtain the value under test.
namespace cem::verify {

inline constexpr double kRelErrorFloor = 1e-12;

// |a - f| / max(|a|, |f|, 1e-12)
double relative_error(double analytic, double numeric);

// Central differences, coordinate-wise. Throws OracleError if f is not
// finite at a probe point.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step = 1e-5);

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double step = 1e-5;

  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() <= tolerance; }
};

void to_json(nlohmann::json& j, const GradCheckReport& r);

using ModelLoss = std::function<Var(const model::Model&, ParamBinding&)>;

// Tape gradients of `loss` against central differences. Tensors with more
// than `max_coords` elements are checked on a seeded random subset.
GradCheckReport check_model_gradients(model::Model& m, const ModelLoss& loss,
                                      std::size_t max_coords, std::uint64_t seed,
                                      double step = 1e-5);

// A small LM stack with every CEM feature switched on (T=2, shared diagonal,
// diag+low-rank preconditioners, Alibi) and all parameters moved off their
// structured initial values.
model::Model random_cem_stack(std::uint64_t seed, std::size_t vocab = 11);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::size_t instances = 0;
  double worst = 0.0;
  double tolerance = 0.0;
  std::uint64_t worst_seed = 0;
  std::string detail;
};

void to_json(nlohmann::json& j, const CheckResult& r);

// Random equivalence-mode configs: K in {1,2,4}, D_h in {8,16}, D_r = D_h/K,
// J in 1..16. `untie` swaps in a fresh W^V (attention) or W^u (MLP) on the
// reference side as a negative control.
CheckResult tied_attention_equivalence(std::size_t configs, std::uint64_t seed,
                                       double tolerance = 1e-10, bool untie = false);
CheckResult tied_mlp_equivalence(std::size_t configs, std::uint64_t seed,
                                 double tolerance = 1e-10, bool untie = false);
// Sum-over-head-blocks MHA against concat-then-project.
CheckResult concat_equivalence(std::size_t instances, std::uint64_t seed,
                               double tolerance = 1e-12);

// Random energy instances spanning K in {1,2,4}, D_h in {4,8,16}, i in 1..8.
energy::InteractionEnergySpec random_interaction_spec(Rng& rng, std::size_t heads,
                                                      std::size_t dim);
energy::ElementwiseEnergySpec random_elementwise_spec(Rng& rng, std::size_t dim);
CheckResult interaction_gradient_identity(std::size_t instances, std::uint64_t seed,
                                          double tolerance = 1e-5);
CheckResult elementwise_gradient_identity(std::size_t instances, std::uint64_t seed,
                                          double tolerance = 1e-5);

enum class DescentVerdict { descending, stationary, failed };
const char* to_string(DescentVerdict v);

struct DescentTrace {
  std::vector<double> energies;  // t = 0..T
  double step_size = 0.0;
  DescentVerdict verdict = DescentVerdict::failed;
};

struct DescentProblem {
  // States x^(0..T) of the recursion at step size eta.
  std::function<std::vector<Tensor>(double eta)> recursion;
  std::function<double(const Tensor&)> energy;
  std::function<Tensor(const Tensor&)> gradient;
};

// Halves eta from `initial_eta` until every step with ||grad|| > 1e-8
// strictly lowers the energy, or eta drops below `min_eta`.
DescentTrace descent_trace(const DescentProblem& problem, double initial_eta = 1e-2,
                           double min_eta = 1e-8);

// Pure-gradient recursions (no inner norm, identity P, no diagonal) at the
// last row of `context`, monitored with the matching energy. `flip_sign`
// injects the sign-flip mutant.
DescentProblem attention_descent_problem(const Tensor& context,
                                         const layers::CemAttentionParams& params,
                                         bool flip_sign = false);
DescentProblem mlp_descent_problem(const Tensor& h, const layers::CemMlpParams& params,
                                   bool flip_sign = false);

// 50-instance style sweeps used by the suite.
CheckResult attention_descent(std::size_t instances, std::uint64_t seed, std::size_t steps = 8,
                              bool flip_sign = false);
CheckResult mlp_descent(std::size_t instances, std::uint64_t seed, std::size_t steps = 8,
                        bool flip_sign = false);

// Perturbs rows after a random position and measures the largest change at
// or before it, over every layer variant and T in {1,2,4}.
CheckResult causality_check(std::size_t instances, std::uint64_t seed,
                            double tolerance = 1e-12);

CheckResult model_gradient_check(std::size_t instances, std::uint64_t seed,
                                 double tolerance = 1e-4);

// Integer-exact core ratios (1/2 attention, 2/3 MLP) over several shapes.
CheckResult parameter_ratio_check();

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t equivalence_configs = 100;
  std::size_t gradient_instances = 200;
  std::size_t model_instances = 20;
  std::size_t descent_instances = 50;
  std::size_t causality_instances = 50;
};

// Runs every oracle suite (with negative controls) and returns a JSON
// verdict {"passed": bool, "checks": [...]}.
nlohmann::json run_suite(const SuiteOptions& options);

}  // namespace cem::verify
