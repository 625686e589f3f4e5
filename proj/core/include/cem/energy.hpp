#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "cem/tensor.hpp"

// Explicit conditional energies whose gradient steps produce the tied
// attention and gated-MLP updates. Nothing here depends on the layer code,
// so layers can be checked against these functions.
namespace cem::energy {

// Additive logit bias b_ijk = -m_k |i - j| + b_self [i == j] + b_cross [i != j].
struct AlibiParams {
  std::vector<double> slopes;
  double b_self = 0.0;
  double b_cross = 0.0;

  // m_k = 2^{-k} for k = 1..heads.
  static AlibiParams geometric(std::size_t heads);
  double bias(std::size_t head, std::size_t i, std::size_t j) const;
};

enum class InteractionForm { full, low_rank, diag_low_rank };

// Parameterization of one head's interaction matrix A_k.
struct HeadInteraction {
  Tensor full;  // D_h x D_h, full form only
  Tensor wq;    // D_r x D_h
  Tensor wk;    // D_r x D_h
  Tensor diag;  // D_h, diag_low_rank only
};

struct InteractionEnergySpec {
  InteractionForm form = InteractionForm::low_rank;
  std::vector<HeadInteraction> heads;
  double tau = 1.0;
  std::optional<AlibiParams> alibi;

  std::size_t model_dim() const;
  void validate() const;
  // A_k as a dense D_h x D_h matrix.
  Tensor materialize(std::size_t head) const;
  // beta_kj = A_k h_j
  std::vector<double> beta(std::size_t head, std::span<const double> h) const;
};

// Energy of x_i given the first `query_index` rows of `history` (1-based
// query index i):
//   -tau * sum_k log sum_{j<=i} exp(beta_kj . x / tau + b_ijk)
double interaction_energy(std::span<const double> x, const Tensor& history,
                          const InteractionEnergySpec& spec,
                          std::size_t query_index);

// -sum_k sum_j softmax_j(beta_kj . x / tau + b_ijk) beta_kj
Tensor interaction_energy_grad(std::span<const double> x,
                               const Tensor& history,
                               const InteractionEnergySpec& spec,
                               std::size_t query_index);

struct ElementwiseEnergySpec {
  Tensor w;  // D_v x D_h
  Tensor v;  // D_v x D_h

  void validate() const;
};

// -(W h)^T phi(V x), phi the SiLU antiderivative.
double elementwise_energy(std::span<const double> x, std::span<const double> h,
                          const ElementwiseEnergySpec& spec);

// -V^T ((W h) o SiLU(V x))
Tensor elementwise_energy_grad(std::span<const double> x,
                               std::span<const double> h,
                               const ElementwiseEnergySpec& spec);

// Reference point of the antiderivative: phi(kPhiReference) == 0.
inline constexpr double kPhiReference = -30.0;

// Real dilogarithm Li_2(x) for x <= 1.
double dilog(double x);

// phi(z) = integral of SiLU from kPhiReference to z, evaluated in closed form
// as z softplus(z) + Li_2(-e^z) minus its value at the reference point.
double phi_antiderivative(double z);

}  // namespace cem::energy
