#include "cem/energy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "cem/error.hpp"
#include "cem/ops.hpp"

namespace cem::energy {
namespace {

constexpr double kPi2Over6 = std::numbers::pi * std::numbers::pi / 6.0;

// sum_{k>=1} y^k / k^2 for 0 <= y <= 1/2.
double dilog_series(double y) {
  double term = y;
  double sum = 0.0;
  for (int k = 1; k < 200; ++k) {
    const double add = term / (static_cast<double>(k) * k);
    sum += add;
    if (std::abs(add) <= 1e-18 * std::abs(sum)) break;
    term *= y;
  }
  return sum;
}

// Li_2(-e^z), usable for any finite z.
double dilog_neg_exp(double z) {
  if (z <= 0.0) return dilog(-std::exp(z));
  // Inversion: Li_2(x) = -pi^2/6 - ln^2(-x)/2 - Li_2(1/x) for x < -1.
  return -kPi2Over6 - 0.5 * z * z - dilog(-std::exp(-z));
}

double phi_unshifted(double z) { return z * softplus(z) + dilog_neg_exp(z); }

void require_dims(std::span<const double> x, std::size_t n, const char* what) {
  if (x.size() != n) {
    throw DimensionError(std::string(what) + ": expected length " +
                         std::to_string(n) + ", got " +
                         std::to_string(x.size()));
  }
}

void check_history(std::span<const double> x, const Tensor& history,
                   const InteractionEnergySpec& spec,
                   std::size_t query_index) {
  spec.validate();
  if (query_index == 0) {
    throw DomainError("interaction energy needs a non-empty history (i >= 1)");
  }
  if (history.rank() != 2 || history.dim(1) != spec.model_dim()) {
    throw DimensionError("history must be [i x " +
                         std::to_string(spec.model_dim()) + "], got " +
                         shape_string(history.shape()));
  }
  if (history.dim(0) < query_index) {
    throw DimensionError("history has " + std::to_string(history.dim(0)) +
                         " rows, query index is " + std::to_string(query_index));
  }
  require_dims(x, spec.model_dim(), "interaction energy x");
}

// Logits s_j = beta_kj . x / tau + b_ijk for one head, plus the betas.
void head_logits(std::span<const double> x, const Tensor& history,
                 const InteractionEnergySpec& spec, std::size_t head,
                 std::size_t i, std::vector<std::vector<double>>& betas,
                 std::vector<double>& logits) {
  betas.resize(i);
  logits.resize(i);
  for (std::size_t j = 1; j <= i; ++j) {
    betas[j - 1] = spec.beta(head, history.row(j - 1));
    double s = dot(betas[j - 1], x) / spec.tau;
    if (spec.alibi) s += spec.alibi->bias(head, i, j);
    logits[j - 1] = s;
  }
}

}  // namespace

AlibiParams AlibiParams::geometric(std::size_t heads) {
  AlibiParams p;
  for (std::size_t k = 1; k <= heads; ++k) {
    p.slopes.push_back(std::ldexp(1.0, -static_cast<int>(k)));
  }
  return p;
}

double AlibiParams::bias(std::size_t head, std::size_t i, std::size_t j) const {
  const double distance =
      static_cast<double>(i > j ? i - j : j - i);
  return -slopes.at(head) * distance + (i == j ? b_self : b_cross);
}

std::size_t InteractionEnergySpec::model_dim() const {
  if (heads.empty()) throw ConfigError("interaction energy has no heads");
  const HeadInteraction& h = heads.front();
  return form == InteractionForm::full ? h.full.dim(0) : h.wq.dim(1);
}

void InteractionEnergySpec::validate() const {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const std::size_t d = model_dim();
  for (const HeadInteraction& h : heads) {
    if (form == InteractionForm::full) {
      if (h.full.shape() != Shape{d, d}) {
        throw DimensionError("full interaction matrix must be [" +
                             std::to_string(d) + "x" + std::to_string(d) +
                             "], got " + shape_string(h.full.shape()));
      }
      continue;
    }
    if (h.wq.rank() != 2 || h.wq.dim(1) != d || h.wq.shape() != h.wk.shape()) {
      throw DimensionError("low-rank factors must share shape [D_r x " +
                           std::to_string(d) + "], got " +
                           shape_string(h.wq.shape()) + " and " +
                           shape_string(h.wk.shape()));
    }
    if (form == InteractionForm::diag_low_rank && h.diag.size() != d) {
      throw DimensionError("diagonal must have length " + std::to_string(d));
    }
  }
  if (alibi && alibi->slopes.size() < heads.size()) {
    throw ConfigError("alibi needs one slope per head");
  }
}

Tensor InteractionEnergySpec::materialize(std::size_t head) const {
  const HeadInteraction& h = heads.at(head);
  if (form == InteractionForm::full) return h.full;
  Tensor a = matmul(h.wq, h.wk, true, false);
  if (form == InteractionForm::diag_low_rank) {
    for (std::size_t r = 0; r < a.dim(0); ++r) a.at(r, r) += h.diag[r];
  }
  return a;
}

std::vector<double> InteractionEnergySpec::beta(std::size_t head,
                                                std::span<const double> h) const {
  const HeadInteraction& p = heads.at(head);
  const std::size_t d = model_dim();
  std::vector<double> out(d, 0.0);
  if (form == InteractionForm::full) {
    for (std::size_t r = 0; r < d; ++r) out[r] = dot(p.full.row(r), h);
    return out;
  }
  // W_q^T (W_k h)
  const std::size_t rank = p.wk.dim(0);
  for (std::size_t a = 0; a < rank; ++a) {
    const double kh = dot(p.wk.row(a), h);
    auto q = p.wq.row(a);
    for (std::size_t r = 0; r < d; ++r) out[r] += q[r] * kh;
  }
  if (form == InteractionForm::diag_low_rank) {
    for (std::size_t r = 0; r < d; ++r) out[r] += p.diag[r] * h[r];
  }
  return out;
}

double interaction_energy(std::span<const double> x, const Tensor& history,
                          const InteractionEnergySpec& spec,
                          std::size_t query_index) {
  check_history(x, history, spec, query_index);
  std::vector<std::vector<double>> betas;
  std::vector<double> logits;
  double energy = 0.0;
  for (std::size_t k = 0; k < spec.heads.size(); ++k) {
    head_logits(x, history, spec, k, query_index, betas, logits);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double s : logits) total += std::exp(s - mx);
    energy -= spec.tau * (mx + std::log(total));
  }
  return energy;
}

Tensor interaction_energy_grad(std::span<const double> x,
                               const Tensor& history,
                               const InteractionEnergySpec& spec,
                               std::size_t query_index) {
  check_history(x, history, spec, query_index);
  const std::size_t d = spec.model_dim();
  Tensor grad({d});
  std::vector<std::vector<double>> betas;
  std::vector<double> logits;
  for (std::size_t k = 0; k < spec.heads.size(); ++k) {
    head_logits(x, history, spec, k, query_index, betas, logits);
    const Tensor weights = softmax_lastdim(Tensor::vector(logits));
    for (std::size_t j = 0; j < query_index; ++j) {
      for (std::size_t r = 0; r < d; ++r) grad[r] -= weights[j] * betas[j][r];
    }
  }
  return grad;
}

void ElementwiseEnergySpec::validate() const {
  if (w.rank() != 2 || w.shape() != v.shape()) {
    throw DimensionError("W and V must share shape [D_v x D_h], got " +
                         shape_string(w.shape()) + " and " +
                         shape_string(v.shape()));
  }
}

double elementwise_energy(std::span<const double> x, std::span<const double> h,
                          const ElementwiseEnergySpec& spec) {
  spec.validate();
  const std::size_t dv = spec.w.dim(0);
  const std::size_t dh = spec.w.dim(1);
  require_dims(x, dh, "elementwise energy x");
  require_dims(h, dh, "elementwise energy h");
  double energy = 0.0;
  for (std::size_t m = 0; m < dv; ++m) {
    const double gamma = dot(spec.w.row(m), h);
    energy -= gamma * phi_antiderivative(dot(spec.v.row(m), x));
  }
  return energy;
}

Tensor elementwise_energy_grad(std::span<const double> x,
                               std::span<const double> h,
                               const ElementwiseEnergySpec& spec) {
  spec.validate();
  const std::size_t dv = spec.w.dim(0);
  const std::size_t dh = spec.w.dim(1);
  require_dims(x, dh, "elementwise energy x");
  require_dims(h, dh, "elementwise energy h");
  Tensor grad({dh});
  for (std::size_t m = 0; m < dv; ++m) {
    const double gamma = dot(spec.w.row(m), h);
    const double coeff = gamma * silu(dot(spec.v.row(m), x));
    auto vrow = spec.v.row(m);
    for (std::size_t r = 0; r < dh; ++r) grad[r] -= coeff * vrow[r];
  }
  return grad;
}

double dilog(double x) {
  if (std::isnan(x) || x > 1.0) {
    throw DomainError("real dilogarithm requires x <= 1");
  }
  if (x == 1.0) return kPi2Over6;
  if (x > 0.5) {
    return kPi2Over6 - std::log(x) * std::log1p(-x) - dilog_series(1.0 - x);
  }
  if (x >= 0.0) return dilog_series(x);
  if (x >= -1.0) {
    // Landen: Li_2(x) = -Li_2(x / (x - 1)) - ln^2(1 - x) / 2
    const double l = std::log1p(-x);
    return -dilog_series(x / (x - 1.0)) - 0.5 * l * l;
  }
  const double l = std::log(-x);
  return -kPi2Over6 - 0.5 * l * l - dilog(1.0 / x);
}

double phi_antiderivative(double z) {
  if (!std::isfinite(z)) throw DomainError("phi requires a finite argument");
  static const double reference = phi_unshifted(kPhiReference);
  return phi_unshifted(z) - reference;
}

}  // namespace cem::energy
