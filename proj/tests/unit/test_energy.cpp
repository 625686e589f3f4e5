#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>

#include "cem/energy.hpp"
#include "cem/error.hpp"
#include "oracles.hpp"

using namespace cem;
using namespace cem::energy;

namespace {

double silu_integral(double a, double b) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      [](double t) { return oracle::silu(t); }, a, b, 15, 1e-14);
}

InteractionEnergySpec make_spec(Rng& rng, InteractionForm form, std::size_t heads,
                                std::size_t dim, std::size_t rank, bool alibi) {
  InteractionEnergySpec s;
  s.form = form;
  s.tau = 0.5 + rng.uniform();
  for (std::size_t k = 0; k < heads; ++k) {
    HeadInteraction h;
    if (form == InteractionForm::full) {
      h.full = oracle::random(rng, {dim, dim}, 0.5);
    } else {
      h.wq = oracle::random(rng, {rank, dim}, 0.5);
      h.wk = oracle::random(rng, {rank, dim}, 0.5);
      if (form == InteractionForm::diag_low_rank) h.diag = oracle::random(rng, {dim}, 0.5);
    }
    s.heads.push_back(h);
  }
  if (alibi) {
    s.alibi = AlibiParams::geometric(heads);
    s.alibi->b_self = rng.normal();
    s.alibi->b_cross = rng.normal();
  }
  return s;
}

// A_k built entry by entry from the factors.
oracle::Mat dense_a(const InteractionEnergySpec& s, std::size_t k) {
  const auto& h = s.heads[k];
  if (s.form == InteractionForm::full) return oracle::to_mat(h.full);
  const auto q = oracle::to_mat(h.wq), kk = oracle::to_mat(h.wk);
  const std::size_t d = q.front().size();
  oracle::Mat a(d, std::vector<double>(d, 0.0));
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t m = 0; m < q.size(); ++m) a[r][c] += q[m][r] * kk[m][c];
      if (s.form == InteractionForm::diag_low_rank && r == c) a[r][c] += h.diag[r];
    }
  return a;
}

double brute_interaction(const std::vector<double>& x, const Tensor& hist,
                         const InteractionEnergySpec& s, std::size_t i) {
  double e = 0.0;
  for (std::size_t k = 0; k < s.heads.size(); ++k) {
    const auto a = dense_a(s, k);
    double z = 0.0;
    for (std::size_t j = 1; j <= i; ++j) {
      const auto beta = oracle::matvec(a, std::vector<double>(hist.row(j - 1).begin(), hist.row(j - 1).end()));
      double logit = oracle::dot(beta, x) / s.tau;
      if (s.alibi) {
        const double m = std::pow(2.0, -static_cast<double>(k + 1));
        logit += -m * std::abs(static_cast<double>(i) - static_cast<double>(j)) +
                 (i == j ? s.alibi->b_self : s.alibi->b_cross);
      }
      z += std::exp(logit);
    }
    e -= s.tau * std::log(z);
  }
  return e;
}

}  // namespace

TEST(Energy, AlibiSlopesAreGeometric) {
  const auto a = AlibiParams::geometric(4);
  ASSERT_EQ(a.slopes.size(), 4u);
  EXPECT_DOUBLE_EQ(a.slopes[0], 0.5);
  EXPECT_DOUBLE_EQ(a.slopes[3], 1.0 / 16.0);
  AlibiParams b = a;
  b.b_self = 0.7;
  b.b_cross = -0.2;
  EXPECT_DOUBLE_EQ(b.bias(1, 5, 5), 0.7);
  EXPECT_DOUBLE_EQ(b.bias(1, 5, 2), -0.25 * 3 - 0.2);
}

TEST(Energy, InteractionMatchesBruteForceForEveryForm) {
  Rng rng(11);
  for (auto form : {InteractionForm::full, InteractionForm::low_rank, InteractionForm::diag_low_rank}) {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t heads = 1 + rng.index(3), dim = 2 + rng.index(5), i = 1 + rng.index(6);
      const auto s = make_spec(rng, form, heads, dim, 1 + rng.index(dim), trial % 2 == 0);
      const Tensor hist = oracle::random(rng, {i + 2, dim});
      const Tensor x = oracle::random(rng, {dim});
      const std::vector<double> xv(x.data().begin(), x.data().end());
      EXPECT_NEAR(interaction_energy(x.data(), hist, s, i), brute_interaction(xv, hist, s, i), 1e-11);
    }
  }
}

TEST(Energy, InteractionGradientMatchesFiniteDifferences) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = 1 + rng.index(3), dim = 2 + rng.index(5), i = 1 + rng.index(6);
    const auto s = make_spec(rng, InteractionForm::diag_low_rank, heads, dim, 2, true);
    const Tensor hist = oracle::random(rng, {i, dim});
    const Tensor x = oracle::random(rng, {dim});
    const auto numeric = oracle::numeric_grad(
        [&](const std::vector<double>& v) { return brute_interaction(v, hist, s, i); },
        std::vector<double>(x.data().begin(), x.data().end()));
    const Tensor g = interaction_energy_grad(x.data(), hist, s, i);
    for (std::size_t d = 0; d < dim; ++d) EXPECT_LT(oracle::rel_err(g[d], numeric[d]), 1e-6);
  }
}

TEST(Energy, SingleTokenHistoryIsLinear) {
  // With one history row the softmax is trivial: grad = -sum_k A_k h_1.
  Rng rng(13);
  const auto s = make_spec(rng, InteractionForm::low_rank, 2, 4, 2, false);
  const Tensor hist = oracle::random(rng, {1, 4});
  const Tensor x = oracle::random(rng, {4});
  const Tensor g = interaction_energy_grad(x.data(), hist, s, 1);
  std::vector<double> want(4, 0.0);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto b = oracle::matvec(dense_a(s, k), std::vector<double>(hist.row(0).begin(), hist.row(0).end()));
    for (std::size_t d = 0; d < 4; ++d) want[d] -= b[d];
  }
  for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(g[d], want[d], 1e-13);
}

TEST(Energy, InteractionErrors) {
  Rng rng(14);
  auto s = make_spec(rng, InteractionForm::low_rank, 1, 3, 2, false);
  const Tensor hist = oracle::random(rng, {2, 3});
  const Tensor x = oracle::random(rng, {3});
  EXPECT_THROW(interaction_energy(x.data(), hist, s, 0), DomainError);
  EXPECT_THROW(interaction_energy(x.data(), hist, s, 3), DimensionError);
  EXPECT_THROW(interaction_energy(Tensor({4}).data(), hist, s, 1), DimensionError);
  s.tau = 0.0;
  EXPECT_THROW(interaction_energy(x.data(), hist, s, 1), ConfigError);
}

TEST(Energy, DilogKnownValues) {
  const double pi2 = std::numbers::pi * std::numbers::pi;
  EXPECT_NEAR(dilog(0.0), 0.0, 1e-16);
  EXPECT_NEAR(dilog(1.0), pi2 / 6.0, 1e-14);
  EXPECT_NEAR(dilog(-1.0), -pi2 / 12.0, 1e-14);
  EXPECT_NEAR(dilog(0.5), pi2 / 12.0 - 0.5 * std::log(2.0) * std::log(2.0), 1e-14);
  EXPECT_THROW(dilog(1.5), DomainError);
}

TEST(Energy, DilogMatchesQuadrature) {
  for (double x : {-50.0, -7.0, -2.0, -0.9, -0.3, 0.2, 0.6, 0.95}) {
    // Li_2(x) = -int_0^x ln(1 - t) / t dt
    const double q = -boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
        [](double t) { return t == 0.0 ? -1.0 : std::log1p(-t) / t; }, 0.0, x, 15, 1e-14);
    EXPECT_NEAR(dilog(x), q, 1e-11 * std::max(1.0, std::abs(q))) << x;
  }
}

TEST(Energy, PhiIsTheSiluIntegralFromTheReferencePoint) {
  EXPECT_NEAR(phi_antiderivative(kPhiReference), 0.0, 1e-14);
  for (double z : {-29.0, -12.0, -3.5, -1.0, -0.1, 0.0, 0.4, 1.0, 2.5, 7.0, 15.0}) {
    const double want = silu_integral(kPhiReference, z);
    EXPECT_NEAR(phi_antiderivative(z), want, 1e-10 * std::max(1.0, std::abs(want))) << z;
  }
}

TEST(Energy, PhiDerivativeIsSilu) {
  for (double z : {-6.0, -1.3, 0.0, 0.7, 4.0}) {
    const double h = 1e-5;
    const double d = (phi_antiderivative(z + h) - phi_antiderivative(z - h)) / (2 * h);
    EXPECT_NEAR(d, oracle::silu(z), 1e-8);
  }
}

TEST(Energy, ElementwiseMatchesBruteForceAndGradient) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 2 + rng.index(6), hidden = 2 + rng.index(8);
    ElementwiseEnergySpec s{oracle::random(rng, {hidden, dim}, 0.6), oracle::random(rng, {hidden, dim}, 0.6)};
    const Tensor h = oracle::random(rng, {dim});
    const Tensor x = oracle::random(rng, {dim});
    const auto w = oracle::to_mat(s.w), v = oracle::to_mat(s.v);
    const std::vector<double> hv(h.data().begin(), h.data().end());
    auto brute = [&](const std::vector<double>& xv) {
      const auto gamma = oracle::matvec(w, hv);
      const auto z = oracle::matvec(v, xv);
      double e = 0.0;
      for (std::size_t m = 0; m < hidden; ++m) e -= gamma[m] * silu_integral(kPhiReference, z[m]);
      return e;
    };
    const std::vector<double> xv(x.data().begin(), x.data().end());
    EXPECT_NEAR(elementwise_energy(x.data(), h.data(), s), brute(xv), 1e-9);
    const Tensor g = elementwise_energy_grad(x.data(), h.data(), s);
    // Closed form -V^T (gamma o SiLU(V x)) written out.
    const auto gamma = oracle::matvec(w, hv);
    const auto z = oracle::matvec(v, xv);
    std::vector<double> inner(hidden);
    for (std::size_t m = 0; m < hidden; ++m) inner[m] = -gamma[m] * oracle::silu(z[m]);
    const auto want = oracle::matvec_t(v, inner);
    for (std::size_t d = 0; d < dim; ++d) EXPECT_NEAR(g[d], want[d], 1e-12);
  }
}
