#include <gtest/gtest.h>

#include <cmath>

#include "cem/energy.hpp"
#include "cem/error.hpp"
#include "cem/layers.hpp"
#include "cem/ops.hpp"
#include "oracles.hpp"

using namespace cem;
using namespace cem::layers;
using oracle::Mat;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// P = diag(softplus(sqrt(D) p)) + U V^T + V U^T, entry by entry.
Mat dense_precond(const PreconditionerParams& p, std::size_t dim) {
  Mat out(dim, std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < dim; ++i) {
    if (p.mode == PreconditionerMode::identity) {
      out[i][i] = 1.0;
      continue;
    }
    out[i][i] = oracle::softplus(std::sqrt(static_cast<double>(dim)) * p.p[i]);
  }
  if (p.mode == PreconditionerMode::diag_low_rank) {
    const auto u = oracle::to_mat(p.u), v = oracle::to_mat(p.v);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j)
        for (std::size_t r = 0; r < u.front().size(); ++r) out[i][j] += u[i][r] * v[j][r] + v[i][r] * u[j][r];
  }
  return out;
}

PreconditionerParams random_precond(Rng& rng, PreconditionerMode mode, std::size_t dim,
                                    std::size_t rank) {
  auto p = PreconditionerParams::init(mode, dim, rank, rng);
  if (mode != PreconditionerMode::identity) p.p = oracle::random(rng, {dim}, 0.3);
  if (mode == PreconditionerMode::diag_low_rank) {
    p.u = oracle::random(rng, {dim, rank}, 0.2);
    p.v = oracle::random(rng, {dim, rank}, 0.2);
  }
  return p;
}

CemAttentionParams random_cem_attention(Rng& rng, std::size_t heads, std::size_t dim,
                                        std::size_t rank, DiagonalMode diag,
                                        PreconditionerMode pmode, bool alibi, bool norm,
                                        std::size_t steps) {
  CemAttentionParams p;
  for (std::size_t k = 0; k < heads; ++k) {
    p.wq.push_back(oracle::random(rng, {rank, dim}, 0.4));
    p.wk.push_back(oracle::random(rng, {rank, dim}, 0.4));
    p.precond.push_back(random_precond(rng, pmode, dim, 2));
  }
  p.diagonal = diag;
  const std::size_t n_diag = diag == DiagonalMode::none ? 0 : diag == DiagonalMode::shared ? 1 : heads;
  for (std::size_t k = 0; k < n_diag; ++k) p.diag.push_back(oracle::random(rng, {dim}, 0.3));
  if (alibi) {
    p.alibi = AlibiBias::geometric(heads);
    p.alibi->self_bias = Tensor::scalar(rng.normal(0, 0.5));
    p.alibi->cross_bias = Tensor::scalar(rng.normal(0, 0.5));
  }
  if (norm) {
    RmsNormParams n = RmsNormParams::ones(dim);
    n.gain = rng.uniform_tensor({dim}, 0.5, 1.5);
    p.inner_norm = n;
  }
  p.tau = 0.7 + rng.uniform();
  p.steps = steps;
  p.step_size = Tensor::scalar(0.5 + rng.uniform());
  return p;
}

// Scalar-loop transcription of the CEM attention recursion.
Mat brute_cem_attention(const Mat& h, const CemAttentionParams& p) {
  const std::size_t n = h.size(), heads = p.wq.size();
  std::vector<Mat> keys(heads);
  for (std::size_t k = 0; k < heads; ++k)
    for (std::size_t j = 0; j < n; ++j) keys[k].push_back(oracle::matvec(oracle::to_mat(p.wk[k]), h[j]));
  Mat x = h;
  for (std::size_t t = 0; t < p.steps; ++t) {
    Mat next = x;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> u = x[i];
      if (p.inner_norm) u = oracle::rmsnorm(x[i], vec(p.inner_norm->gain), p.inner_norm->eps);
      std::vector<double> total(u.size(), 0.0);
      for (std::size_t k = 0; k < heads; ++k) {
        const Mat wq = oracle::to_mat(p.wq[k]);
        const auto q = oracle::matvec(wq, u);
        std::vector<double> s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          s[j] = oracle::dot(keys[k][j], q);
          if (p.diagonal != DiagonalMode::none) {
            const Tensor& d = p.diag[p.diagonal == DiagonalMode::shared ? 0 : k];
            for (std::size_t c = 0; c < u.size(); ++c) s[j] += h[j][c] * d[c] * u[c];
          }
          s[j] /= p.tau;
          if (p.alibi) {
            s[j] += -p.alibi->slopes[k] * static_cast<double>(i - j) +
                    (i == j ? p.alibi->self_bias.item() : p.alibi->cross_bias.item());
          }
        }
        const auto w = oracle::softmax_prefix(s, i + 1);
        std::vector<double> mix(keys[k][0].size(), 0.0);
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t r = 0; r < mix.size(); ++r) mix[r] += w[j] * keys[k][j][r];
        auto c = oracle::matvec_t(wq, mix);
        if (!p.precond.empty()) c = oracle::matvec(dense_precond(p.precond[k], u.size()), c);
        for (std::size_t d = 0; d < u.size(); ++d) total[d] += c[d];
      }
      for (std::size_t d = 0; d < u.size(); ++d) next[i][d] = x[i][d] + p.step_size.item() * total[d];
    }
    x = next;
  }
  return x;
}

CemMlpParams random_cem_mlp(Rng& rng, std::size_t dim, std::size_t hidden, PreconditionerMode pmode,
                            bool norm, std::size_t steps) {
  CemMlpParams p;
  p.w = oracle::random(rng, {hidden, dim}, 0.4);
  p.v = oracle::random(rng, {hidden, dim}, 0.4);
  p.precond = random_precond(rng, pmode, dim, 3);
  if (norm) {
    RmsNormParams n = RmsNormParams::ones(dim);
    n.gain = rng.uniform_tensor({dim}, 0.5, 1.5);
    p.inner_norm = n;
  }
  p.steps = steps;
  p.step_size = Tensor::scalar(0.5 + rng.uniform());
  return p;
}

Mat brute_cem_mlp(const Mat& h, const CemMlpParams& p) {
  const Mat w = oracle::to_mat(p.w), v = oracle::to_mat(p.v);
  const Mat pm = dense_precond(p.precond, h.front().size());
  Mat x = h;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto gamma = oracle::matvec(w, h[i]);
    for (std::size_t t = 0; t < p.steps; ++t) {
      std::vector<double> u = x[i];
      if (p.inner_norm) u = oracle::rmsnorm(x[i], vec(p.inner_norm->gain), p.inner_norm->eps);
      auto z = oracle::matvec(v, u);
      for (std::size_t m = 0; m < z.size(); ++m) z[m] = gamma[m] * oracle::silu(z[m]);
      const auto step = oracle::matvec(pm, oracle::matvec_t(v, z));
      for (std::size_t d = 0; d < step.size(); ++d) x[i][d] += p.step_size.item() * step[d];
    }
  }
  return x;
}

double max_diff(const Tensor& a, const Mat& b) { return max_abs_diff(a, oracle::to_tensor(b)); }

}  // namespace

TEST(Layers, RmsNormMatchesLoop) {
  Rng rng(1);
  const Tensor x = oracle::random(rng, {5, 6}, 2.0);
  RmsNormParams p = RmsNormParams::ones(6);
  p.gain = oracle::random(rng, {6});
  const Tensor y = rmsnorm(x, p);
  const Mat xm = oracle::to_mat(x);
  for (std::size_t r = 0; r < 5; ++r) {
    const auto want = oracle::rmsnorm(xm[r], vec(p.gain), p.eps);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(y.at(r, c), want[c], 1e-14);
  }
}

TEST(Layers, PreconditionerInitialState) {
  Rng rng(2);
  const auto p = PreconditionerParams::init(PreconditionerMode::diag_low_rank, 16, 4, rng);
  for (double v : p.p.data()) EXPECT_DOUBLE_EQ(v, 0.25);  // 1/sqrt(16)
  for (double v : p.v.data()) EXPECT_EQ(v, 0.0);
  double ss = 0.0;
  for (double v : p.u.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(p.u.size())), 0.02, 0.006);
  // V = 0 leaves only the diagonal softplus(1).
  const Tensor m = materialize_preconditioner(p, 16);
  EXPECT_NEAR(m.at(3, 3), std::log1p(std::exp(1.0)), 1e-15);
  EXPECT_EQ(m.at(3, 4), 0.0);
  EXPECT_EQ(p.parameter_count(), 16u + 2 * 64u);
}

TEST(Layers, PreconditionerMatchesDenseConstruction) {
  Rng rng(3);
  for (auto mode : {PreconditionerMode::identity, PreconditionerMode::diagonal, PreconditionerMode::diag_low_rank}) {
    const auto p = random_precond(rng, mode, 7, 3);
    const Mat want = dense_precond(p, 7);
    EXPECT_LT(max_diff(materialize_preconditioner(p, 7), want), 1e-14);
    const Tensor g = oracle::random(rng, {4, 7});
    const Mat gm = oracle::to_mat(g);
    Mat pg;
    for (const auto& r : gm) pg.push_back(oracle::matvec(want, r));
    EXPECT_LT(max_diff(apply_preconditioner(g, p), pg), 1e-13);
    // Symmetric by construction.
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j) EXPECT_DOUBLE_EQ(want[i][j], want[j][i]);
  }
}

TEST(Layers, ReferenceMhaMatchesLoop) {
  Rng rng(4);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t heads = 1 + rng.index(3), dr = 2 + rng.index(3), d = heads * dr, n = 1 + rng.index(7);
    const auto p = ReferenceMhaParams::init(heads, d, dr, 0.5, rng);
    const Tensor h = oracle::random(rng, {n, d});
    const double tau = std::sqrt(static_cast<double>(dr));
    const Mat hm = oracle::to_mat(h);
    Mat want(n, std::vector<double>(d, 0.0));
    for (std::size_t k = 0; k < heads; ++k) {
      const Mat wq = oracle::to_mat(p.wq[k]), wk = oracle::to_mat(p.wk[k]), wv = oracle::to_mat(p.wv[k]),
                wo = oracle::to_mat(p.wo[k]);
      for (std::size_t i = 0; i < n; ++i) {
        const auto q = oracle::matvec(wq, hm[i]);
        std::vector<double> s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) s[j] = oracle::dot(q, oracle::matvec(wk, hm[j])) / tau;
        const auto w = oracle::softmax_prefix(s, i + 1);
        std::vector<double> mix(dr, 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          const auto v = oracle::matvec(wv, hm[j]);
          for (std::size_t r = 0; r < dr; ++r) mix[r] += w[j] * v[r];
        }
        const auto o = oracle::matvec_t(wo, mix);
        for (std::size_t c = 0; c < d; ++c) want[i][c] += o[c];
      }
    }
    EXPECT_LT(max_diff(reference_mha(h, p, tau), want), 1e-13);
    EXPECT_LT(max_diff(reference_mha_concat(h, p, tau), want), 1e-13);
  }
}

TEST(Layers, GatedAndPlainMlpMatchLoop) {
  Rng rng(5);
  const std::size_t d = 6, m = 10;
  const auto g = GatedMlpParams::init(d, m, 0.5, rng);
  const auto pl = PlainMlpParams::init(d, m, 0.5, rng);
  const Tensor h = oracle::random(rng, {3, d});
  const Mat hm = oracle::to_mat(h);
  Mat gated, plain;
  for (const auto& r : hm) {
    auto a = oracle::matvec(oracle::to_mat(g.wg), r);
    const auto b = oracle::matvec(oracle::to_mat(g.wu), r);
    for (std::size_t i = 0; i < m; ++i) a[i] *= oracle::silu(b[i]);
    gated.push_back(oracle::matvec(oracle::to_mat(g.wd), a));
    auto z = oracle::matvec(oracle::to_mat(pl.w_in), r);
    for (double& v : z) v = oracle::silu(v);
    plain.push_back(oracle::matvec(oracle::to_mat(pl.w_out), z));
  }
  EXPECT_LT(max_diff(reference_gated_mlp(h, g, Activation::silu), gated), 1e-14);
  Tape tape(false);
  ParamBinding bind(tape, false);
  EXPECT_LT(max_diff(plain_mlp(tape.constant(h), pl, Activation::silu, bind).value(), plain), 1e-14);
  EXPECT_EQ(g.parameter_count(), 3 * d * m);
  EXPECT_EQ(pl.parameter_count(), 2 * d * m);
}

TEST(Layers, CemAttentionMatchesScalarLoopInEveryMode) {
  Rng rng(6);
  for (auto diag : {DiagonalMode::none, DiagonalMode::shared, DiagonalMode::per_head}) {
    for (auto pmode : {PreconditionerMode::identity, PreconditionerMode::diagonal, PreconditionerMode::diag_low_rank}) {
      for (std::size_t steps : {1u, 3u}) {
        const std::size_t heads = 1 + rng.index(3), n = 1 + rng.index(6);
        const auto p = random_cem_attention(rng, heads, 6, 3, diag, pmode, steps == 3, steps == 3, steps);
        const Tensor h = oracle::random(rng, {n, 6});
        EXPECT_LT(max_diff(cem_attention(h, h, p), brute_cem_attention(oracle::to_mat(h), p)), 1e-12)
            << to_string(diag) << " " << to_string(pmode) << " T=" << steps;
      }
    }
  }
}

TEST(Layers, CemMlpMatchesScalarLoop) {
  Rng rng(7);
  for (auto pmode : {PreconditionerMode::identity, PreconditionerMode::diagonal, PreconditionerMode::diag_low_rank}) {
    for (std::size_t steps : {1u, 2u, 4u}) {
      const auto p = random_cem_mlp(rng, 6, 9, pmode, steps > 1, steps);
      const Tensor h = oracle::random(rng, {4, 6});
      EXPECT_LT(max_diff(cem_mlp(h, p), brute_cem_mlp(oracle::to_mat(h), p)), 1e-12);
    }
  }
}

TEST(Layers, PureCemStepIsNegativeEnergyGradient) {
  Rng rng(8);
  const std::size_t dim = 6, n = 5;
  const auto p = random_cem_attention(rng, 2, dim, 3, DiagonalMode::none, PreconditionerMode::identity,
                                      false, false, 1);
  const Tensor h = oracle::random(rng, {n, dim});
  const Tensor out = cem_attention(h, h, p);
  energy::InteractionEnergySpec spec;
  spec.tau = p.tau;
  for (std::size_t k = 0; k < 2; ++k) spec.heads.push_back({Tensor(), p.wq[k], p.wk[k], Tensor()});
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor g = energy::interaction_energy_grad(h.row(i), h, spec, i + 1);
    for (std::size_t d = 0; d < dim; ++d) {
      EXPECT_NEAR(out.at(i, d), h.at(i, d) - p.step_size.item() * g[d], 1e-12);
    }
  }
  const auto mp = random_cem_mlp(rng, dim, 8, PreconditionerMode::identity, false, 1);
  const Tensor mo = cem_mlp(h, mp);
  const energy::ElementwiseEnergySpec es{mp.w, mp.v};
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor g = energy::elementwise_energy_grad(h.row(i), h.row(i), es);
    for (std::size_t d = 0; d < dim; ++d) {
      EXPECT_NEAR(mo.at(i, d), h.at(i, d) - mp.step_size.item() * g[d], 1e-12);
    }
  }
}

TEST(Layers, ObserverSeesEveryRecursionState) {
  Rng rng(9);
  const auto p = random_cem_mlp(rng, 4, 6, PreconditionerMode::identity, true, 3);
  const Tensor h = oracle::random(rng, {2, 4});
  std::vector<std::size_t> seen;
  Tensor last;
  const Tensor out = cem_mlp(h, p, [&](std::size_t t, const Tensor& x) {
    seen.push_back(t);
    last = x;
  });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(last, out);
}

TEST(Layers, TapeGradientsOfCemLayersMatchFiniteDifferences) {
  Rng rng(10);
  auto p = random_cem_attention(rng, 2, 4, 2, DiagonalMode::per_head, PreconditionerMode::diag_low_rank,
                                true, true, 2);
  p.learn_step_size = true;
  const Tensor h = oracle::random(rng, {3, 4});
  const Tensor w = oracle::random(rng, {3, 4});
  auto loss_of = [&](const CemAttentionParams& q) {
    const Tensor out = cem_attention(h, h, q);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
    return s;
  };
  Tape tape;
  ParamBinding bind(tape);
  const Var hv = tape.constant(h);
  const Var root = sum(cem_attention(hv, hv, p, bind).state * tape.constant(w));
  const Gradients g = tape.backward(root);
  std::vector<Tensor*> targets = {&p.wq[1], &p.wk[0], &p.diag[1], &p.precond[0].u,
                                  &p.precond[1].p, &p.alibi->self_bias, &p.inner_norm->gain,
                                  &p.step_size};
  for (Tensor* t : targets) {
    const Tensor analytic = g[*bind.find(*t)];
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double x0 = (*t)[i];
      (*t)[i] = x0 + 1e-6;
      const double fp = loss_of(p);
      (*t)[i] = x0 - 1e-6;
      const double fm = loss_of(p);
      (*t)[i] = x0;
      EXPECT_LT(oracle::rel_err(analytic[i], (fp - fm) / 2e-6), 1e-6);
    }
  }
}

TEST(Layers, FutureRowsNeverReachThePast) {
  Rng rng(11);
  const auto p = random_cem_attention(rng, 2, 6, 3, DiagonalMode::shared, PreconditionerMode::diag_low_rank,
                                      true, true, 4);
  const Tensor h = oracle::random(rng, {6, 6});
  Tensor h2 = h;
  for (std::size_t c = 0; c < 6; ++c) h2.at(5, c) += 3.0, h2.at(4, c) -= 1.0;
  const Tensor a = cem_attention(h, h, p), b = cem_attention(h2, h2, p);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(a.at(r, c), b.at(r, c));
}

TEST(Layers, ValidationErrors) {
  Rng rng(12);
  auto p = random_cem_attention(rng, 2, 4, 2, DiagonalMode::per_head, PreconditionerMode::identity,
                                false, false, 1);
  p.diag.pop_back();
  EXPECT_THROW(p.validate(), Error);
  auto q = random_cem_attention(rng, 2, 4, 2, DiagonalMode::none, PreconditionerMode::identity,
                                false, false, 1);
  EXPECT_THROW(cem_attention(oracle::random(rng, {3, 5}), oracle::random(rng, {3, 5}), q), DimensionError);
  EXPECT_THROW(cem_attention(oracle::random(rng, {3, 4}), oracle::random(rng, {2, 4}), q), DimensionError);
  EXPECT_THROW(diagonal_mode_from_string("both"), ConfigError);
  EXPECT_EQ(preconditioner_mode_from_string(to_string(PreconditionerMode::diag_low_rank)),
            PreconditionerMode::diag_low_rank);
}
