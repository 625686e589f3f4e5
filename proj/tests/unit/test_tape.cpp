#include <gtest/gtest.h>

#include <functional>

#include "cem/error.hpp"
#include "cem/ops.hpp"
#include "cem/tape.hpp"
#include "oracles.hpp"

using namespace cem;

namespace {

using Build = std::function<Var(const Var&, const Var&)>;

// Checks d sum(w * f(a, b)) / d{a, b} from the tape against central
// differences, with a fixed random weighting w so every output entry counts.
void check_binary(const Build& f, Tensor a, Tensor b, double tol = 1e-7) {
  Rng rng(17);
  Tensor weights;
  {
    Tape probe(false);
    weights = oracle::random(rng, f(probe.constant(a), probe.constant(b)).shape());
  }
  auto loss = [&](const Tensor& x, const Tensor& y) {
    Tape t(false);
    const Tensor out = f(t.constant(x), t.constant(y)).value();
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += weights[i] * out[i];
    return s;
  };
  Tape tape;
  const Var va = tape.leaf(a), vb = tape.leaf(b);
  const Var root = sum(mul(f(va, vb), tape.constant(weights)));
  const Gradients g = tape.backward(root);
  for (int which = 0; which < 2; ++which) {
    Tensor& x = which == 0 ? a : b;
    const Tensor& analytic = g[which == 0 ? va : vb];
    ASSERT_EQ(analytic.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = x[i];
      x[i] = x0 + 1e-6;
      const double fp = loss(a, b);
      x[i] = x0 - 1e-6;
      const double fm = loss(a, b);
      x[i] = x0;
      const double numeric = (fp - fm) / 2e-6;
      EXPECT_NEAR(analytic[i], numeric, tol * std::max(1.0, std::abs(numeric)))
          << "input " << which << " entry " << i;
    }
  }
}

Tensor positive(Rng& rng, Shape s) {
  Tensor t = rng.uniform_tensor(std::move(s), 0.5, 2.0);
  return t;
}

}  // namespace

TEST(Tape, MatmulGradients) {
  Rng rng(1);
  check_binary([](const Var& a, const Var& b) { return matmul(a, b); },
               oracle::random(rng, {3, 4}), oracle::random(rng, {4, 2}));
  check_binary([](const Var& a, const Var& b) { return matmul(a, b, true, false); },
               oracle::random(rng, {4, 3}), oracle::random(rng, {4, 2}));
  check_binary([](const Var& a, const Var& b) { return matmul(a, b, false, true); },
               oracle::random(rng, {3, 4}), oracle::random(rng, {2, 4}));
}

TEST(Tape, BroadcastArithmeticGradients) {
  Rng rng(2);
  const Tensor a = oracle::random(rng, {3, 4});
  check_binary([](const Var& x, const Var& y) { return x + y; }, a, oracle::random(rng, {1, 4}));
  check_binary([](const Var& x, const Var& y) { return x - y; }, a, oracle::random(rng, {3, 1}));
  check_binary([](const Var& x, const Var& y) { return x * y; }, a, oracle::random(rng, {4}));
  check_binary([](const Var& x, const Var& y) { return x / y; }, a, positive(rng, {3, 4}));
}

TEST(Tape, UnaryGradients) {
  Rng rng(4);
  const Tensor a = oracle::random(rng, {2, 5});
  const Tensor unused = Tensor::scalar(0.0);
  using U = std::function<Var(const Var&)>;
  const std::vector<U> fs = {
      [](const Var& x) { return exp(x); },
      [](const Var& x) { return square(x); },
      [](const Var& x) { return sigmoid(x); },
      [](const Var& x) { return silu(x); },
      [](const Var& x) { return softplus(x); },
      [](const Var& x) { return neg(scale(shift(x, 0.3), 2.5)); },
      [](const Var& x) { return transpose(x); },
      [](const Var& x) { return reshape(x, {5, 2}); },
      [](const Var& x) { return mean(x); },
      [](const Var& x) { return sum_lastdim(x); },
      [](const Var& x) { return mean_lastdim(x); },
      [](const Var& x) { return softmax_lastdim(x); },
      [](const Var& x) { return log_softmax_lastdim(x); },
  };
  for (const auto& f : fs) {
    check_binary([&](const Var& x, const Var&) { return f(x); }, a, unused);
  }
  const Tensor p = positive(rng, {2, 5});
  check_binary([](const Var& x, const Var&) { return log(x); }, p, unused);
  check_binary([](const Var& x, const Var&) { return rsqrt(x); }, p, unused);
}

TEST(Tape, MaskedSoftmaxGradients) {
  Rng rng(6);
  const Tensor a = oracle::random(rng, {4, 4});
  check_binary([](const Var& x, const Var&) { return softmax_lastdim(x, Mask::causal()); }, a,
               Tensor::scalar(0.0));
  // masked log-probabilities are -inf, so only unmasked entries are weighted
  const std::vector<std::size_t> visible = {0, 1, 1, 2};
  check_binary(
      [&](const Var& x, const Var&) { return pick_lastdim(log_softmax_lastdim(x, Mask::causal()), visible); },
      a, Tensor::scalar(0.0));
}

TEST(Tape, GatherAndPickGradients) {
  Rng rng(8);
  const std::vector<std::size_t> rows = {2, 0, 2, 1};
  check_binary([&](const Var& x, const Var&) { return gather_rows(x, rows); },
               oracle::random(rng, {3, 4}), Tensor::scalar(0.0));
  const std::vector<std::size_t> cols = {1, 3, 0};
  check_binary([&](const Var& x, const Var&) { return pick_lastdim(x, cols); },
               oracle::random(rng, {3, 4}), Tensor::scalar(0.0));
}

TEST(Tape, CausalSoftmaxMatchesPrefixOracle) {
  Rng rng(9);
  const Tensor s = oracle::random(rng, {5, 5}, 3.0);
  const Tensor p = softmax_lastdim(s, Mask::causal());
  for (std::size_t i = 0; i < 5; ++i) {
    const auto want = oracle::softmax_prefix(std::vector<double>(s.row(i).begin(), s.row(i).end()), i + 1);
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_NEAR(p.at(i, j), j <= i ? want[j] : 0.0, 1e-15);
    }
  }
}

TEST(Tape, FanOutAccumulatesAdjoints) {
  Tape tape;
  const Var x = tape.leaf(Tensor::scalar(3.0));
  const Var y = x * x + x * tape.constant(Tensor::scalar(2.0)) + x;  // x^2 + 3x
  EXPECT_DOUBLE_EQ(tape.backward(y)[x].item(), 9.0);
}

TEST(Tape, UnusedLeafGetsZeroGradient) {
  Tape tape;
  const Var x = tape.leaf(Tensor::scalar(1.0));
  const Var z = tape.leaf(Tensor({2, 2}, 1.0));
  const Gradients g = tape.backward(square(x));
  EXPECT_EQ(g[z], Tensor({2, 2}, 0.0));
}

TEST(Tape, ContractViolations) {
  Tape tape, other;
  const Var x = tape.leaf(Tensor({2}, 1.0));
  EXPECT_THROW(tape.backward(x), ContractError);  // non-scalar root
  const Var y = other.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(tape.backward(y), ContractError);
  EXPECT_THROW(add(x, y), ContractError);
  Tape values_only(false);
  const Var v = values_only.leaf(Tensor::scalar(2.0));
  EXPECT_THROW(values_only.backward(square(v)), ContractError);
}

TEST(Tape, ClipByGlobalNormBoundsTheNorm) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> g = {oracle::random(rng, {3, 3}, 5.0), oracle::random(rng, {4}, 5.0)};
    const double before = global_norm(g);
    const double reported = clip_by_global_norm(g, 1.0);
    EXPECT_DOUBLE_EQ(before, reported);
    EXPECT_LE(global_norm(g), 1.0 + 1e-9);
  }
  std::vector<Tensor> small = {Tensor::vector({0.1, 0.2})};
  clip_by_global_norm(small, 1.0);
  EXPECT_EQ(small[0], Tensor::vector({0.1, 0.2}));
}
