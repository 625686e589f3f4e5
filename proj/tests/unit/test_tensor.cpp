#include <gtest/gtest.h>

#include "cem/error.hpp"
#include "cem/tensor.hpp"
#include "oracles.hpp"

using namespace cem;

TEST(Tensor, MatmulMatchesTripleLoopForAllTransposes) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.index(6), k = 1 + rng.index(6), n = 1 + rng.index(6);
    const Tensor a = oracle::random(rng, {m, k});
    const Tensor b = oracle::random(rng, {k, n});
    const auto want = oracle::to_tensor(oracle::matmul(oracle::to_mat(a), oracle::to_mat(b)));
    EXPECT_LT(max_abs_diff(matmul(a, b), want), 1e-13);
    EXPECT_LT(max_abs_diff(matmul(transpose(a), b, true, false), want), 1e-13);
    EXPECT_LT(max_abs_diff(matmul(a, transpose(b), false, true), want), 1e-13);
    EXPECT_LT(max_abs_diff(matmul(transpose(a), transpose(b), true, true), want), 1e-13);
  }
}

TEST(Tensor, MatmulRejectsInnerMismatch) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Tensor, ConstructionChecksExtents) {
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW((Tensor::matrix({{1, 2}, {3}})), DimensionError);
  EXPECT_THROW(Tensor({2, 2}).item(), ContractError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.5).item(), 4.5);
}

TEST(Tensor, BroadcastShapesFollowsTrailingAlignment) {
  EXPECT_EQ(broadcast_shapes({3, 1}, {1, 4}), (Shape{3, 4}));
  EXPECT_EQ(broadcast_shapes({5, 3, 4}, {4}), (Shape{5, 3, 4}));
  EXPECT_EQ(broadcast_shapes({1}, {2, 2}), (Shape{2, 2}));
  EXPECT_THROW(broadcast_shapes({3, 2}, {4, 2}), DimensionError);
}

TEST(Tensor, SumToShapeAddsBroadcastCopies) {
  const Tensor g = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(sum_to_shape(g, {1, 3}), (Tensor({1, 3}, {5, 7, 9})));
  EXPECT_EQ(sum_to_shape(g, {2, 1}), (Tensor({2, 1}, {6, 15})));
  EXPECT_EQ(sum_to_shape(g, {1}), Tensor::scalar(21));
  EXPECT_EQ(sum_to_shape(g, {3}), (Tensor({3}, {5, 7, 9})));
  EXPECT_THROW(sum_to_shape(g, {2}), DimensionError);
}

TEST(Tensor, SliceAndConcatAreInverse) {
  Rng rng(5);
  const Tensor a = oracle::random(rng, {4, 7});
  const std::vector<Tensor> parts = {slice_cols(a, 0, 2), slice_cols(a, 2, 5), slice_cols(a, 5, 7)};
  EXPECT_EQ(concat_cols(parts), a);
  const Tensor rows = slice_rows(a, 1, 3);
  EXPECT_EQ(rows.dim(0), 2u);
  EXPECT_DOUBLE_EQ(rows.at(0, 4), a.at(1, 4));
  EXPECT_THROW(slice_rows(a, 3, 5), DimensionError);
  EXPECT_THROW(slice_cols(a, 0, 8), DimensionError);
}

TEST(Tensor, ReshapeKeepsDataAndChecksSize) {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = a.reshaped({3, 2});
  EXPECT_DOUBLE_EQ(b.at(2, 1), 6.0);
  EXPECT_THROW(a.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, ArithmeticRequiresEqualShapes) {
  Tensor a({2, 2}, 1.0);
  EXPECT_THROW(a += Tensor({4}, 1.0), DimensionError);
  const Tensor c = 2.0 * (a + Tensor::identity(2));
  EXPECT_DOUBLE_EQ(c.at(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(c.at(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(l2_norm(Tensor::vector({3, 4})), 5.0);
  EXPECT_DOUBLE_EQ(dot(Tensor::vector({1, 2}).data(), Tensor::vector({3, 4}).data()), 11.0);
}
