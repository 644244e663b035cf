// SPDX-License-Identifier: Apache-2.0
#include "unipr/layers.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace unipr;

TEST(Gem, ScalarExample) {
  MatD x(2, 2);
  x << 1, 4, 9, 16;
  const RowVec<double> y = gem_pool<double>(x, 2.0);
  EXPECT_NEAR(y[0], std::sqrt(41.0), 1e-12);
  EXPECT_NEAR(y[1], std::sqrt(136.0), 1e-12);
  EXPECT_NEAR(y[0], 6.4031, 1e-4);
  EXPECT_NEAR(y[1], 11.6619, 1e-4);
}

TEST(Gem, MatchesOracleWithClamp) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const MatD x = fixtures::random_matrix(seed, 7, 5);
    const double p = 0.5 + 0.25 * double(seed);
    const auto want = oracle::gem(oracle::to_nested(x), p);
    const RowVec<double> got = gem_pool<double>(x, p);
    for (std::size_t j = 0; j < want.size(); ++j)
      EXPECT_NEAR(got[Eigen::Index(j)], want[j], 1e-12 * std::max(1.0, want[j]));
  }
}

TEST(Gem, MonotoneInP) {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const MatD x = fixtures::random_matrix(seed, 9, 6).cwiseAbs();
    double prev_p = 0.2;
    RowVec<double> prev = gem_pool<double>(x, prev_p);
    for (double p : {0.7, 1.0, 2.0, 3.0, 5.5, 9.0}) {
      const RowVec<double> cur = gem_pool<double>(x, p);
      for (Eigen::Index j = 0; j < cur.size(); ++j)
        EXPECT_LE(prev[j], cur[j] + 1e-12) << "seed " << seed << " p " << prev_p << "->" << p;
      prev = cur;
      prev_p = p;
    }
  }
}

TEST(Gem, P1IsMeanAndLargePApproachesMax) {
  const MatD x = fixtures::random_matrix(3, 10, 4).cwiseAbs();
  const RowVec<double> mean = x.colwise().mean();
  EXPECT_LT((gem_pool<double>(x, 1.0) - mean).cwiseAbs().maxCoeff(), 1e-12);
  const RowVec<double> mx = x.colwise().maxCoeff();
  EXPECT_LT((gem_pool<double>(x, 200.0) - mx).cwiseAbs().maxCoeff(), 0.02 * mx.maxCoeff());
}

TEST(Gem, Errors) {
  EXPECT_THROW(gem_pool<double>(MatD(0, 3), 2.0), Error);
  EXPECT_THROW(gem_pool<double>(MatD::Ones(2, 3), 0.0), Error);
}

TEST(Mlp, MatchesNaiveMatmul) {
  CounterRng rng(derive_key({11}));
  const auto p = init_mlp<double>(4, 5, 2, rng);
  const MatD x = fixtures::random_matrix(5, 3, 4);
  auto affine = [](const oracle::Matrix& a, const LinearParams<double>& l) {
    auto y = oracle::matmul(a, oracle::to_nested(l.weight));
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += l.bias[Eigen::Index(j)];
    return y;
  };
  auto h = affine(oracle::to_nested(x), p.fc1);
  for (auto& row : h)
    for (auto& v : row) v = std::max(v, 0.0);
  const auto want = affine(h, p.fc2);
  const MatD got = mlp_forward(x, p);
  ASSERT_EQ(got.rows(), 3);
  ASSERT_EQ(got.cols(), 2);
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = 0; j < 2; ++j) EXPECT_NEAR(got(i, j), want[i][j], 1e-6);
}

TEST(Mlp, ShapeMismatchIsRejected) {
  CounterRng rng(derive_key({12}));
  const auto p = init_mlp<double>(4, 5, 2, rng);
  EXPECT_THROW(mlp_forward(MatD(3, 5), p), Error);
}

TEST(Mlp, InitIsUniformInFanInBound) {
  CounterRng rng(derive_key({13}));
  const auto l = init_linear<double>(16, 8, rng);
  EXPECT_LE(l.weight.cwiseAbs().maxCoeff(), 0.25);
  EXPECT_LE(l.bias.cwiseAbs().maxCoeff(), 0.25);
  EXPECT_GT(l.weight.cwiseAbs().maxCoeff(), 0.2);
}

TEST(L2Normalize, UnitNormAndZeroPassthrough) {
  RowVec<double> x(3);
  x << 3, 0, 4;
  EXPECT_NEAR(l2_normalize(x).norm(), 1.0, 1e-15);
  const RowVec<double> z = RowVec<double>::Zero(3);
  EXPECT_EQ(l2_normalize(z), z);
}
