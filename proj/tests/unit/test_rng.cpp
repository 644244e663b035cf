// SPDX-License-Identifier: Apache-2.0
#include "unipr/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace unipr;

TEST(Rng, CounterStreamsAreReproducible) {
  CounterRng a(derive_key({1, 2, 3})), b(derive_key({1, 2, 3}));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, KeysSeparateStreams) {
  std::set<std::uint64_t> keys;
  for (std::uint64_t p = 0; p < 50; ++p)
    for (std::uint64_t v = 0; v < 4; ++v) keys.insert(derive_key({0, 3, p, v}));
  EXPECT_EQ(keys.size(), 200u);
  EXPECT_NE(derive_key({1, 2}), derive_key({2, 1}));
}

TEST(Rng, UniformAndNormalMoments) {
  CounterRng rng(derive_key({9}));
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, BelowStaysInRange) {
  CounterRng rng(derive_key({4}));
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto x = rng.below(7);
    ASSERT_LT(x, 7u);
    seen.insert(x);
  }
  EXPECT_EQ(seen.size(), 7u);
}
