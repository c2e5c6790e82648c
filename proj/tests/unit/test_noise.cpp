#include <gtest/gtest.h>

#include <cmath>

#include "mvflow/error.hpp"
#include "mvflow/noise.hpp"
#include "mvflow/random.hpp"

using namespace mvflow;

TEST(NoisePath, SpecExamples) {
  const auto empty = NoisePath::generate(0, 1.0, 1e-2, 1, 0);
  EXPECT_EQ(empty.dimension(), 0);
  EXPECT_EQ(empty.steps(), 100);
  EXPECT_EQ(empty.increments().size(), 0);

  EXPECT_TRUE(NoisePath::generate(3, 0.5, 1e-3, 42, 7) == NoisePath::generate(3, 0.5, 1e-3, 42, 7));
  EXPECT_FALSE(NoisePath::generate(3, 0.5, 1e-3, 42, 7) == NoisePath::generate(3, 0.5, 1e-3, 42, 8));

  const int streams = 10000;
  double s1 = 0, s2 = 0;
  for (int k = 0; k < streams; ++k) {
    const auto p = NoisePath::generate(2, 1.0, 1e-3, 2024, static_cast<std::uint64_t>(k));
    const double b = p.value(p.steps(), 0);
    s1 += b;
    s2 += b * b;
  }
  const double mean = s1 / streams;
  const double var = (s2 - streams * mean * mean) / (streams - 1);
  EXPECT_GE(var, 0.94);
  EXPECT_LE(var, 1.06);
}

TEST(NoisePath, IncrementDependsOnlyOnCoordinates) {
  // Longer horizon and more Brownian motions extend the path without changing
  // the shared entries.
  const auto a = NoisePath::generate(2, 0.1, 1e-2, 5, 3);
  const auto b = NoisePath::generate(3, 0.2, 1e-2, 5, 3);
  for (int j = 0; j < a.steps(); ++j) {
    for (int i = 0; i < 2; ++i) EXPECT_EQ(a.increment(j, i), b.increment(j, i));
  }
}

TEST(NoisePath, QuadraticVariation) {
  const auto p = NoisePath::generate(2, 4.0, 1e-4, 9, 0);
  for (int i = 0; i < 2; ++i) {
    const double qv = p.increments().col(i).squaredNorm() / p.horizon();
    // sd of qv is sqrt(2 dt / T) = 0.007.
    EXPECT_NEAR(qv, 1.0, 0.035);
  }
}

TEST(NoisePath, CoarsenSumsFineIncrements) {
  const auto fine = NoisePath::generate(2, 1.0, 0.125, 1, 1);
  const auto coarse = fine.coarsen(4);
  EXPECT_EQ(coarse.steps(), 2);
  EXPECT_DOUBLE_EQ(coarse.dt(), 0.5);
  for (int i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(coarse.value(2, i), fine.value(8, i));
    EXPECT_DOUBLE_EQ(coarse.increment(0, i), fine.increments().col(i).head(4).sum());
  }
  EXPECT_THROW(fine.coarsen(3), Error);
}

TEST(NoisePath, Transforms) {
  const auto p = NoisePath::generate(2, 1.0, 0.1, 3, 4);
  const auto n = p.negated();
  const auto w = p.without(1);
  const auto s = p.slice(3, 7);
  EXPECT_EQ(s.steps(), 4);
  for (int j = 0; j < p.steps(); ++j) {
    EXPECT_EQ(n.increment(j, 0), -p.increment(j, 0));
    EXPECT_EQ(w.increment(j, 0), p.increment(j, 0));
    EXPECT_EQ(w.increment(j, 1), 0.0);
  }
  EXPECT_EQ(s.increment(0, 1), p.increment(3, 1));
}

TEST(NoisePath, InvalidGrid) {
  for (auto bad : {std::pair{1.0, 0.3}, std::pair{1.0, 0.0}, std::pair{1.0, -0.1}}) {
    try {
      NoisePath::generate(1, bad.first, bad.second, 0, 0);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidGrid);
    }
  }
  EXPECT_EQ(grid_steps(1.0, 1e-3), 1000);
  EXPECT_EQ(grid_steps(0.3, 0.1), 3);
}
