#include <gtest/gtest.h>

#include <cmath>
#include <unordered_set>
#include <vector>

#include "mvflow/random.hpp"

using namespace mvflow;

TEST(Philox, KnownAnswerVectors) {
  // Reference outputs of Philox4x32-10 from the Random123 distribution.
  auto z = philox4x32({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(z[0], 0x6627e8d5u);
  EXPECT_EQ(z[1], 0xe169c58du);
  EXPECT_EQ(z[2], 0xbc57ac4cu);
  EXPECT_EQ(z[3], 0x9b00dbd8u);
  auto f = philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(f[0], 0x408f276du);
  EXPECT_EQ(f[1], 0x41c83b0eu);
  EXPECT_EQ(f[2], 0xa20bc7c6u);
  EXPECT_EQ(f[3], 0x6d5451fdu);
  auto p = philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(p[0], 0xd16cfe09u);
  EXPECT_EQ(p[1], 0x94fdccebu);
  EXPECT_EQ(p[2], 0x5001e420u);
  EXPECT_EQ(p[3], 0x24126ea1u);
}

TEST(DeriveStream, SameLabelsSameStream) {
  EXPECT_EQ(derive_stream(7, {1, 2, 3}), derive_stream(7, {1, 2, 3}));
}

TEST(DeriveStream, LabelOrderMatters) {
  EXPECT_NE(derive_stream(7, {1, 2}), derive_stream(7, {2, 1}));
  EXPECT_NE(derive_stream(7, {1}), derive_stream(7, {1, 0}));
  EXPECT_NE(derive_stream(7, {0}), derive_stream(8, {0}));
}

TEST(DeriveStream, SiblingScanHasNoCollisions) {
  std::unordered_set<std::uint64_t> seen;
  const std::size_t n = 1000000;
  seen.reserve(2 * n);
  for (std::uint64_t i = 0; i < n; ++i) seen.insert(derive_stream(42, {i}));
  EXPECT_EQ(seen.size(), n);
}

TEST(CounterRng, DeterministicAndMoments) {
  CounterRng a(derive_stream(1, {5})), b(derive_stream(1, {5}));
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
  CounterRng r(derive_stream(3, {0}));
  const int n = 200000;
  double s = 0, q = 0, u = 0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    q += z * z;
    const double v = r.uniform();
    ASSERT_GE(v, 0.0);
    ASSERT_LT(v, 1.0);
    u += v;
  }
  EXPECT_NEAR(s / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(q / n, 1.0, 4.0 * std::sqrt(2.0 / n));
  EXPECT_NEAR(u / n, 0.5, 4.0 * std::sqrt(1.0 / 12 / n));
}

TEST(GaussianAt, AddressableAndStandard) {
  const auto s = derive_stream(11, {2});
  EXPECT_EQ(gaussian_at(s, 3, 4), gaussian_at(s, 3, 4));
  EXPECT_NE(gaussian_at(s, 3, 4), gaussian_at(s, 4, 3));
  const int n = 100000;
  double m = 0, q = 0;
  for (int i = 0; i < n; ++i) {
    const double z = gaussian_at(s, static_cast<std::uint64_t>(i), 0);
    m += z;
    q += z * z;
  }
  EXPECT_NEAR(m / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(q / n, 1.0, 4.0 * std::sqrt(2.0 / n));
}
