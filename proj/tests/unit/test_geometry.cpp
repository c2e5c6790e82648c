#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mvflow/error.hpp"
#include "mvflow/geometry.hpp"

using namespace mvflow;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

constexpr double kPi = std::numbers::pi;

// Great-circle geodesic ODE x'' = -|x'|^2 x integrated with classical RK4.
Vec geodesic_rk4(Vec x, Vec v, int steps) {
  const double h = 1.0 / steps;
  auto f = [](const Vec& p, const Vec& q) { return std::pair<Vec, Vec>{q, -q.squaredNorm() * p}; };
  for (int i = 0; i < steps; ++i) {
    auto [a1, b1] = f(x, v);
    auto [a2, b2] = f(x + 0.5 * h * a1, v + 0.5 * h * b1);
    auto [a3, b3] = f(x + 0.5 * h * a2, v + 0.5 * h * b2);
    auto [a4, b4] = f(x + h * a3, v + h * b3);
    x += h / 6 * (a1 + 2 * a2 + 2 * a3 + a4);
    v += h / 6 * (b1 + 2 * b2 + 2 * b3 + b4);
  }
  return x;
}

}  // namespace

TEST(Manifold, ParseAndDimensions) {
  EXPECT_EQ(Manifold::parse("sphere:2").ambient_dim(), 3);
  EXPECT_EQ(Manifold::parse("torus:3").ambient_dim(), 6);
  EXPECT_EQ(Manifold::parse("euclidean:4").ambient_dim(), 4);
  EXPECT_EQ(Manifold::parse("sphere:2").spec(), "sphere:2");
  EXPECT_THROW(Manifold::parse("klein:2"), Error);
  EXPECT_THROW(Manifold::parse("sphere"), Error);
  EXPECT_THROW(Manifold::parse("sphere:0"), Error);
}

TEST(ProjectToManifold, SpecExamples) {
  const auto S = Manifold::sphere(2);
  EXPECT_TRUE(S.project_to_manifold(vec({2, 0, 0})).isApprox(vec({1, 0, 0})));
  const auto E = Manifold::euclidean(3);
  EXPECT_EQ(E.project_to_manifold(vec({1, 2, 3})), vec({1, 2, 3}));
  const auto T = Manifold::flat_torus(1);
  EXPECT_LT((T.project_to_manifold(vec({0.6 * 1.5, 0.8 * 1.5})) - vec({0.6, 0.8})).norm(), 1e-15);
}

TEST(ProjectToManifold, DegeneratePointsThrow) {
  try {
    Manifold::sphere(2).project_to_manifold(vec({0, 0, 0}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegeneratePoint);
  }
  EXPECT_THROW(Manifold::flat_torus(2).project_to_manifold(vec({1, 0, 1e-15, 0})), Error);
}

TEST(ProjectToManifold, FixesOnManifoldPoints) {
  CounterRng rng(1);
  for (const auto& M : {Manifold::sphere(2), Manifold::sphere(4), Manifold::flat_torus(2)}) {
    for (const auto& x : M.sample_uniform(100, rng)) {
      EXPECT_LT((M.project_to_manifold(x) - x).norm(), 1e-12);
    }
  }
}

TEST(ProjectToTangent, SpecExamples) {
  const auto S = Manifold::sphere(2);
  EXPECT_TRUE(S.project_to_tangent(vec({1, 0, 0}), vec({1, 1, 0})).isApprox(vec({0, 1, 0})));
  CounterRng rng(2);
  for (const auto& M : {Manifold::sphere(2), Manifold::flat_torus(2), Manifold::euclidean(3)}) {
    for (const auto& x : M.sample_uniform(20, rng)) {
      const Vec v = M.random_tangent(x, rng);
      EXPECT_LT((M.project_to_tangent(x, v) - v).norm(), 1e-14);
      EXPECT_TRUE(M.is_tangent(x, v));
    }
  }
  // Torus: explicit normal frame oracle.
  const auto T = Manifold::flat_torus(2);
  for (const auto& x : T.sample_uniform(20, rng)) {
    Vec v(4);
    for (int k = 0; k < 4; ++k) v[k] = rng.normal();
    Mat P = Mat::Identity(4, 4);
    for (int b = 0; b < 2; ++b) {
      Vec n = Vec::Zero(4);
      n.segment(2 * b, 2) = x.segment(2 * b, 2);
      P -= n * n.transpose();
    }
    EXPECT_LT((T.project_to_tangent(x, v) - P * v).norm(), 1e-14);
  }
}

TEST(TangentProjector, SymmetricIdempotent) {
  CounterRng rng(3);
  for (const auto& M : {Manifold::sphere(3), Manifold::flat_torus(3), Manifold::euclidean(2)}) {
    for (const auto& x : M.sample_uniform(20, rng)) {
      const Mat P = M.tangent_projector(x);
      EXPECT_LT((P - P.transpose()).norm(), 1e-14);
      EXPECT_LT((P * P - P).norm(), 1e-14);
      EXPECT_NEAR(P.trace(), M.intrinsic_dim(), 1e-12);
      const Mat B = M.tangent_basis(x);
      EXPECT_LT((B.transpose() * B - Mat::Identity(M.intrinsic_dim(), M.intrinsic_dim())).norm(), 1e-12);
      EXPECT_LT((P * B - B).norm(), 1e-12);
    }
  }
}

TEST(ProjectorDerivative, MatchesFiniteDifferences) {
  CounterRng rng(4);
  for (const auto& M : {Manifold::sphere(2), Manifold::flat_torus(2)}) {
    for (const auto& x : M.sample_uniform(10, rng)) {
      Vec v(M.ambient_dim()), w(M.ambient_dim());
      for (int k = 0; k < v.size(); ++k) {
        v[k] = rng.normal();
        w[k] = rng.normal();
      }
      const double h = 1e-6;
      const Vec fd = (M.tangent_projector(x + h * w) * v - M.tangent_projector(x - h * w) * v) / (2 * h);
      EXPECT_LT((M.projector_derivative(x, v) * w - fd).norm(), 1e-7);
    }
  }
}

TEST(Retract, SpecExamples) {
  const auto S = Manifold::sphere(2);
  EXPECT_LT((S.retract(vec({1, 0, 0}), vec({0, kPi / 2, 0})) - vec({0, 1, 0})).norm(), 1e-15);
  CounterRng rng(5);
  for (const auto& M : {Manifold::sphere(2), Manifold::flat_torus(2), Manifold::euclidean(2)}) {
    for (const auto& x : M.sample_uniform(5, rng)) EXPECT_EQ(M.retract(x, Vec::Zero(M.ambient_dim())), x);
  }
}

TEST(Retract, MatchesGeodesicOde) {
  const auto S = Manifold::sphere(2);
  CounterRng rng(6);
  for (const auto& x : S.sample_uniform(50, rng)) {
    const Vec v = 0.3 * S.random_tangent(x, rng);
    EXPECT_LT((S.retract(x, v) - geodesic_rk4(x, v, 400)).norm(), 1e-8);
  }
}

TEST(Retract, ConstantSpeed) {
  CounterRng rng(7);
  for (const auto& M : {Manifold::sphere(2), Manifold::flat_torus(2)}) {
    for (const auto& x : M.sample_uniform(10, rng)) {
      const Vec v = M.random_tangent(x, rng);
      const int n = 200;
      for (int i = 0; i < n; ++i) {
        const double h = 1.0 / n;
        const double d = M.geodesic_distance(M.retract(x, i * h * v), M.retract(x, (i + 1) * h * v));
        ASSERT_NEAR(d / h, v.norm(), 1e-8);
      }
    }
  }
}

TEST(GeodesicDistance, SpecExamples) {
  const auto S = Manifold::sphere(2);
  EXPECT_NEAR(S.geodesic_distance(vec({1, 0, 0}), vec({-1, 0, 0})), kPi, 1e-15);
  EXPECT_EQ(S.geodesic_distance(vec({0, 1, 0}), vec({0, 1, 0})), 0.0);
  const auto T = Manifold::flat_torus(2);
  const Point a = T.torus_point({0.1, 6.2}), b = T.torus_point({6.2, 0.1});
  // Brute force over lattice shifts of the angle difference.
  double best = 1e9;
  for (int i = -2; i <= 2; ++i) {
    for (int j = -2; j <= 2; ++j) {
      best = std::min(best, std::hypot(0.1 - 6.2 + 2 * kPi * i, 6.2 - 0.1 + 2 * kPi * j));
    }
  }
  EXPECT_NEAR(T.geodesic_distance(a, b), best, 1e-12);
  EXPECT_NEAR(best, std::sqrt(2.0) * (2 * kPi - 6.1), 1e-12);
}

TEST(GeodesicDistance, TriangleInequalityAndSymmetry) {
  CounterRng rng(8);
  for (const auto& M : {Manifold::sphere(2), Manifold::flat_torus(2), Manifold::euclidean(3)}) {
    const auto p = M.sample_uniform(600, rng);
    for (int i = 0; i < 200; ++i) {
      const auto &x = p[3 * i], &y = p[3 * i + 1], &z = p[3 * i + 2];
      EXPECT_LE(M.geodesic_distance(x, z), M.geodesic_distance(x, y) + M.geodesic_distance(y, z) + 1e-10);
      EXPECT_EQ(M.geodesic_distance(x, y), M.geodesic_distance(y, x));
      EXPECT_GE(M.geodesic_distance(x, y), 0.0);
    }
  }
}

TEST(BiLipschitz, HoldsOnRandomPairs) {
  CounterRng rng(9);
  for (const auto& M : {Manifold::sphere(2), Manifold::flat_torus(1), Manifold::flat_torus(3)}) {
    const double C = M.bilipschitz_constant();
    EXPECT_DOUBLE_EQ(C, kPi / 2);
    const auto p = M.sample_uniform(20000, rng);
    for (std::size_t i = 0; i < 10000; ++i) {
      const double chord = Manifold::chordal_distance(p[2 * i], p[2 * i + 1]);
      const double geo = M.geodesic_distance(p[2 * i], p[2 * i + 1]);
      ASSERT_LE(chord, geo);
      ASSERT_LE(geo, C * chord);
    }
  }
}

TEST(SampleUniform, SphereMeanAndSingleDraw) {
  const auto S = Manifold::sphere(2);
  CounterRng rng(10);
  const std::size_t n = 100000;
  const auto pts = S.sample_uniform(n, rng);
  Vec m = Vec::Zero(3);
  for (const auto& p : pts) m += p;
  m /= static_cast<double>(n);
  // Each coordinate has variance 1/3 under the uniform law.
  for (int k = 0; k < 3; ++k) EXPECT_LT(std::abs(m[k]), 3 * std::sqrt(1.0 / 3.0 / n));
  const auto one = S.sample_uniform(1, rng);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_TRUE(S.contains(one[0]));
}

TEST(SampleUniform, TorusAnglesPassChiSquare) {
  const auto T = Manifold::flat_torus(1);
  CounterRng rng(11);
  const std::size_t n = 100000;
  const int bins = 20;
  std::vector<double> count(bins, 0.0);
  for (const auto& p : T.sample_uniform(n, rng)) {
    double a = std::atan2(p[1], p[0]);
    if (a < 0) a += 2 * kPi;
    count[std::min(bins - 1, static_cast<int>(a / (2 * kPi) * bins))] += 1;
  }
  double chi2 = 0.0;
  const double expect = static_cast<double>(n) / bins;
  for (double c : count) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 36.19);  // 99th percentile of chi^2 with 19 degrees of freedom
}
