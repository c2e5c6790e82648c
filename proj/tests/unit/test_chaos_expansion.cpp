#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <vector>

#include "mvflow/chaos_expansion.hpp"
#include "mvflow/error.hpp"

using namespace mvflow;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

const Manifold kR1 = Manifold::euclidean(1);
const Manifold kS2 = Manifold::sphere(2);

// dx = dB on the line from a single particle at 0.
ChaosProblem additive(MeasureFunctional f, double t, double dt = 0.01) {
  FieldSet fs{InteractionField::zero(kR1), {InteractionField::moment(kR1, MomentMap::constant(vec({1.0})), {})}};
  return {std::move(f), EmpiricalMeasure::delta(kR1, vec({0.0})), fs, SolverConfig{.dt = dt}, t};
}

MeasureFunctional lin_x() { return MeasureFunctional::linear(ScalarField::coordinate(1, 0)); }
MeasureFunctional sq_x() { return MeasureFunctional::linear(ScalarField::coordinate_square(0)); }

ChaosProblem sphere(double t, double dt) {
  CounterRng rng(5);
  FieldSet fs{InteractionField::kernel(kS2, SmoothKernel::alignment(1.0)),
              {InteractionField::kernel(kS2, SmoothKernel::gaussian_chordal(0.5, 0.8)),
               InteractionField::moment(kS2, MomentMap::rotation(vec({1, 0, 0}), 0.7), {})}};
  return {MeasureFunctional::linear(ScalarField::coordinate(3, 1)),
          EmpiricalMeasure::uniform(kS2, kS2.sample_uniform(4, rng)), fs, SolverConfig{.dt = dt}, t};
}

void expect_within_3_sigma(double value, double stderr, double exact, const char* what) {
  EXPECT_LE(std::abs(value - exact), 3 * stderr + 1e-12) << what << ": " << value << " +- " << stderr;
}

}  // namespace

TEST(Semigroup, SpecExamples) {
  const auto p0 = additive(sq_x(), 0.0);
  const auto at0 = estimate_semigroup(p0, 10, 1);
  EXPECT_EQ(at0.value, 0.0);
  EXPECT_EQ(at0.stderr, 0.0);

  auto pz = sphere(0.2, 0.01);
  pz.fields = FieldSet{InteractionField::zero(kS2), {InteractionField::zero(kS2), InteractionField::zero(kS2)}};
  const auto z = estimate_semigroup(pz, 20, 2);
  EXPECT_DOUBLE_EQ(z.value, pz.f(pz.mu));
  EXPECT_LT(z.stderr, 1e-15);

  const auto p = additive(sq_x(), 1.0);
  const auto e = estimate_semigroup(p, 4000, 3);
  expect_within_3_sigma(e.value, e.stderr, 1.0, "E x_t^2");
  EXPECT_EQ(e.replicas, 4000u);
  EXPECT_EQ(e.failed, 0u);
  EXPECT_THROW(estimate_semigroup(p, 1, 3), Error);

  const auto plain = estimate_semigroup(p, 4000, 3, false);
  expect_within_3_sigma(plain.value, plain.stderr, 1.0, "E x_t^2 without antithetics");
}

TEST(Semigroup, DeterministicAndIndependentOfWorkers) {
  const auto p = sphere(0.1, 0.01);
  setenv("MVFLOW_WORKERS", "1", 1);
  const auto a = estimate_semigroup(p, 64, 9);
  setenv("MVFLOW_WORKERS", "3", 1);
  const auto b = estimate_semigroup(p, 64, 9);
  unsetenv("MVFLOW_WORKERS");
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.stderr, b.stderr);
}

TEST(Semigroup, MarkovComposition) {
  // E f(mu_{t1+t2}) against T_{t1} (T_{t2} f) with one inner path per outer state.
  auto p = sphere(0.2, 0.01);
  const auto direct = estimate_semigroup(p, 4000, 4);
  std::vector<double> comp;
  for (std::uint64_t o = 0; o < 2000; ++o) {
    const auto w1 = NoisePath::generate(2, 0.1, 0.01, 5, o);
    const auto w2 = NoisePath::generate(2, 0.1, 0.01, 6, o);
    const auto mid = evolve_measure(p.mu, p.fields, w1, p.cfg);
    comp.push_back(p.f(evolve_measure(mid, p.fields, w2, p.cfg)));
  }
  const auto c = mean_and_stderr(comp);
  EXPECT_TRUE(agree_within_3_sigma(direct.value, direct.stderr, c.mean, c.stderr))
      << direct.value << " +- " << direct.stderr << " vs " << c.mean << " +- " << c.stderr;
}

TEST(ApplyA, SpecExamples) {
  auto p = sphere(0.2, 0.01);
  FieldSet zero = p.fields;
  zero.diffusion[0] = InteractionField::zero(kS2);
  const auto r0 = apply_A(p.f, p.mu, zero, 0, 1e-2);
  EXPECT_EQ(r0.fd, 0.0);
  EXPECT_EQ(*r0.analytic, 0.0);

  std::vector<double> err;
  for (double eps : {1e-1, 1e-2, 1e-3}) {
    const auto r = apply_A(p.f, p.mu, p.fields, 1, eps);
    err.push_back(std::abs(r.fd - *r.analytic));
  }
  EXPECT_GE(std::log10(err[0] / err[1]), 1.8);

  const auto constant = [](const EmpiricalMeasure&) { return 4.2; };
  EXPECT_EQ(apply_A(constant, p.mu, p.fields, 0, 1e-2), 0.0);
  EXPECT_THROW(apply_A(p.f, p.mu, p.fields, 2, 1e-2), Error);
}

TEST(ApplyA, OnCommonRandomNumberEstimator) {
  // A_1 T_t <x> = 1 for the additive model: the translated measure shifts the mean by eps.
  const auto p = additive(lin_x(), 0.3);
  const auto g = [&](const EmpiricalMeasure& m) {
    ChaosProblem q = p;
    q.mu = m;
    return estimate_semigroup(q, 16, 7).value;
  };
  EXPECT_NEAR(apply_A(g, p.mu, p.fields, 0, 1e-2), 1.0, 1e-10);
}

TEST(KvOrder1, SpecExamples) {
  // tau = t = 0: exactly int <grad f, V_i> dmu.
  const auto s0 = sphere(0.0, 0.01);
  for (int i = 0; i < 2; ++i) {
    const auto e = kv_kernel_order1(s0, 0.0, i, ChaosBudget{.outer = 3, .inner = 1});
    EXPECT_EQ(e.value, s0.f.directional(s0.mu, s0.fields.diffusion[static_cast<std::size_t>(i)]));
    EXPECT_EQ(e.stderr, 0.0);
  }

  auto pz = sphere(0.2, 0.01);
  pz.fields.diffusion = {InteractionField::zero(kS2), InteractionField::zero(kS2)};
  for (double tau : {0.0, 0.1, 0.2}) {
    EXPECT_EQ(kv_kernel_order1(pz, tau, 1, ChaosBudget{.outer = 5, .inner = 1}).value, 0.0);
  }

  for (double tau : {0.0, 0.15, 0.3}) {
    const auto one = kv_kernel_order1(additive(lin_x(), 0.3), tau, 0, ChaosBudget{.outer = 200, .inner = 1});
    expect_within_3_sigma(one.value, one.stderr, 1.0, "a1 for <x>");
    const auto zero = kv_kernel_order1(additive(sq_x(), 0.3), tau, 0, ChaosBudget{.outer = 400, .inner = 1});
    expect_within_3_sigma(zero.value, zero.stderr, 0.0, "a1 for <x^2>");
    if (tau > 0) {
      EXPECT_GT(zero.stderr, 0.0);
    }
  }
}

TEST(KvOrder1, TerminalNodeUsesAnalyticOperator) {
  const auto p = sphere(0.1, 0.01);
  const auto e = kv_kernel_order1(p, 0.1, 1, ChaosBudget{.outer = 50, .inner = 1, .seed = 3});
  EXPECT_EQ(e.inner_n, 0u);
  std::vector<double> manual;
  for (std::uint64_t o = 0; o < 50; ++o) {
    const auto w = NoisePath::from_stream(2, 10, 0.01, derive_stream(3, {0x6b760101u, o}));
    manual.push_back(p.f.directional(evolve_measure(p.mu, p.fields, w, p.cfg), p.fields.diffusion[1]));
  }
  EXPECT_NEAR(e.value, mean_and_stderr(manual).mean, 1e-15);
}

TEST(KvOrder1, BudgetAndArguments) {
  const auto p = additive(lin_x(), 0.3);
  try {
    kv_kernel_order1(p, 0.1, 0, ChaosBudget{.outer = 1000, .inner = 1000, .max_paths = 1000});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::BudgetExhausted);
  }
  EXPECT_THROW(kv_kernel_order1(p, 0.4, 0, ChaosBudget{}), Error);
  EXPECT_THROW(kv_kernel_order1(p, 0.1, 1, ChaosBudget{}), Error);
}

TEST(KvOrder1, RichardsonBiasIsSmall) {
  const auto p = sphere(0.2, 0.01);
  const auto e = kv_kernel_order1(p, 0.1, 1, ChaosBudget{.outer = 50, .inner = 1, .eps = 1e-2, .richardson = true});
  EXPECT_LT(std::abs(e.bias), 1e-4);
}

TEST(Projection, SpecExamples) {
  auto pz = sphere(0.2, 0.01);
  pz.fields.diffusion = {InteractionField::zero(kS2), InteractionField::zero(kS2)};
  for (const auto& e : projection_kernel_order1(pz, uniform_bins(0.2, 4), 0, 200, 1)) {
    EXPECT_EQ(e.value, 0.0);
  }

  auto pc = additive(MeasureFunctional::constant(3.0), 0.4);
  for (const auto& e : projection_kernel_order1(pc, uniform_bins(0.4, 4), 0, 200, 1)) {
    EXPECT_EQ(e.value, 0.0);
  }

  const auto p = additive(lin_x(), 0.4);
  for (const auto& e : projection_kernel_order1(p, uniform_bins(0.4, 4), 0, 100000, 2)) {
    expect_within_3_sigma(e.value, e.stderr, 1.0, "bin projection of <x>");
  }
  EXPECT_THROW(projection_kernel_order1(p, {{0.0, 0.155}}, 0, 10, 2), Error);
}

TEST(Projection, OrthogonalToDisabledNoise) {
  auto p = sphere(0.2, 0.01);
  p.fields = p.fields.without_diffusion(0);
  for (const auto& e : projection_kernel_order1(p, uniform_bins(0.2, 4), 0, 8000, 3)) {
    expect_within_3_sigma(e.value, e.stderr, 0.0, "projection on disabled noise");
  }
}

TEST(ProjectionRegression, ReproducesPolynomialKernels) {
  const auto p = additive(lin_x(), 0.4);
  const auto nodes = kernel_nodes(0.4, 3);
  EXPECT_EQ(nodes, (std::vector<double>{0.0, 0.2, 0.4}));
  for (const auto& e : projection_regression(p, nodes, 8, 0, 40000, 4)) {
    expect_within_3_sigma(e.value, e.stderr, 1.0, "regressed kernel of <x>");
  }
  for (const auto& e : projection_regression(additive(sq_x(), 0.4), nodes, 8, 0, 2000, 4)) {
    EXPECT_EQ(e.value, 0.0);
  }
}

TEST(ClarkOcone, SpecExamples) {
  const auto p = additive(lin_x(), 0.3);
  const auto e = clark_ocone_kernel(p, {0.0, 0.1, 0.3, 0.5}, 0, 20, 1);
  ASSERT_EQ(e.size(), 4u);
  for (int q = 0; q < 3; ++q) EXPECT_NEAR(e[static_cast<std::size_t>(q)].value, 1.0, 1e-12);
  EXPECT_EQ(e[3].value, 0.0);

  auto pz = sphere(0.2, 0.01);
  pz.fields.diffusion[1] = InteractionField::zero(kS2);
  for (const auto& k : clark_ocone_kernel(pz, {0.0, 0.1, 0.2}, 1, 10, 2)) EXPECT_EQ(k.value, 0.0);

  const auto sq = clark_ocone_kernel(additive(sq_x(), 0.3), {0.0, 0.1, 0.3}, 0, 2000, 3);
  for (const auto& k : sq) EXPECT_NEAR(k.value, 0.0, 1e-12);
}

TEST(KvOrder2, SpecExamples) {
  auto pz = sphere(0.2, 0.01);
  pz.fields.diffusion[0] = InteractionField::zero(kS2);
  EXPECT_EQ(kv_kernel_order2(pz, 0.0, 0.1, 0, ChaosBudget{.outer = 3, .inner = 1}).value, 0.0);

  const auto lin = additive(lin_x(), 0.4);
  const auto sq = additive(sq_x(), 0.4);
  for (auto [t1, t2] : {std::pair{0.0, 0.2}, std::pair{0.1, 0.3}, std::pair{0.2, 0.4}}) {
    const auto a = kv_kernel_order2(lin, t1, t2, 0, ChaosBudget{.outer = 50, .inner = 1});
    expect_within_3_sigma(a.value, a.stderr, 0.0, "a2 for <x>");
    const auto b = kv_kernel_order2(sq, t1, t2, 0, ChaosBudget{.outer = 50, .inner = 1});
    expect_within_3_sigma(b.value, b.stderr, 2.0, "a2 for <x^2>");
    EXPECT_NEAR(b.value, 2.0, 1e-6);
  }
  EXPECT_THROW(kv_kernel_order2(sq, 0.2, 0.2, 0, ChaosBudget{}), Error);

  const auto pb = projection_kernel_order2(sq, {0.0, 0.1}, {0.2, 0.4}, 0, 0, 100000, 5);
  expect_within_3_sigma(pb.value, pb.stderr, 2.0, "order-2 projection for <x^2>");
  const auto pa = projection_kernel_order2(lin, {0.0, 0.1}, {0.2, 0.4}, 0, 0, 2000, 5);
  EXPECT_EQ(pa.value, 0.0);
  EXPECT_THROW(projection_kernel_order2(sq, {0.0, 0.2}, {0.1, 0.4}, 0, 0, 10, 5), Error);
}

TEST(KvOrder1, ThreeWayAgreementAdditive) {
  for (const auto& p : {additive(lin_x(), 0.4), additive(sq_x(), 0.4)}) {
    const auto nodes = kernel_nodes(0.4, 3);
    const auto pr = projection_regression(p, nodes, 8, 0, 20000, 11);
    const auto co = clark_ocone_kernel(p, nodes, 0, 2000, 12);
    for (std::size_t q = 0; q < nodes.size(); ++q) {
      const auto kv = kv_kernel_order1(p, nodes[q], 0, ChaosBudget{.outer = 500, .inner = 1, .seed = 13});
      EXPECT_TRUE(agree_within_3_sigma(kv.value, kv.stderr, pr[q].value, pr[q].stderr));
      EXPECT_TRUE(agree_within_3_sigma(kv.value, kv.stderr, co[q].value, co[q].stderr));
      EXPECT_TRUE(agree_within_3_sigma(pr[q].value, pr[q].stderr, co[q].value, co[q].stderr));
    }
  }
}

TEST(Truncation, SpecExamples) {
  auto pz = sphere(0.2, 0.01);
  pz.fields.diffusion = {InteractionField::zero(kS2), InteractionField::zero(kS2)};
  const auto z = truncation_diagnostics(pz, 200, 4, 1);
  EXPECT_LT(z.variance, 1e-15);
  EXPECT_EQ(z.first_order_budget, 0.0);
  EXPECT_NEAR(z.second_order_budget, 0.0, 1e-15);
  EXPECT_NEAR(z.mixed_budget, 0.0, 1e-15);

  const auto a = truncation_diagnostics(additive(lin_x(), 0.4), 4000, 4, 2);
  EXPECT_NEAR(a.first_order_share, 1.0, 1e-9);
  EXPECT_NEAR(a.first_order_budget / a.variance, 1.0, 0.1);
}

TEST(Truncation, ZerothOrderConsistency) {
  const auto p = sphere(0.1, 0.01);
  EXPECT_EQ(estimate_semigroup(p, 500, 8).value, truncation_diagnostics(p, 500, 5, 8).mean);
}

TEST(Truncation, ShortTimeDominanceOnSphere) {
  std::vector<double> share;
  for (double t : {0.2, 0.1, 0.05}) {
    auto p = sphere(t, t / 20);
    const auto r = truncation_diagnostics(p, 10000, 10, 3);
    share.push_back(r.first_order_share);
    EXPECT_GE(r.mixed_budget, -1.0);
  }
  EXPECT_GE(share[1], 0.8);
  EXPECT_LT(share[0], share[1]);
  EXPECT_LT(share[1], share[2]);
}
