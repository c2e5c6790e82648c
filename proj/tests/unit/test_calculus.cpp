#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mvflow/calculus.hpp"
#include "mvflow/error.hpp"

using namespace mvflow;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

const Manifold kS2 = Manifold::sphere(2);

EmpiricalMeasure cloud(std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed);
  return EmpiricalMeasure::uniform(kS2, kS2.sample_uniform(n, rng));
}

InteractionField rotation(Vec axis, double rate = 1.0) {
  return InteractionField::moment(kS2, MomentMap::rotation(std::move(axis), rate), {});
}

std::vector<MeasureFunctional> sphere_functionals() {
  return {MeasureFunctional::linear(ScalarField::gaussian_bump(vec({0, 0.6, 0.8}), 0.7, 2.0)),
          MeasureFunctional::composite(MeasureFunctional::Curve::Exp, ScalarField::coordinate(3, 0)),
          MeasureFunctional::composite(MeasureFunctional::Curve::Sin, ScalarField::coordinate_square(1)),
          MeasureFunctional::pair(SmoothKernel::alignment(1.0)),
          MeasureFunctional::pair(SmoothKernel::gaussian_chordal(1.0, 0.8))};
}

std::vector<InteractionField> sphere_directions() {
  return {rotation(vec({0.2, -0.4, 0.9})),
          InteractionField::kernel(kS2, SmoothKernel::alignment(1.0)),
          InteractionField::kernel(kS2, SmoothKernel::gaussian_chordal(1.0, 0.6))};
}

// Alignment drift with two diffusions, one of them measure-dependent.
FieldSet alignment_model() {
  return {InteractionField::kernel(kS2, SmoothKernel::alignment(1.0)),
          {InteractionField::kernel(kS2, SmoothKernel::gaussian_chordal(0.5, 0.8)),
           rotation(vec({1, 0, 0}), 0.7)}};
}

double exact_analytic(const MeasureFunctional& F, const EmpiricalMeasure& mu, const InteractionField& V) {
  std::vector<Tangent> dir;
  for (const auto& p : mu.points()) dir.push_back(V.evaluate(p, mu));
  return F.pairing(mu, dir);
}

}  // namespace

TEST(AnalyticDerivative, SpecExamples) {
  const auto mu = cloud(5, 1);
  const auto C = MeasureFunctional::constant(3.0);
  for (const auto& p : mu.points()) EXPECT_EQ(C.derivative(mu, p).norm(), 0.0);

  const auto R1 = Manifold::euclidean(1);
  const auto F = MeasureFunctional::linear(ScalarField::coordinate_square(0));
  const auto nu = EmpiricalMeasure::uniform(R1, {vec({-1.5}), vec({0.25}), vec({2.0})});
  for (const auto& p : nu.points()) EXPECT_DOUBLE_EQ(F.derivative(nu, p)[0], 2 * p[0]);
}

TEST(AnalyticDerivative, CompositeAndPairFormulas) {
  const auto mu = cloud(6, 2);
  const auto f = ScalarField::coordinate(3, 2);
  const double m = mu.integrate([&](const Point& x) { return f(x); });
  const auto F = MeasureFunctional::composite(MeasureFunctional::Curve::Tanh, f);
  const auto H = MeasureFunctional::pair(SmoothKernel::alignment(1.0));
  const Vec mean = mu.ambient_mean();
  for (const auto& p : mu.points()) {
    const Vec expected = kS2.project_to_tangent(p, (1 - std::tanh(m) * std::tanh(m)) * f.gradient(p));
    EXPECT_LT((F.derivative(mu, p) - expected).norm(), 1e-14);
    EXPECT_LT((H.derivative(mu, p) - kS2.project_to_tangent(p, 2 * mean)).norm(), 1e-14);
  }
}

TEST(AnalyticDerivative, MatchesPerturbationOracleOnRandomDraws) {
  const auto Fs = sphere_functionals();
  const auto Vs = sphere_directions();
  for (int t = 0; t < 20; ++t) {
    const auto mu = cloud(5, 100 + t);
    for (const auto& F : Fs) {
      for (const auto& V : Vs) {
        const double analytic = F.directional(mu, V);
        const double fd = fd_intrinsic_directional(F, mu, V, 1e-3);
        EXPECT_LE(std::abs(fd - analytic), 1e-4 * std::max(1e-2, std::abs(analytic)))
            << F.describe() << " along " << V.label();
      }
    }
  }
}

TEST(PerturbMeasure, SpecExamples) {
  const auto mu = cloud(7, 3);
  const auto V = rotation(vec({0, 0, 1}));
  const auto same = perturb_measure(mu, V, 0.0);
  for (std::size_t i = 0; i < mu.size(); ++i) EXPECT_EQ(same.point(i), mu.point(i));
  const auto still = perturb_measure(mu, InteractionField::zero(kS2), 0.3);
  for (std::size_t i = 0; i < mu.size(); ++i) EXPECT_EQ(still.point(i), mu.point(i));

  const auto rot = perturb_measure(mu, V, std::numbers::pi / 2);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const Point& x = mu.point(i);
    EXPECT_LT((rot.point(i) - vec({-x[1], x[0], x[2]})).norm(), 1e-8);
    EXPECT_EQ(rot.weight(i), mu.weight(i));
  }
}

TEST(FdIntrinsicDirectional, SpecExamples) {
  const auto mu = cloud(5, 4);
  const auto C = MeasureFunctional::constant(1.7);
  for (double eps : {1e-1, 1e-3}) {
    EXPECT_EQ(fd_intrinsic_directional(C, mu, rotation(vec({0, 1, 0})), eps), 0.0);
  }
  for (const auto& F : sphere_functionals()) {
    EXPECT_EQ(fd_intrinsic_directional(F, mu, InteractionField::zero(kS2), 1e-3), 0.0);
  }
}

TEST(FdIntrinsicDirectional, ErrorIsSecondOrderInEps) {
  const auto mu = cloud(5, 5);
  for (const auto& F : sphere_functionals()) {
    for (const auto& V : sphere_directions()) {
      const double a = F.directional(mu, V);
      std::vector<double> eps{1e-2, 1e-3, 1e-4}, err;
      for (double e : eps) err.push_back(std::abs(fd_intrinsic_directional(F, mu, V, e) - a));
      // Roundoff takes over at 1e-4, so the slope is read off the first two rungs
      // unless the error is already at roundoff there.
      if (err[0] < 1e-12) continue;
      EXPECT_GE(std::log10(err[0] / err[1]), 1.8) << F.describe() << " along " << V.label();
      EXPECT_LT(err[2], 1e-7);
    }
  }
}

TEST(Pairing, LinearInDirection) {
  const auto mu = cloud(8, 6);
  const auto Vs = sphere_directions();
  for (const auto& F : sphere_functionals()) {
    std::vector<Tangent> a, b, ab;
    for (const auto& p : mu.points()) {
      a.push_back(Vs[0].evaluate(p, mu));
      b.push_back(Vs[2].evaluate(p, mu));
      ab.push_back(a.back() + 2.5 * b.back());
    }
    EXPECT_NEAR(F.pairing(mu, ab), F.pairing(mu, a) + 2.5 * F.pairing(mu, b), 1e-10);
    EXPECT_NEAR(F.directional(mu, Vs[1]), exact_analytic(F, mu, Vs[1]), 1e-12);
  }
}

TEST(EmpiricalGradientIdentity, SpecExamples) {
  const auto lin = MeasureFunctional::linear(ScalarField::gaussian_bump(vec({1, 0, 0}), 0.5));
  EXPECT_LT(empirical_gradient_identity(lin, kS2, {vec({0.6, 0.8, 0})}), 1e-6);
  EXPECT_EQ(empirical_gradient_identity(MeasureFunctional::constant(2.0), kS2, {vec({0, 0, 1}), vec({1, 0, 0})}), 0.0);
  const auto comp = MeasureFunctional::composite(MeasureFunctional::Curve::Square, ScalarField::coordinate(3, 1));
  const auto mu = cloud(20, 7);
  EXPECT_LT(empirical_gradient_identity(comp, kS2, {mu.points().begin(), mu.points().end()}), 1e-5);
}

TEST(EmpiricalGradientIdentity, HoldsOnRandomConfigurations) {
  const auto Fs = sphere_functionals();
  for (int t = 0; t < 50; ++t) {
    const auto mu = cloud(3 + t % 7, 200 + t);
    const std::vector<Point> pts(mu.points().begin(), mu.points().end());
    EXPECT_LT(empirical_gradient_identity(Fs[t % Fs.size()], kS2, pts), 1e-5) << Fs[t % Fs.size()].describe();
  }
}

TEST(ChainRule, SpecExamples) {
  const auto mu = cloud(6, 8);
  const auto F = MeasureFunctional::linear(ScalarField::coordinate(3, 0));
  const auto st = chain_rule_residual(F, DifferentiablePath::stationary(), mu, 0.3, 1e-3);
  EXPECT_LT(st.residual, 1e-12);

  const auto rot = chain_rule_residual(F, DifferentiablePath::rotation(vec({0, 0, 1})), mu, 0.0, 1e-3);
  const double expected = -mu.integrate([](const Point& x) { return x[1]; });
  EXPECT_NEAR(rot.analytic, expected, 1e-12);
  EXPECT_NEAR(rot.fd, expected, 1e-6);

  const auto R1 = Manifold::euclidean(1);
  const auto nu = EmpiricalMeasure::uniform(R1, {vec({-1.0}), vec({0.5}), vec({2.5})});
  const auto G = MeasureFunctional::linear(ScalarField::coordinate_square(0));
  const double theta = 0.7;
  const auto tr = chain_rule_residual(G, DifferentiablePath::translation(vec({1.0})), nu, theta, 1e-3);
  EXPECT_NEAR(tr.analytic, 2 * nu.integrate([](const Point& x) { return x[0]; }) + 2 * theta, 1e-12);
  EXPECT_LT(tr.residual, 1e-8);
}

TEST(VariationalFlow, ZeroDirectionAndMeasureFreeFields) {
  const auto mu = cloud(5, 9);
  const auto W = NoisePath::generate(2, 0.2, 0.01, 1, 0);
  const SolverConfig cfg{.dt = 0.01};
  const Point u = vec({0, 1, 0});
  const auto zero = variational_flow(mu, alignment_model(), W, InteractionField::zero(kS2), u, cfg);
  for (const auto& v : zero.variational) EXPECT_EQ(v[0].norm(), 0.0);

  // Without interaction the variational flow vanishes and the Jacobian flow is
  // the classical first variation; check the latter against common-noise FD.
  FieldSet free{rotation(vec({0, 0, 1})), {rotation(vec({1, 0, 0}), 0.8), rotation(vec({0.6, 0.8, 0}), 0.5)}};
  Mat A = Mat::Zero(3, 3);
  A << 0.2, 1.0, 0.0, -0.5, 0.1, 0.7, 0.3, -0.4, 0.6;
  free.drift = InteractionField::moment(kS2, MomentMap(A, vec({0.3, 0, -0.2}), Eigen::MatrixXd(3, 0)), {});
  // The linearized flow is a consistent discretization, not the exact
  // derivative of the discrete map, so the comparison runs on a finer grid.
  const SolverConfig fine{.dt = 0.001, .save_stride = 50};
  const auto Wf = NoisePath::generate(2, 0.2, 0.001, 1, 0);
  const auto sol = variational_flow(mu, free, Wf, rotation(vec({0, 1, 0})), u, fine);
  for (const auto& v : sol.variational) EXPECT_LT(v[0].norm(), 1e-14);
  CounterRng rng(10);
  for (int k = 0; k < 3; ++k) {
    const Tangent w = kS2.random_tangent(u, rng);
    const double h = 1e-5;
    const auto plus = solve_interacting_flow(mu, free, Wf, {kS2.retract(u, h * w)}, fine);
    const auto minus = solve_interacting_flow(mu, free, Wf, {kS2.retract(u, -h * w)}, fine);
    const Vec fd = (plus.tracked.back()[0] - minus.tracked.back()[0]) / (2 * h);
    const Vec an = sol.jacobian.back()[0] * w;
    EXPECT_LT((fd - an).norm(), 1e-3 * an.norm());
  }
}

TEST(VariationalFlow, MatchesCommonNoiseDifferenceQuotient) {
  const auto mu = cloud(200, 11);
  const auto fields = alignment_model();
  const auto psi = rotation(vec({0.3, -0.2, 0.93}));
  const Point u = vec({0.6, 0, 0.8});
  const SolverConfig cfg{.dt = 0.01};
  for (std::uint64_t r = 0; r < 3; ++r) {
    const auto W = NoisePath::generate(2, 0.3, 0.01, 12, r);
    const auto sol = variational_flow(mu, fields, W, psi, u, cfg);
    const double eps = 1e-3;
    const auto plus = solve_interacting_flow(perturb_measure(mu, psi, eps), fields, W, {u}, cfg);
    const auto minus = solve_interacting_flow(perturb_measure(mu, psi, -eps), fields, W, {u}, cfg);
    const Vec fd = (plus.tracked.back()[0] - minus.tracked.back()[0]) / (2 * eps);
    const Vec an = sol.variational.back()[0];
    ASSERT_GT(an.norm(), 1e-3);
    EXPECT_LT((fd - an).norm(), 5e-2 * an.norm());
  }
}

TEST(VariationalFlow, LinearInDirection) {
  const auto mu = cloud(10, 13);
  const auto W = NoisePath::generate(2, 0.2, 0.01, 14, 0);
  const Point u = vec({0, 0, 1});
  const SolverConfig cfg{.dt = 0.01};
  const auto one = variational_flow(mu, alignment_model(), W, rotation(vec({1, 0, 0}), 1.0), u, cfg);
  const auto three = variational_flow(mu, alignment_model(), W, rotation(vec({1, 0, 0}), 3.0), u, cfg);
  for (std::size_t k = 0; k < one.snapshot_count(); ++k) {
    EXPECT_LE((three.variational[k][0] - 3 * one.variational[k][0]).norm(),
              1e-12 * std::max(1.0, one.variational[k][0].norm()));
  }
  EXPECT_EQ(one.variational[0][0].norm(), 0.0);
}

TEST(MalliavinFlow, VanishesBeforeSAndForZeroDiffusion) {
  const auto mu = cloud(5, 15);
  const auto W = NoisePath::generate(2, 0.2, 0.01, 16, 0);
  const SolverConfig cfg{.dt = 0.01};
  const auto sol = malliavin_flow(mu, alignment_model(), W, vec({1, 0, 0}), 0.1, cfg);
  const auto& mf = sol.malliavin_at(0.1);
  for (std::size_t k = 0; k < sol.snapshot_count(); ++k) {
    if (sol.times[k] < 0.1 - 1e-12) {
      EXPECT_EQ(mf.tracked[k][0].norm(), 0.0);
    }
  }
  EXPECT_GT(mf.tracked.back()[0].norm(), 0.0);
  EXPECT_THROW(sol.malliavin_at(0.05), Error);

  const auto fs = alignment_model().without_diffusion(1);
  const auto sol2 = malliavin_flow(mu, fs, W, vec({1, 0, 0}), 0.1, cfg);
  for (const auto& snap : sol2.malliavin_at(0.1).tracked) EXPECT_EQ(snap[0].col(1).norm(), 0.0);
  for (const auto& snap : sol2.malliavin_at(0.1).carriers) {
    for (const auto& blk : snap) EXPECT_EQ(blk.col(1).norm(), 0.0);
  }
}

TEST(MalliavinFunctional, SpecExamples) {
  const auto mu = cloud(5, 17);
  const auto W = NoisePath::generate(2, 0.2, 0.01, 18, 0);
  const auto sol = malliavin_flow(mu, alignment_model(), W, vec({1, 0, 0}), 0.1, SolverConfig{.dt = 0.01});
  EXPECT_EQ(malliavin_functional(MeasureFunctional::constant(1.0), sol, 0.1).norm(), 0.0);
  const auto F = MeasureFunctional::linear(ScalarField::coordinate(3, 0));
  EXPECT_EQ(malliavin_functional(F, sol, 0.1, 5).norm(), 0.0);
  EXPECT_GT(malliavin_functional(F, sol, 0.1).norm(), 0.0);
  try {
    malliavin_functional(F, sol, 0.15);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingAuxiliary);
  }

  // One particle, additive noise on the line: D_s <f, delta_{x_t}> = f'(x_t).
  const auto R1 = Manifold::euclidean(1);
  FieldSet add{InteractionField::zero(R1), {InteractionField::moment(R1, MomentMap::constant(vec({1.0})), {})}};
  const auto Wr = NoisePath::generate(1, 0.5, 0.01, 19, 0);
  const auto one = malliavin_flow(EmpiricalMeasure::delta(R1, vec({0.3})), add, Wr, vec({0.3}), 0.2,
                                  SolverConfig{.dt = 0.01});
  const auto G = MeasureFunctional::linear(ScalarField::coordinate_square(0));
  const double xt = one.final_measure().point(0)[0];
  EXPECT_NEAR(malliavin_functional(G, one, 0.2)[0], 2 * xt, 1e-8);
}

TEST(MalliavinFlow, IntegrationByPartsDuality) {
  // E[F(mu_t) dB^i_j] / dt = E[D_{s_j} F(mu_t)^i] for the increment starting at s_j.
  const auto mu = cloud(4, 20);
  const auto fields = alignment_model();
  const auto F = MeasureFunctional::composite(MeasureFunctional::Curve::Sin, ScalarField::coordinate(3, 2));
  const double dt = 0.01, T = 0.2, s = 0.1;
  const int js = 10;
  const std::size_t reps = 10000;
  for (auto init : {MalliavinInit::StepDerivative, MalliavinInit::FieldValue}) {
    std::vector<double> lhs0, lhs1, rhs0, rhs1;
    for (std::size_t r = 0; r < reps; ++r) {
      const auto W = NoisePath::generate(2, T, dt, 21, r);
      const auto sol = malliavin_flow(mu, fields, W, mu.point(0), s, SolverConfig{.dt = dt}, init);
      const double f = F(sol.final_measure());
      lhs0.push_back(f * W.increment(js, 0) / dt);
      lhs1.push_back(f * W.increment(js, 1) / dt);
      const Eigen::VectorXd d = malliavin_functional(F, sol, s);
      rhs0.push_back(d[0]);
      rhs1.push_back(d[1]);
    }
    for (auto [l, r] : {std::pair{&lhs0, &rhs0}, std::pair{&lhs1, &rhs1}}) {
      const auto a = mean_and_stderr(*l), b = mean_and_stderr(*r);
      EXPECT_LE(std::abs(a.mean - b.mean), 3 * std::hypot(a.stderr, b.stderr))
          << "lhs " << a.mean << " +- " << a.stderr << " rhs " << b.mean << " +- " << b.stderr;
    }
  }
}

TEST(ItoFormulaResidual, ZeroFieldsAndDeterministicDrift) {
  const auto mu = cloud(6, 22);
  const auto F = MeasureFunctional::composite(MeasureFunctional::Curve::Exp, ScalarField::coordinate(3, 1));
  FieldSet zero{InteractionField::zero(kS2), {InteractionField::zero(kS2)}};
  const auto W = NoisePath::generate(1, 0.2, 0.01, 23, 0);
  const auto sol = solve_interacting_flow(mu, zero, W, {}, SolverConfig{.dt = 0.01});
  for (double r : ito_formula_residual(F, sol, zero, W)) EXPECT_LT(std::abs(r), 1e-12);

  // Measure-free drift: the residual is the Heun truncation error, O(dt^2).
  // An interacting drift is frozen over each step, which costs one order.
  Mat A = Mat::Zero(3, 3);
  A << 0.2, 1.0, 0.0, -0.5, 0.1, 0.7, 0.3, -0.4, 0.6;
  FieldSet smooth{InteractionField::moment(kS2, MomentMap(A, vec({0.3, 0, -0.2}), Eigen::MatrixXd(3, 0)), {}), {}};
  FieldSet interacting{InteractionField::kernel(kS2, SmoothKernel::gaussian_chordal(1.0, 0.7)), {}};
  std::vector<double> dts{0.02, 0.01, 0.005}, res, res_int;
  for (double dt : dts) {
    const auto W0 = NoisePath::generate(0, 0.4, dt, 0, 0);
    const auto s = solve_interacting_flow(mu, smooth, W0, {}, SolverConfig{.dt = dt});
    res.push_back(std::abs(ito_formula_residual(F, s, smooth, W0).back()));
    const auto si = solve_interacting_flow(mu, interacting, W0, {}, SolverConfig{.dt = dt});
    res_int.push_back(std::abs(ito_formula_residual(F, si, interacting, W0).back()));
  }
  EXPECT_NEAR(log_log_slope(dts, res), 2.0, 0.25);
  EXPECT_NEAR(log_log_slope(dts, res_int), 1.0, 0.25);
}

TEST(ItoFormulaResidual, RmsHalvesWithStep) {
  const auto mu = cloud(5, 24);
  FieldSet fields{InteractionField::kernel(kS2, SmoothKernel::alignment(1.0)), {rotation(vec({0.5, 0.5, 0.707}), 1.0)}};
  const auto F = MeasureFunctional::linear(ScalarField::coordinate(3, 0));
  const std::vector<double> dts{0.02, 0.01};
  std::vector<double> rms(2, 0.0);
  const std::size_t reps = 200;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto fine = NoisePath::generate(1, 0.4, dts[1], 25, r);
    for (std::size_t k = 0; k < 2; ++k) {
      const auto W = k == 0 ? fine.coarsen(2) : fine;
      const auto s = solve_interacting_flow(mu, fields, W, {}, SolverConfig{.dt = dts[k]});
      const double R = ito_formula_residual(F, s, fields, W).back();
      rms[k] += R * R / reps;
    }
  }
  const double ratio = std::sqrt(rms[1] / rms[0]);
  EXPECT_GT(ratio, 0.5 * 0.7);
  EXPECT_LT(ratio, 0.5 * 1.3);
}
