#pragma once

// Intrinsic (Wasserstein) calculus for functionals of empirical measures:
// analytic derivatives, perturbation flows and the finite-difference oracles
// used to check them.

#include <functional>
#include <optional>
#include <vector>

#include "mvflow/empirical_measure.hpp"
#include "mvflow/flow_solver.hpp"
#include "mvflow/interaction_fields.hpp"

namespace mvflow {

class MeasureFunctional {
 public:
  enum class Kind { Linear, Composite, PairInteraction };
  /// Smooth curve gamma for composite functionals.
  enum class Curve { Identity, Square, Exp, Sin, Tanh };

  /// <f, mu>.
  static MeasureFunctional linear(ScalarField f);
  /// gamma(<f, mu>).
  static MeasureFunctional composite(Curve gamma, ScalarField f);
  /// sum_{r,s} w_r w_s h(x_r, x_s) for a symmetric kernel h.
  static MeasureFunctional pair(SmoothKernel h);
  static MeasureFunctional constant(double c) { return linear(ScalarField::constant(c)); }

  Kind kind() const { return kind_; }
  const ScalarField& observable() const { return f_; }
  std::string describe() const;

  double value(const EmpiricalMeasure& mu) const;
  double operator()(const EmpiricalMeasure& mu) const { return value(mu); }

  /// D_I F(mu)(x), a tangent vector at x.
  Tangent derivative(const EmpiricalMeasure& mu, const Point& x) const;
  /// D_I F(mu)(x) for every support point of mu.
  std::vector<Tangent> derivative_on_support(const EmpiricalMeasure& mu) const;

  /// int <D_I F(mu)(x), v(x)> mu(dx) for a direction given on the support.
  double pairing(const EmpiricalMeasure& mu, const std::vector<Tangent>& direction) const;
  /// A_V F(mu) with V frozen at mu.
  double directional(const EmpiricalMeasure& mu, const InteractionField& V) const;

  bool has_second_derivative() const { return kind_ != Kind::PairInteraction; }
  /// A_W A_V F(mu): derivative along W(., mu) of mu -> A_{V(., mu)} F(mu).
  /// Throws UnsupportedOrder for pair functionals.
  double second_directional(const EmpiricalMeasure& mu, const InteractionField& V,
                            const InteractionField& W) const;

  /// Lipschitz constant of F w.r.t. W2 when known (used for sanity bounds).
  std::optional<double> lipschitz_bound(const Manifold& m) const;

 private:
  Kind kind_ = Kind::Linear;
  Curve curve_ = Curve::Identity;
  ScalarField f_ = ScalarField::constant(0.0);
  std::optional<SmoothKernel> h_;
};

double curve_value(MeasureFunctional::Curve c, double m);
double curve_d1(MeasureFunctional::Curve c, double m);
double curve_d2(MeasureFunctional::Curve c, double m);

/// Deterministic flow of a vector field for time eps, applied to every atom:
/// ambient RK4 with nearest-point projection after each substep. substeps = 0
/// selects max(1, ceil(|eps| / 1e-3)).
using DirectionFn = std::function<Vec(const Point&)>;
std::vector<Point> flow_points(const Manifold& m, const std::vector<Point>& points, const DirectionFn& v,
                               double eps, int substeps = 0);
/// mu o (Phi^V_eps)^{-1} with V frozen at mu.
EmpiricalMeasure perturb_measure(const EmpiricalMeasure& mu, const InteractionField& V, double eps,
                                 int substeps = 0);
/// Same, with V frozen at a different measure `frozen_at`.
EmpiricalMeasure perturb_measure(const EmpiricalMeasure& mu, const BoundField& V, double eps,
                                 int substeps = 0);

/// (F(mu^{+eps}) - F(mu^{-eps})) / 2 eps.
double fd_intrinsic_directional(const MeasureFunctional& F, const EmpiricalMeasure& mu,
                                const InteractionField& V, double eps);

/// Max over support points of |FD gradient of (u_1..u_n) -> F(mu^n) at u_i
/// minus (1/n) D_I F(mu^n)(u_i)|, relative to the largest analytic value.
double empirical_gradient_identity(const MeasureFunctional& F, const Manifold& m,
                                   const std::vector<Point>& points, double h = 1e-4);

/// theta -> x_theta(u), with analytic velocity.
struct DifferentiablePath {
  std::function<Point(const Point&, double)> map;
  std::function<Vec(const Point&, double)> velocity;

  static DifferentiablePath stationary();
  /// x_theta(u) = u + theta v (Euclidean spaces).
  static DifferentiablePath translation(Vec v);
  /// Rotation by angle rate*theta about a unit axis (sphere:2).
  static DifferentiablePath rotation(Vec axis, double rate = 1.0);
};

struct ChainRuleResult {
  double fd = 0.0;
  double analytic = 0.0;
  double residual = 0.0;
};
ChainRuleResult chain_rule_residual(const MeasureFunctional& F, const DifferentiablePath& path,
                                    const EmpiricalMeasure& mu, double theta, double eps);

/// D_I^psi x(u, t) along the solver grid (tracked point u, carriers from mu0).
FlowSolution variational_flow(const EmpiricalMeasure& mu0, const FieldSet& fields, const NoisePath& noise,
                              const InteractionField& psi, const Point& u, const SolverConfig& cfg);
/// D_s x(u, t) for one s.
FlowSolution malliavin_flow(const EmpiricalMeasure& mu0, const FieldSet& fields, const NoisePath& noise,
                            const Point& u, double s, const SolverConfig& cfg,
                            MalliavinInit init = MalliavinInit::FieldValue);

/// D_s F(mu_t) (one entry per Brownian motion) at snapshot `snapshot`
/// (default: last). Zero when s exceeds the snapshot time.
Eigen::VectorXd malliavin_functional(const MeasureFunctional& F, const FlowSolution& sol, double s,
                                     std::optional<std::size_t> snapshot = std::nullopt);

/// R(t_k) = F(mu_{t_k}) - F(mu_0) - sum over steps of trapezoidal
/// (Stratonovich) sums of A_{V_0} F dt + sum_i A_{V_i} F dB^i. Needs a
/// snapshot at every step.
std::vector<double> ito_formula_residual(const MeasureFunctional& F, const FlowSolution& sol,
                                         const FieldSet& fields, const NoisePath& noise);

}  // namespace mvflow
