#include "mvflow/calculus.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "mvflow/error.hpp"

namespace mvflow {

double curve_value(MeasureFunctional::Curve c, double m) {
  using C = MeasureFunctional::Curve;
  switch (c) {
    case C::Identity: return m;
    case C::Square: return m * m;
    case C::Exp: return std::exp(m);
    case C::Sin: return std::sin(m);
    case C::Tanh: return std::tanh(m);
  }
  return m;
}

double curve_d1(MeasureFunctional::Curve c, double m) {
  using C = MeasureFunctional::Curve;
  switch (c) {
    case C::Identity: return 1.0;
    case C::Square: return 2.0 * m;
    case C::Exp: return std::exp(m);
    case C::Sin: return std::cos(m);
    case C::Tanh: {
      const double ch = std::cosh(m);
      return 1.0 / (ch * ch);
    }
  }
  return 1.0;
}

double curve_d2(MeasureFunctional::Curve c, double m) {
  using C = MeasureFunctional::Curve;
  switch (c) {
    case C::Identity: return 0.0;
    case C::Square: return 2.0;
    case C::Exp: return std::exp(m);
    case C::Sin: return -std::sin(m);
    case C::Tanh: {
      const double ch = std::cosh(m);
      return -2.0 * std::tanh(m) / (ch * ch);
    }
  }
  return 0.0;
}

MeasureFunctional MeasureFunctional::linear(ScalarField f) {
  MeasureFunctional F;
  F.kind_ = Kind::Linear;
  F.f_ = std::move(f);
  return F;
}

MeasureFunctional MeasureFunctional::composite(Curve gamma, ScalarField f) {
  MeasureFunctional F;
  F.kind_ = Kind::Composite;
  F.curve_ = gamma;
  F.f_ = std::move(f);
  return F;
}

MeasureFunctional MeasureFunctional::pair(SmoothKernel h) {
  MeasureFunctional F;
  F.kind_ = Kind::PairInteraction;
  F.h_ = std::move(h);
  return F;
}

std::string MeasureFunctional::describe() const {
  static const char* curves[] = {"identity", "square", "exp", "sin", "tanh"};
  switch (kind_) {
    case Kind::Linear: return "linear(" + f_.name() + ")";
    case Kind::Composite: return std::string("composite(") + curves[static_cast<int>(curve_)] + "," + f_.name() + ")";
    case Kind::PairInteraction: return "pair(" + h_->name() + ")";
  }
  return {};
}

double MeasureFunctional::value(const EmpiricalMeasure& mu) const {
  switch (kind_) {
    case Kind::Linear: return mu.integrate([&](const Point& x) { return f_.value(x); });
    case Kind::Composite: return curve_value(curve_, mu.integrate([&](const Point& x) { return f_.value(x); }));
    case Kind::PairInteraction: {
      double s = 0.0;
      for (std::size_t r = 0; r < mu.size(); ++r) {
        double inner = 0.0;
        for (std::size_t q = 0; q < mu.size(); ++q) inner += mu.weight(q) * h_->value(mu.point(r), mu.point(q));
        s += mu.weight(r) * inner;
      }
      return s;
    }
  }
  return 0.0;
}

Tangent MeasureFunctional::derivative(const EmpiricalMeasure& mu, const Point& x) const {
  const Manifold& M = mu.manifold();
  switch (kind_) {
    case Kind::Linear: return M.project_to_tangent(x, f_.gradient(x));
    case Kind::Composite: {
      const double m = mu.integrate([&](const Point& y) { return f_.value(y); });
      return curve_d1(curve_, m) * M.project_to_tangent(x, f_.gradient(x));
    }
    case Kind::PairInteraction: {
      Vec g = Vec::Zero(x.size());
      for (std::size_t q = 0; q < mu.size(); ++q) g += mu.weight(q) * h_->grad_u(x, mu.point(q));
      return 2.0 * M.project_to_tangent(x, g);
    }
  }
  return Vec::Zero(x.size());
}

std::vector<Tangent> MeasureFunctional::derivative_on_support(const EmpiricalMeasure& mu) const {
  const Manifold& M = mu.manifold();
  std::vector<Tangent> out(mu.size());
  double scale = 1.0;
  if (kind_ == Kind::Composite) scale = curve_d1(curve_, mu.integrate([&](const Point& y) { return f_.value(y); }));
  for (std::size_t r = 0; r < mu.size(); ++r) {
    if (kind_ == Kind::PairInteraction) {
      out[r] = derivative(mu, mu.point(r));
    } else {
      out[r] = scale * M.project_to_tangent(mu.point(r), f_.gradient(mu.point(r)));
    }
  }
  return out;
}

double MeasureFunctional::pairing(const EmpiricalMeasure& mu, const std::vector<Tangent>& direction) const {
  if (direction.size() != mu.size()) throw Error(ErrorKind::InvalidArgument, "direction must match the support");
  const auto d = derivative_on_support(mu);
  double s = 0.0;
  for (std::size_t r = 0; r < mu.size(); ++r) s += mu.weight(r) * d[r].dot(direction[r]);
  return s;
}

double MeasureFunctional::directional(const EmpiricalMeasure& mu, const InteractionField& V) const {
  const BoundField B = V.bind(mu);
  std::vector<Tangent> v(mu.size());
  for (std::size_t r = 0; r < mu.size(); ++r) v[r] = B.value(mu.point(r));
  return pairing(mu, v);
}

double MeasureFunctional::second_directional(const EmpiricalMeasure& mu, const InteractionField& V,
                                             const InteractionField& W) const {
  if (kind_ == Kind::PairInteraction) {
    throw Error(ErrorKind::UnsupportedOrder, "second intrinsic derivative of pair functionals is FD-only");
  }
  const BoundField Bv = V.bind(mu);
  const BoundField Bw = W.bind(mu);
  const std::size_t R = mu.size();
  std::vector<Eigen::MatrixXd> moves(R);
  std::vector<Vec> vv(R);
  for (std::size_t r = 0; r < R; ++r) {
    moves[r] = Eigen::MatrixXd(Bw.value(mu.point(r)));
    vv[r] = Bv.value(mu.point(r));
  }
  MeanFieldSummary summary;
  const bool mf = !V.measure_free();
  if (mf) summary = Bv.summarize(moves);
  double lv = 0.0, lw = 0.0, dl = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    const Point& x = mu.point(r);
    const Vec g = f_.gradient(x);
    const Vec w = moves[r].col(0);
    Vec dv = Bv.jacobian(x) * w;
    if (mf) dv += Bv.mean_field(x, summary).col(0);
    lv += mu.weight(r) * g.dot(vv[r]);
    lw += mu.weight(r) * g.dot(w);
    dl += mu.weight(r) * ((f_.hessian(x) * w).dot(vv[r]) + g.dot(dv));
  }
  if (kind_ == Kind::Linear) return dl;
  const double m = mu.integrate([&](const Point& y) { return f_.value(y); });
  return curve_d2(curve_, m) * lw * lv + curve_d1(curve_, m) * dl;
}

std::optional<double> MeasureFunctional::lipschitz_bound(const Manifold& m) const {
  if (kind_ == Kind::Linear) return f_.lipschitz_bound(m);
  if (kind_ == Kind::Composite && curve_ == Curve::Identity) return f_.lipschitz_bound(m);
  return std::nullopt;
}

// ------------------------------------------------------------- perturbations

std::vector<Point> flow_points(const Manifold& m, const std::vector<Point>& points, const DirectionFn& v,
                               double eps, int substeps) {
  if (eps == 0.0) return points;
  if (substeps <= 0) substeps = std::max(1, static_cast<int>(std::ceil(std::abs(eps) / 1e-3)));
  const double h = eps / substeps;
  // RK4 for the ambient field y -> V(pi(y)), which is tangent on M and whose
  // flow preserves M; projecting after each step keeps the order.
  auto F = [&](const Vec& y) { return v(m.project_to_manifold(y)); };
  std::vector<Point> out(points);
  for (auto& x : out) {
    for (int s = 0; s < substeps; ++s) {
      const Vec k1 = v(x);
      const Vec k2 = F(x + 0.5 * h * k1);
      const Vec k3 = F(x + 0.5 * h * k2);
      const Vec k4 = F(x + h * k3);
      const Vec incr = (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      if (incr.isZero(0.0)) continue;
      x = m.project_to_manifold(x + incr);
    }
    if (!x.allFinite()) throw Error(ErrorKind::NonFinite, "perturbation flow diverged");
  }
  return out;
}

EmpiricalMeasure perturb_measure(const EmpiricalMeasure& mu, const BoundField& V, double eps, int substeps) {
  if (eps == 0.0) return mu;
  std::vector<Point> pts(mu.points().begin(), mu.points().end());
  return mu.relocated(flow_points(mu.manifold(), pts, [&](const Point& x) { return V.value(x); }, eps, substeps));
}

EmpiricalMeasure perturb_measure(const EmpiricalMeasure& mu, const InteractionField& V, double eps, int substeps) {
  if (eps == 0.0) return mu;
  return perturb_measure(mu, V.bind(mu), eps, substeps);
}

double fd_intrinsic_directional(const MeasureFunctional& F, const EmpiricalMeasure& mu,
                                const InteractionField& V, double eps) {
  if (!(eps > 0)) throw Error(ErrorKind::InvalidArgument, "eps must be positive");
  const BoundField B = V.bind(mu);
  return (F(perturb_measure(mu, B, eps)) - F(perturb_measure(mu, B, -eps))) / (2 * eps);
}

double empirical_gradient_identity(const MeasureFunctional& F, const Manifold& m,
                                   const std::vector<Point>& points, double h) {
  const auto mu = EmpiricalMeasure::uniform(m, points);
  const auto an = F.derivative_on_support(mu);
  const double n = static_cast<double>(points.size());
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Mat B = m.tangent_basis(points[i]);
    Vec g = Vec::Zero(m.ambient_dim());
    for (int a = 0; a < B.cols(); ++a) {
      auto plus = points, minus = points;
      plus[i] = m.retract(points[i], h * B.col(a));
      minus[i] = m.retract(points[i], -h * B.col(a));
      const double d = (F(mu.relocated(std::move(plus))) - F(mu.relocated(std::move(minus)))) / (2 * h);
      g += d * B.col(a);
    }
    worst = std::max(worst, (g - an[i] / n).norm());
    scale = std::max(scale, (an[i] / n).norm());
  }
  if (worst == 0.0) return 0.0;
  return scale > 0 ? worst / scale : std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------- chain rule

DifferentiablePath DifferentiablePath::stationary() {
  return {[](const Point& u, double) { return u; }, [](const Point& u, double) { return Vec(Vec::Zero(u.size())); }};
}

DifferentiablePath DifferentiablePath::translation(Vec v) {
  return {[v](const Point& u, double th) { return Point(u + th * v); }, [v](const Point&, double) { return v; }};
}

DifferentiablePath DifferentiablePath::rotation(Vec axis, double rate) {
  if (axis.size() != 3) throw Error(ErrorKind::InvalidArgument, "rotation path needs a 3-vector axis");
  axis.normalize();
  auto rotate = [axis, rate](const Point& u, double th) {
    const Eigen::Vector3d a = axis, x = u;
    const double c = std::cos(rate * th), s = std::sin(rate * th);
    const Eigen::Vector3d y = x * c + a.cross(x) * s + a * a.dot(x) * (1 - c);
    return Point(y);
  };
  return {rotate, [axis, rate, rotate](const Point& u, double th) {
            const Eigen::Vector3d a = axis, y = rotate(u, th);
            return Vec(rate * a.cross(y));
          }};
}

ChainRuleResult chain_rule_residual(const MeasureFunctional& F, const DifferentiablePath& path,
                                    const EmpiricalMeasure& mu, double theta, double eps) {
  auto at = [&](double th) { return mu.pushforward([&](const Point& u) { return path.map(u, th); }); };
  ChainRuleResult r;
  r.fd = (F(at(theta + eps)) - F(at(theta - eps))) / (2 * eps);
  const auto mt = at(theta);
  std::vector<Tangent> vel(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) vel[i] = path.velocity(mu.point(i), theta);
  r.analytic = F.pairing(mt, vel);
  r.residual = std::abs(r.fd - r.analytic);
  return r;
}

// ------------------------------------------------------------ linear flows

FlowSolution variational_flow(const EmpiricalMeasure& mu0, const FieldSet& fields, const NoisePath& noise,
                              const InteractionField& psi, const Point& u, const SolverConfig& cfg) {
  AuxiliaryRequest aux;
  aux.variational = psi;
  aux.jacobian = true;
  return solve_interacting_flow(mu0, fields, noise, {u}, cfg, aux);
}

FlowSolution malliavin_flow(const EmpiricalMeasure& mu0, const FieldSet& fields, const NoisePath& noise,
                            const Point& u, double s, const SolverConfig& cfg, MalliavinInit init) {
  AuxiliaryRequest aux;
  aux.malliavin_times = {s};
  aux.malliavin_init = init;
  return solve_interacting_flow(mu0, fields, noise, {u}, cfg, aux);
}

Eigen::VectorXd malliavin_functional(const MeasureFunctional& F, const FlowSolution& sol, double s,
                                     std::optional<std::size_t> snapshot) {
  if (sol.times.empty()) throw Error(ErrorKind::MissingAuxiliary, "empty flow solution");
  const std::size_t k = snapshot.value_or(sol.times.size() - 1);
  if (k >= sol.times.size()) throw Error(ErrorKind::InvalidArgument, "snapshot out of range");
  if (s > sol.times[k] + 1e-12 * std::max(1.0, s)) {
    const int n = sol.malliavin.empty() || sol.malliavin.front().carriers.empty()
                      ? 0
                      : static_cast<int>(sol.malliavin.front().carriers.front().front().cols());
    return Eigen::VectorXd::Zero(n);
  }
  const MalliavinFlow& flow = sol.malliavin_at(s);
  const EmpiricalMeasure& mu = sol.measures[k];
  const auto d = F.derivative_on_support(mu);
  const auto& blocks = flow.carriers[k];
  Eigen::VectorXd out = Eigen::VectorXd::Zero(blocks.front().cols());
  for (std::size_t r = 0; r < mu.size(); ++r) {
    out += mu.weight(r) * (blocks[r].transpose() * Eigen::VectorXd(d[r]));
  }
  return out;
}

std::vector<double> ito_formula_residual(const MeasureFunctional& F, const FlowSolution& sol,
                                         const FieldSet& fields, const NoisePath& noise) {
  const std::size_t K = sol.times.size();
  for (std::size_t k = 0; k < K; ++k) {
    if (sol.steps[k] != static_cast<int>(k)) {
      throw Error(ErrorKind::InvalidArgument, "Ito residual needs a snapshot at every step");
    }
  }
  if (K - 1 != static_cast<std::size_t>(noise.steps())) {
    throw Error(ErrorKind::InvalidArgument, "noise path does not match the solution grid");
  }
  const int n = fields.noise_dim();
  std::vector<double> a0(K);
  std::vector<std::vector<double>> ai(static_cast<std::size_t>(n), std::vector<double>(K));
  for (std::size_t k = 0; k < K; ++k) {
    a0[k] = F.directional(sol.measures[k], fields.drift);
    for (int i = 0; i < n; ++i) ai[i][k] = F.directional(sol.measures[k], fields.diffusion[i]);
  }
  const double F0 = F(sol.measures[0]);
  std::vector<double> R(K, 0.0);
  double integral = 0.0;
  const double dt = noise.dt();
  for (std::size_t k = 0; k + 1 < K; ++k) {
    integral += 0.5 * (a0[k] + a0[k + 1]) * dt;
    for (int i = 0; i < n; ++i) integral += 0.5 * (ai[i][k] + ai[i][k + 1]) * noise.increment(static_cast<int>(k), i);
    R[k + 1] = F(sol.measures[k + 1]) - F0 - integral;
  }
  return R;
}

}  // namespace mvflow
