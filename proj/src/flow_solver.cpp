#include "mvflow/flow_solver.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "mvflow/error.hpp"
#include "mvflow/parallel.hpp"

namespace mvflow {

using Dyn = Eigen::MatrixXd;

bool FieldSet::measure_free() const {
  if (!drift.measure_free()) return false;
  for (const auto& f : diffusion) {
    if (!f.measure_free()) return false;
  }
  return true;
}

FieldSet FieldSet::without_diffusion(int i) const {
  FieldSet copy = *this;
  if (i >= 0 && i < noise_dim()) copy.diffusion[i] = InteractionField::zero(manifold());
  return copy;
}

void FieldSet::require_manifold(const Manifold& m) const {
  require_same_manifold(drift.manifold(), m, "drift field");
  for (const auto& f : diffusion) require_same_manifold(f.manifold(), m, "diffusion field");
}

const MalliavinFlow& FlowSolution::malliavin_at(double s) const {
  for (const auto& m : malliavin) {
    if (std::abs(m.s - s) <= 1e-12 * std::max(1.0, std::abs(s))) return m;
  }
  throw Error(ErrorKind::MissingAuxiliary, "no Malliavin flow recorded for s = " + std::to_string(s));
}

namespace {

using MeasureAt = std::function<std::span<const Point>(int)>;

std::vector<BoundField> bind_all(const FieldSet& f, std::span<const Point> pts,
                                 std::span<const double> w) {
  std::vector<BoundField> b;
  b.reserve(1 + f.diffusion.size());
  b.push_back(f.drift.bind_points(pts, w));
  for (const auto& d : f.diffusion) b.push_back(d.bind_points(pts, w));
  return b;
}

void require_finite(const Point& p, int step) {
  if (!p.allFinite()) {
    throw Error(ErrorKind::NonFinite, "non-finite coordinate after step " + std::to_string(step));
  }
}

// Everything about one point's step that the linearized flows need.
struct Trace {
  Point x;
  Point x_star;
  Point x_new;
  std::vector<Vec> ex, exs;
  std::vector<Mat> jx, jxs;
};

class Stepper {
 public:
  Stepper(const Manifold& m, const SolverConfig& cfg, double dt, int noise)
      : M_(m), cfg_(cfg), dt_(dt), coef_(static_cast<std::size_t>(noise) + 1, 0.0) {}

  void set_step(const NoisePath& w, int step) {
    coef_[0] = dt_;
    for (int i = 0; i < w.dimension(); ++i) coef_[i + 1] = w.increment(step, i);
  }

  std::span<const double> coef() const { return coef_; }

  Vec combo(const std::vector<BoundField>& b, const Point& x) const {
    Vec a = Vec::Zero(x.size());
    for (std::size_t k = 0; k < b.size(); ++k) {
      if (coef_[k] != 0.0) a += coef_[k] * b[k].value(x);
    }
    return a;
  }

  Point advance(const std::vector<BoundField>& b, const Point& x) const {
    if (cfg_.scheme == Scheme::ItoEulerCorrected) {
      Vec a = combo(b, x);
      Vec c = Vec::Zero(x.size());
      for (std::size_t k = 1; k < b.size(); ++k) c += b[k].jacobian(x) * b[k].value(x);
      a += 0.5 * dt_ * M_.project_to_tangent(x, c);
      if (a.isZero(0.0)) return x;
      const Point out = M_.retract(x, a);
      return cfg_.renormalize ? M_.project_to_manifold(out) : out;
    }
    const Vec a = combo(b, x);
    if (!cfg_.renormalize) {
      const Point xs = x + a;
      return x + 0.5 * (a + combo(b, xs));
    }
    const Point xs = M_.retract(x, a);
    const Vec as = combo(b, xs);
    const Vec step = 0.5 * (a + M_.project_to_tangent(x, as));
    // A vanishing step leaves the point bitwise untouched.
    if (step.isZero(0.0)) return x;
    return M_.project_to_manifold(M_.retract(x, step));
  }

  void traced(const std::vector<BoundField>& b, const Point& x, Trace& t) const {
    const std::size_t K = b.size();
    t.x = x;
    t.ex.resize(K);
    t.exs.resize(K);
    t.jx.resize(K);
    t.jxs.resize(K);
    Vec a = Vec::Zero(x.size());
    for (std::size_t k = 0; k < K; ++k) {
      t.ex[k] = b[k].value(x);
      t.jx[k] = b[k].jacobian(x);
      a += coef_[k] * t.ex[k];
    }
    t.x_star = cfg_.renormalize ? M_.retract(x, a) : Point(x + a);
    Vec as = Vec::Zero(x.size());
    for (std::size_t k = 0; k < K; ++k) {
      t.exs[k] = b[k].value(t.x_star);
      t.jxs[k] = b[k].jacobian(t.x_star);
      as += coef_[k] * t.exs[k];
    }
    if (cfg_.renormalize) {
      const Vec step = 0.5 * (a + M_.project_to_tangent(x, as));
      t.x_new = step.isZero(0.0) ? x : M_.project_to_manifold(M_.retract(x, step));
    } else {
      t.x_new = x + 0.5 * (a + as);
    }
  }

 private:
  const Manifold& M_;
  SolverConfig cfg_;
  double dt_;
  std::vector<double> coef_;
};

double checked_dt(const NoisePath& w, const SolverConfig& cfg) {
  if (!(cfg.dt > 0)) throw Error(ErrorKind::InvalidGrid, "time step must be positive");
  if (cfg.save_stride < 1) throw Error(ErrorKind::InvalidGrid, "save_stride must be at least 1");
  if (std::abs(w.dt() - cfg.dt) > 1e-12 * cfg.dt) {
    throw Error(ErrorKind::InvalidGrid, "noise grid dt " + std::to_string(w.dt()) +
                                            " differs from solver dt " + std::to_string(cfg.dt));
  }
  return w.dt();
}

struct RunOptions {
  const MeasureAt* frozen = nullptr;
  std::vector<std::vector<Point>>* record = nullptr;
  bool snapshots = true;
};

FlowSolution run(const EmpiricalMeasure& mu0, const FieldSet& fields, const NoisePath& W,
                 const std::vector<Point>& tracked, const SolverConfig& cfg,
                 const AuxiliaryRequest& aux, const RunOptions& opt) {
  const Manifold& M = mu0.manifold();
  fields.require_manifold(M);
  for (const auto& u : tracked) {
    if (u.size() != M.ambient_dim() || !M.contains(u)) {
      throw Error(ErrorKind::ManifoldMismatch, "tracked point not on " + M.spec());
    }
  }
  const int n = fields.noise_dim();
  if (W.dimension() != n && !(W.steps() == 0 && n == 0)) {
    throw Error(ErrorKind::InvalidArgument, "noise path has " + std::to_string(W.dimension()) +
                                                " components, fields need " + std::to_string(n));
  }
  const double dt = checked_dt(W, cfg);
  const int steps = W.steps();
  const int N = M.ambient_dim();
  const bool linear = aux.any();
  if (linear && cfg.scheme != Scheme::StratonovichHeun) {
    throw Error(ErrorKind::InvalidArgument, "auxiliary flows require the Stratonovich-Heun scheme");
  }
  if (linear && opt.frozen) {
    throw Error(ErrorKind::InvalidArgument, "auxiliary flows are not available for frozen measure paths");
  }

  // Malliavin block offsets.
  std::vector<int> mall_step;
  for (double s : aux.malliavin_times) {
    const double r = s / dt;
    const int js = static_cast<int>(std::lround(r));
    if (std::abs(r - js) > 1e-9 * std::max(1.0, r) || js < 0 || js >= steps) {
      throw Error(ErrorKind::InvalidGrid, "Malliavin time " + std::to_string(s) + " is not an interior grid time");
    }
    mall_step.push_back(js);
  }
  if (aux.variational) {
    require_same_manifold(aux.variational->manifold(), M, "variational direction");
    if (!aux.variational->has_intrinsic_derivative() && !aux.variational->measure_free()) {
      throw Error(ErrorKind::UnsupportedOrder, "variational direction must be evaluable");
    }
  }
  if (linear) {
    auto need = [](const InteractionField& f) {
      if (!f.has_intrinsic_derivative()) {
        throw Error(ErrorKind::UnsupportedOrder, "field '" + f.label() + "' has no closed-form intrinsic derivative");
      }
    };
    need(fields.drift);
    for (const auto& f : fields.diffusion) need(f);
  }
  const int var_cols = aux.variational ? 1 : 0;
  const int mall_off = var_cols;
  const int carrier_cols = var_cols + n * static_cast<int>(mall_step.size());
  const int jac_off = carrier_cols;
  const int tracked_cols = carrier_cols + (aux.jacobian ? N : 0);

  std::vector<Point> carriers(mu0.points().begin(), mu0.points().end());
  std::vector<Point> pts(tracked);
  const auto weights = mu0.weights();
  const std::size_t R = carriers.size();
  const std::size_t T = pts.size();

  std::vector<Dyn> Yc, Yt;
  if (linear) {
    Yc.assign(R, Dyn::Zero(N, carrier_cols));
    Yt.assign(T, Dyn::Zero(N, tracked_cols));
    if (aux.variational) {
      const BoundField psi = aux.variational->bind(mu0);
      for (std::size_t r = 0; r < R; ++r) Yc[r].col(0) = psi.value(carriers[r]);
    }
    if (aux.jacobian) {
      for (std::size_t j = 0; j < T; ++j) Yt[j].middleCols(jac_off, N) = M.tangent_projector(pts[j]);
    }
  }

  FlowSolution sol;
  auto snapshot = [&](int step) {
    if (!opt.snapshots) return;
    sol.times.push_back(step * dt);
    sol.steps.push_back(step);
    sol.measures.push_back(step == 0 ? mu0 : mu0.relocated(carriers));
    sol.tracked.push_back(pts);
    if (aux.jacobian) {
      std::vector<Mat> js(T);
      for (std::size_t j = 0; j < T; ++j) js[j] = Yt[j].middleCols(jac_off, N);
      sol.jacobian.push_back(std::move(js));
    }
    if (aux.variational) {
      std::vector<Vec> vs(T);
      for (std::size_t j = 0; j < T; ++j) vs[j] = Yt[j].col(0);
      sol.variational.push_back(std::move(vs));
    }
    for (std::size_t m = 0; m < mall_step.size(); ++m) {
      auto& mf = sol.malliavin[m];
      std::vector<Dyn> bc(R), bt(T);
      for (std::size_t r = 0; r < R; ++r) bc[r] = Yc[r].middleCols(mall_off + static_cast<int>(m) * n, n);
      for (std::size_t j = 0; j < T; ++j) bt[j] = Yt[j].middleCols(mall_off + static_cast<int>(m) * n, n);
      mf.carriers.push_back(std::move(bc));
      mf.tracked.push_back(std::move(bt));
    }
  };
  sol.malliavin.resize(mall_step.size());
  for (std::size_t m = 0; m < mall_step.size(); ++m) {
    sol.malliavin[m].s = aux.malliavin_times[m];
    sol.malliavin[m].step = mall_step[m];
  }
  snapshot(0);
  if (opt.record) {
    opt.record->clear();
    opt.record->push_back(carriers);
  }

  Stepper stepper(M, cfg, dt, n);
  std::vector<Point> next_c(R), next_t(T);
  std::vector<Trace> tc(linear ? R : 0), tt(linear ? T : 0);
  const std::size_t K = static_cast<std::size_t>(n) + 1;

  for (int step = 0; step < steps; ++step) {
    const std::span<const Point> support = opt.frozen ? (*opt.frozen)(step) : std::span<const Point>(carriers);
    const auto bound = bind_all(fields, support, weights);
    stepper.set_step(W, step);

    if (!linear) {
      for (std::size_t r = 0; r < R; ++r) {
        next_c[r] = stepper.advance(bound, carriers[r]);
        require_finite(next_c[r], step);
      }
      for (std::size_t j = 0; j < T; ++j) {
        next_t[j] = stepper.advance(bound, pts[j]);
        require_finite(next_t[j], step);
      }
    } else {
      for (std::size_t r = 0; r < R; ++r) stepper.traced(bound, carriers[r], tc[r]);
      for (std::size_t j = 0; j < T; ++j) stepper.traced(bound, pts[j], tt[j]);
      const auto c = stepper.coef();

      for (std::size_t m = 0; m < mall_step.size(); ++m) {
        if (mall_step[m] != step || aux.malliavin_init != MalliavinInit::FieldValue) continue;
        const int off = mall_off + static_cast<int>(m) * n;
        for (int i = 0; i < n; ++i) {
          for (std::size_t r = 0; r < R; ++r) Yc[r].col(off + i) = tc[r].ex[i + 1];
          for (std::size_t j = 0; j < T; ++j) Yt[j].col(off + i) = tt[j].ex[i + 1];
        }
      }

      // Mean-field summaries of the carriers' linear states, frozen for the step.
      std::vector<MeanFieldSummary> S(K);
      std::vector<bool> has_mf(K, false);
      if (carrier_cols > 0) {
        for (std::size_t k = 0; k < K; ++k) {
          if (bound[k].measure_free() || c[k] == 0.0) continue;
          S[k] = bound[k].summarize(Yc);
          has_mf[k] = true;
        }
      }
      auto G = [&](const Point& at, const std::vector<Mat>& J, const Dyn& Y) {
        Dyn g = Dyn::Zero(N, Y.cols());
        for (std::size_t k = 0; k < K; ++k) {
          if (c[k] == 0.0) continue;
          g.noalias() += c[k] * (J[k] * Y);
          if (has_mf[k]) g.leftCols(carrier_cols) += c[k] * bound[k].mean_field(at, S[k]);
        }
        return g;
      };
      auto update = [&](const Trace& t, Dyn& Y) {
        const Dyn g0 = G(t.x, t.jx, Y);
        const Dyn Ys = M.tangent_projector(t.x_star) * (Y + g0);
        const Dyn g1 = G(t.x_star, t.jxs, Ys);
        Y = M.tangent_projector(t.x_new) * (Y + 0.5 * (g0 + g1));
      };
      for (std::size_t r = 0; r < R; ++r) update(tc[r], Yc[r]);
      for (std::size_t j = 0; j < T; ++j) update(tt[j], Yt[j]);

      for (std::size_t m = 0; m < mall_step.size(); ++m) {
        if (mall_step[m] != step || aux.malliavin_init != MalliavinInit::StepDerivative) continue;
        const int off = mall_off + static_cast<int>(m) * n;
        auto inject = [&](const Trace& t, Dyn& Y) {
          const Mat P = M.tangent_projector(t.x_new);
          for (int i = 0; i < n; ++i) {
            Vec d = t.ex[i + 1] + t.exs[i + 1];
            for (std::size_t k = 0; k < K; ++k) {
              if (c[k] != 0.0) d += c[k] * (t.jxs[k] * t.ex[i + 1]);
            }
            Y.col(off + i) = 0.5 * (P * d);
          }
        };
        for (std::size_t r = 0; r < R; ++r) inject(tc[r], Yc[r]);
        for (std::size_t j = 0; j < T; ++j) inject(tt[j], Yt[j]);
      }

      for (std::size_t r = 0; r < R; ++r) {
        next_c[r] = tc[r].x_new;
        require_finite(next_c[r], step);
        if (!Yc[r].allFinite()) throw Error(ErrorKind::NonFinite, "linearized flow diverged");
      }
      for (std::size_t j = 0; j < T; ++j) {
        next_t[j] = tt[j].x_new;
        require_finite(next_t[j], step);
        if (!Yt[j].allFinite()) throw Error(ErrorKind::NonFinite, "linearized flow diverged");
      }
    }
    carriers.swap(next_c);
    pts.swap(next_t);
    if (opt.record) opt.record->push_back(carriers);
    if ((step + 1) % cfg.save_stride == 0 || step + 1 == steps) snapshot(step + 1);
  }
  return sol;
}

}  // namespace

FlowSolution solve_interacting_flow(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                    const NoisePath& noise, const std::vector<Point>& tracked,
                                    const SolverConfig& cfg, const AuxiliaryRequest& aux) {
  return run(mu0, fields, noise, tracked, cfg, aux, {});
}

std::vector<std::vector<Point>> solve_carrier_path(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                                   const NoisePath& noise, const SolverConfig& cfg) {
  std::vector<std::vector<Point>> path;
  RunOptions opt;
  opt.record = &path;
  opt.snapshots = false;
  run(mu0, fields, noise, {}, cfg, {}, opt);
  return path;
}

EmpiricalMeasure evolve_measure(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                const NoisePath& noise, const SolverConfig& cfg) {
  SolverConfig c = cfg;
  c.save_stride = std::max(1, noise.steps());
  return run(mu0, fields, noise, {}, c, {}, {}).final_measure();
}

std::vector<FlowSolution> picard_solve(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                       const NoisePath& noise, const std::vector<Point>& tracked,
                                       const SolverConfig& cfg, int iterations) {
  if (iterations < 1) throw Error(ErrorKind::InvalidArgument, "Picard needs at least one iteration");
  std::vector<FlowSolution> out;
  out.reserve(static_cast<std::size_t>(iterations));
  std::vector<std::vector<Point>> previous, current;
  const std::span<const Point> initial = mu0.points();
  MeasureAt constant = [&](int) { return initial; };
  MeasureAt from_previous = [&](int step) { return std::span<const Point>(previous[static_cast<std::size_t>(step)]); };
  for (int k = 0; k < iterations; ++k) {
    RunOptions opt;
    opt.frozen = k == 0 ? &constant : &from_previous;
    opt.record = &current;
    out.push_back(run(mu0, fields, noise, tracked, cfg, {}, opt));
    previous.swap(current);
  }
  return out;
}

double sup_w2_gap(const FlowSolution& a, const FlowSolution& b) {
  if (a.measures.size() != b.measures.size()) {
    throw Error(ErrorKind::InvalidArgument, "solutions have different snapshot grids");
  }
  double sup = 0.0;
  for (std::size_t i = 0; i < a.measures.size(); ++i) {
    sup = std::max(sup, wasserstein2(a.measures[i], b.measures[i]));
  }
  return sup;
}

MeanEstimate mean_and_stderr(const std::vector<double>& samples) {
  MeanEstimate e;
  e.count = samples.size();
  if (samples.empty()) return e;
  double s = 0.0;
  for (double v : samples) s += v;
  e.mean = s / static_cast<double>(samples.size());
  if (samples.size() > 1) {
    double q = 0.0;
    for (double v : samples) q += (v - e.mean) * (v - e.mean);
    e.stderr = std::sqrt(q / static_cast<double>(samples.size() - 1) / static_cast<double>(samples.size()));
  }
  return e;
}

StabilityReport estimate_stability(const EmpiricalMeasure& mu0, const EmpiricalMeasure& nu0,
                                   const FieldSet& fields, const SolverConfig& cfg,
                                   const StabilityOptions& options) {
  require_same_manifold(mu0.manifold(), nu0.manifold(), "stability measures");
  StabilityReport rep;
  rep.w2_initial = wasserstein2(mu0, nu0);
  const std::size_t R = options.replicas;
  std::vector<double> sup2(R, 0.0), sup_tr(R, 0.0);
  std::vector<char> ok(R, 0);
  const Manifold& M = mu0.manifold();
  parallel_for(R, [&](std::size_t r) {
    const NoisePath W = NoisePath::generate(fields.noise_dim(), options.horizon, cfg.dt, options.seed, r);
    try {
      std::vector<Point> tu, tv;
      if (options.tracked_pair) {
        tu = {options.tracked_pair->first};
        tv = {options.tracked_pair->second};
      }
      const auto a = solve_interacting_flow(mu0, fields, W, tu, cfg);
      const auto b = solve_interacting_flow(nu0, fields, W, tv, cfg);
      double s = 0.0, st = 0.0;
      for (std::size_t i = 0; i < a.measures.size(); ++i) {
        s = std::max(s, wasserstein2(a.measures[i], b.measures[i]));
        if (options.tracked_pair) st = std::max(st, M.geodesic_distance(a.tracked[i][0], b.tracked[i][0]));
      }
      sup2[r] = s;
      sup_tr[r] = st;
      ok[r] = 1;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFinite) throw;
    }
  });
  std::vector<double> n2, n4, r2, r4, tr;
  const double w0 = rep.w2_initial;
  double d0 = 0.0;
  if (options.tracked_pair) d0 = M.geodesic_distance(options.tracked_pair->first, options.tracked_pair->second);
  for (std::size_t r = 0; r < R; ++r) {
    if (!ok[r]) {
      ++rep.failed;
      continue;
    }
    const double s2 = sup2[r] * sup2[r];
    n2.push_back(s2);
    n4.push_back(s2 * s2);
    auto ratio = [](double num, double den) {
      if (num == 0.0) return 0.0;
      return den > 0 ? num / den : std::numeric_limits<double>::infinity();
    };
    r2.push_back(ratio(s2, w0 * w0));
    r4.push_back(ratio(s2 * s2, w0 * w0 * w0 * w0));
    if (options.tracked_pair) tr.push_back(ratio(sup_tr[r] * sup_tr[r], d0 * d0 + w0 * w0));
  }
  rep.numerator_p2 = mean_and_stderr(n2);
  rep.numerator_p4 = mean_and_stderr(n4);
  rep.ratio_p2 = mean_and_stderr(r2);
  rep.ratio_p4 = mean_and_stderr(r4);
  if (options.tracked_pair) rep.tracked_ratio_p2 = mean_and_stderr(tr);
  return rep;
}

double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = std::min(x.size(), y.size());
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) return std::numeric_limits<double>::quiet_NaN();
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double dn = static_cast<double>(n);
  return (dn * sxy - sx * sy) / (dn * sxx - sx * sx);
}

ConvergenceReport convergence_order(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                    const std::vector<Point>& tracked, double horizon,
                                    const std::vector<double>& dts, std::size_t replicas,
                                    std::uint64_t seed, SolverConfig base) {
  if (dts.size() < 2) throw Error(ErrorKind::InvalidGrid, "convergence ladder needs two time steps");
  for (std::size_t k = 1; k < dts.size(); ++k) {
    if (std::abs(dts[k] * 2 - dts[k - 1]) > 1e-12 * dts[k - 1]) {
      throw Error(ErrorKind::InvalidGrid, "convergence ladder must halve at every rung");
    }
  }
  const std::size_t L = dts.size();
  grid_steps(horizon, dts.front());
  const Manifold& M = mu0.manifold();
  std::vector<std::vector<double>> gaps(L - 1, std::vector<double>(replicas, 0.0));
  parallel_for(replicas, [&](std::size_t r) {
    const NoisePath fine = NoisePath::generate(fields.noise_dim(), horizon, dts.back(), seed, r);
    std::vector<FlowSolution> sols;
    for (std::size_t k = 0; k < L; ++k) {
      const int factor = 1 << static_cast<int>(L - 1 - k);
      SolverConfig cfg = base;
      cfg.dt = dts[k];
      cfg.save_stride = 1 << static_cast<int>(k);
      sols.push_back(solve_interacting_flow(mu0, fields, fine.coarsen(factor), tracked, cfg));
    }
    for (std::size_t k = 0; k + 1 < L; ++k) {
      double sup = 0.0;
      const auto& a = sols[k];
      const auto& b = sols[k + 1];
      for (std::size_t i = 0; i < a.measures.size(); ++i) {
        auto dist = [&](const Point& x, const Point& y) {
          return base.renormalize ? M.geodesic_distance(x, y) : (x - y).norm();
        };
        for (std::size_t p = 0; p < a.measures[i].size(); ++p) {
          sup = std::max(sup, dist(a.measures[i].point(p), b.measures[i].point(p)));
        }
        for (std::size_t j = 0; j < tracked.size(); ++j) sup = std::max(sup, dist(a.tracked[i][j], b.tracked[i][j]));
      }
      gaps[k][r] = sup;
    }
  });
  ConvergenceReport rep;
  rep.dts = dts;
  std::vector<double> means;
  for (std::size_t k = 0; k + 1 < L; ++k) {
    rep.gaps.push_back(mean_and_stderr(gaps[k]));
    means.push_back(rep.gaps.back().mean);
  }
  rep.order = log_log_slope(std::vector<double>(dts.begin(), dts.end() - 1), means);
  return rep;
}

}  // namespace mvflow
