#include "mvflow/chaos_expansion.hpp"

#include <cmath>
#include <limits>

#include "mvflow/error.hpp"
#include "mvflow/parallel.hpp"
#include "mvflow/random.hpp"

namespace mvflow {

namespace {

// Stream labels for the nested estimators; plain path pairs use
// NoisePath::generate(seed, p) directly.
constexpr std::uint64_t kOrder1Outer = 0x6b760101;
constexpr std::uint64_t kOrder1Inner = 0x6b760102;
constexpr std::uint64_t kOrder2Outer = 0x6b760201;
constexpr std::uint64_t kOrder2Middle = 0x6b760202;
constexpr std::uint64_t kOrder2Inner = 0x6b760203;

int steps_for(double duration, double dt) {
  if (duration <= 1e-12 * dt) return 0;
  return grid_steps(duration, dt);
}

void require_index(const FieldSet& fields, int i) {
  if (i < 0 || i >= fields.noise_dim()) {
    throw Error(ErrorKind::InvalidArgument, "noise index " + std::to_string(i) + " out of range");
  }
}

EmpiricalMeasure evolve(const ChaosProblem& p, const EmpiricalMeasure& mu, const NoisePath& w) {
  if (w.steps() == 0) return mu;
  return evolve_measure(mu, p.fields, w, p.cfg);
}

NoisePath pair_path(const ChaosProblem& p, int steps, std::uint64_t seed, std::size_t pair) {
  return NoisePath::from_stream(p.fields.noise_dim(), steps, p.cfg.dt, derive_stream(seed, {pair}));
}

struct PairValue {
  double plus = 0.0;
  double minus = 0.0;
  bool ok = false;
};

// f(mu_t) under W_p and -W_p for every pair.
std::vector<PairValue> sample_pairs(const ChaosProblem& p, std::size_t pairs, std::uint64_t seed) {
  const int steps = steps_for(p.t, p.cfg.dt);
  std::vector<PairValue> out(pairs);
  parallel_for(pairs, [&](std::size_t k) {
    const NoisePath w = pair_path(p, steps, seed, k);
    try {
      out[k].plus = p.f(evolve(p, p.mu, w));
      out[k].minus = p.f(evolve(p, p.mu, w.negated()));
      out[k].ok = std::isfinite(out[k].plus) && std::isfinite(out[k].minus);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFinite) throw;
    }
  });
  return out;
}

std::size_t pair_count(std::size_t replicas) { return (replicas + 1) / 2; }

// Sum of increments of Brownian motion i over the grid steps [a, b).
double window(const NoisePath& w, int a, int b, int i) {
  double s = 0.0;
  for (int j = a; j < b; ++j) s += w.increment(j, i);
  return s;
}

struct StepBin {
  int a = 0;
  int b = 0;
  double width = 0.0;
};

std::vector<StepBin> to_steps(const std::vector<std::pair<double, double>>& bins, double dt, double t) {
  std::vector<StepBin> out;
  for (const auto& [lo, hi] : bins) {
    if (!(lo >= -1e-12) || !(hi > lo) || hi > t * (1 + 1e-12) + 1e-15) {
      throw Error(ErrorKind::InvalidGrid, "bin outside [0, t] or empty");
    }
    StepBin s{steps_for(lo, dt), steps_for(hi, dt), 0.0};
    s.width = (s.b - s.a) * dt;
    out.push_back(s);
  }
  return out;
}

ChaosKernelEstimate finish(ChaosKernelEstimate e, const std::vector<double>& samples) {
  const auto m = mean_and_stderr(samples);
  e.value = m.mean;
  e.stderr = m.stderr;
  return e;
}

void check_budget(std::size_t outer, std::size_t per_outer, std::size_t cap) {
  const long double total = static_cast<long double>(outer) * static_cast<long double>(per_outer);
  if (total > static_cast<long double>(cap)) {
    throw Error(ErrorKind::BudgetExhausted, "estimator needs " + std::to_string(static_cast<double>(total)) +
                                                " paths, cap is " + std::to_string(cap));
  }
}

}  // namespace

std::string to_string(KernelMethod m) {
  switch (m) {
    case KernelMethod::SemigroupFormula: return "SemigroupFormula";
    case KernelMethod::ProjectionRegression: return "ProjectionRegression";
    case KernelMethod::ClarkOcone: return "ClarkOcone";
    case KernelMethod::Projection: return "Projection";
  }
  return "unknown";
}

bool agree_within_3_sigma(double a, double sa, double b, double sb) {
  return std::abs(a - b) <= 3.0 * std::hypot(sa, sb) + 1e-9 * (1.0 + std::abs(a) + std::abs(b));
}

SemigroupEstimate estimate_semigroup(const ChaosProblem& problem, std::size_t replicas, std::uint64_t seed,
                                     bool antithetic) {
  if (replicas < 2) throw Error(ErrorKind::InvalidArgument, "semigroup estimate needs at least 2 replicas");
  problem.fields.require_manifold(problem.mu.manifold());
  SemigroupEstimate est;
  est.t = problem.t;
  est.seed = seed;
  std::vector<double> samples;
  if (antithetic) {
    const auto pairs = sample_pairs(problem, pair_count(replicas), seed);
    est.replicas = 2 * pairs.size();
    for (const auto& v : pairs) {
      if (v.ok) {
        samples.push_back(0.5 * (v.plus + v.minus));
      } else {
        est.failed += 2;
      }
    }
  } else {
    const int steps = steps_for(problem.t, problem.cfg.dt);
    std::vector<double> vals(replicas, 0.0);
    std::vector<char> ok(replicas, 0);
    parallel_for(replicas, [&](std::size_t k) {
      try {
        vals[k] = problem.f(evolve(problem, problem.mu, pair_path(problem, steps, seed, k)));
        ok[k] = std::isfinite(vals[k]);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::NonFinite) throw;
      }
    });
    est.replicas = replicas;
    for (std::size_t k = 0; k < replicas; ++k) {
      if (ok[k]) {
        samples.push_back(vals[k]);
      } else {
        ++est.failed;
      }
    }
  }
  const auto m = mean_and_stderr(samples);
  est.value = m.mean;
  est.stderr = m.stderr;
  return est;
}

ApplyAResult apply_A(const MeasureFunctional& g, const EmpiricalMeasure& mu, const FieldSet& fields, int i,
                     double eps) {
  require_index(fields, i);
  const auto& V = fields.diffusion[static_cast<std::size_t>(i)];
  ApplyAResult r;
  r.eps = eps;
  r.fd = fd_intrinsic_directional(g, mu, V, eps);
  r.analytic = g.directional(mu, V);
  return r;
}

double apply_A(const std::function<double(const EmpiricalMeasure&)>& g, const EmpiricalMeasure& mu,
               const FieldSet& fields, int i, double eps) {
  require_index(fields, i);
  const BoundField V = fields.diffusion[static_cast<std::size_t>(i)].bind(mu);
  return (g(perturb_measure(mu, V, eps)) - g(perturb_measure(mu, V, -eps))) / (2 * eps);
}

ChaosKernelEstimate kv_kernel_order1(const ChaosProblem& problem, double tau, int i, const ChaosBudget& budget) {
  require_index(problem.fields, i);
  if (!(tau >= 0.0) || tau > problem.t * (1 + 1e-12)) throw Error(ErrorKind::InvalidGrid, "tau outside [0, t]");
  if (budget.outer == 0 || budget.inner == 0) throw Error(ErrorKind::InvalidArgument, "empty budget");
  const double dt = problem.cfg.dt;
  const int s1 = steps_for(tau, dt);
  const int s2 = steps_for(problem.t - tau, dt);
  const int n = problem.fields.noise_dim();
  const bool analytic = s2 == 0;
  const std::size_t per_outer = 1 + (analytic ? 0 : budget.inner * 4 * (budget.richardson ? 2 : 1));
  check_budget(budget.outer, per_outer, budget.max_paths);

  const auto& Vi = problem.fields.diffusion[static_cast<std::size_t>(i)];
  std::vector<double> Y(budget.outer, 0.0), B(budget.outer, 0.0);
  std::vector<char> ok(budget.outer, 0);
  parallel_for(budget.outer, [&](std::size_t o) {
    try {
      const NoisePath wo = NoisePath::from_stream(n, s1, dt, derive_stream(budget.seed, {kOrder1Outer, o}));
      const EmpiricalMeasure mt = evolve(problem, problem.mu, wo);
      if (analytic) {
        Y[o] = problem.f.directional(mt, Vi);
      } else {
        const BoundField V = Vi.bind(mt);
        auto diff = [&](double eps) {
          const EmpiricalMeasure plus = perturb_measure(mt, V, eps);
          const EmpiricalMeasure minus = perturb_measure(mt, V, -eps);
          double acc = 0.0;
          for (std::size_t k = 0; k < budget.inner; ++k) {
            const NoisePath w = NoisePath::from_stream(n, s2, dt, derive_stream(budget.seed, {kOrder1Inner, o, k}));
            const NoisePath wn = w.negated();
            acc += problem.f(evolve(problem, plus, w)) - problem.f(evolve(problem, minus, w));
            acc += problem.f(evolve(problem, plus, wn)) - problem.f(evolve(problem, minus, wn));
          }
          return acc / (2.0 * static_cast<double>(budget.inner) * 2.0 * eps);
        };
        Y[o] = diff(budget.eps);
        if (budget.richardson) B[o] = (diff(2 * budget.eps) - Y[o]) / 3.0;
      }
      ok[o] = std::isfinite(Y[o]);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFinite) throw;
    }
  });
  std::vector<double> ys, bs;
  ChaosKernelEstimate est;
  for (std::size_t o = 0; o < budget.outer; ++o) {
    if (!ok[o]) continue;
    ys.push_back(Y[o]);
    bs.push_back(B[o]);
  }
  est.order = 1;
  est.i = i;
  est.taus = {tau};
  est.method = KernelMethod::SemigroupFormula;
  est.outer_n = ys.size();
  est.inner_n = analytic ? 0 : budget.inner;
  est.eps = analytic ? 0.0 : budget.eps;
  est.bias = mean_and_stderr(bs).mean;
  return finish(est, ys);
}

ChaosKernelEstimate kv_kernel_order2(const ChaosProblem& problem, double tau1, double tau2, int i,
                                     const ChaosBudget& budget) {
  require_index(problem.fields, i);
  if (!(tau1 >= 0.0) || !(tau2 > tau1) || tau2 > problem.t * (1 + 1e-12)) {
    throw Error(ErrorKind::InvalidGrid, "need 0 <= tau1 < tau2 <= t");
  }
  if (budget.outer == 0 || budget.inner == 0) throw Error(ErrorKind::InvalidArgument, "empty budget");
  const double dt = problem.cfg.dt;
  const int s1 = steps_for(tau1, dt);
  const int s2 = steps_for(tau2 - tau1, dt);
  const int s3 = steps_for(problem.t - tau2, dt);
  const int n = problem.fields.noise_dim();
  const bool analytic = s3 == 0;
  check_budget(budget.outer, 1 + budget.inner * (analytic ? 4 : 16), budget.max_paths);

  const auto& Vi = problem.fields.diffusion[static_cast<std::size_t>(i)];
  const double e = budget.eps;
  std::vector<double> Y(budget.outer, 0.0);
  std::vector<char> ok(budget.outer, 0);
  parallel_for(budget.outer, [&](std::size_t o) {
    try {
      const NoisePath wo = NoisePath::from_stream(n, s1, dt, derive_stream(budget.seed, {kOrder2Outer, o}));
      const EmpiricalMeasure m1 = evolve(problem, problem.mu, wo);
      const BoundField V1 = Vi.bind(m1);
      const EmpiricalMeasure m1p = perturb_measure(m1, V1, e);
      const EmpiricalMeasure m1m = perturb_measure(m1, V1, -e);
      double acc = 0.0;
      for (std::size_t k = 0; k < budget.inner; ++k) {
        const NoisePath wm = NoisePath::from_stream(n, s2, dt, derive_stream(budget.seed, {kOrder2Middle, o, k}));
        const NoisePath wi = NoisePath::from_stream(n, s3, dt, derive_stream(budget.seed, {kOrder2Inner, o, k}));
        for (double sign : {1.0, -1.0}) {
          const NoisePath a = sign > 0 ? wm : wm.negated();
          const NoisePath b = sign > 0 ? wi : wi.negated();
          for (double s_1 : {1.0, -1.0}) {
            const EmpiricalMeasure m2 = evolve(problem, s_1 > 0 ? m1p : m1m, a);
            if (analytic) {
              acc += s_1 * problem.f.directional(m2, Vi) * (2 * e);
              continue;
            }
            const BoundField V2 = Vi.bind(m2);
            for (double s_2 : {1.0, -1.0}) {
              acc += s_1 * s_2 * problem.f(evolve(problem, perturb_measure(m2, V2, s_2 * e), b));
            }
          }
        }
      }
      Y[o] = acc / (4.0 * e * e * 2.0 * static_cast<double>(budget.inner));
      ok[o] = std::isfinite(Y[o]);
    } catch (const Error& err) {
      if (err.kind() != ErrorKind::NonFinite) throw;
    }
  });
  std::vector<double> ys;
  for (std::size_t o = 0; o < budget.outer; ++o) {
    if (ok[o]) ys.push_back(Y[o]);
  }
  ChaosKernelEstimate est;
  est.order = 2;
  est.i = i;
  est.taus = {tau1, tau2};
  est.method = KernelMethod::SemigroupFormula;
  est.outer_n = ys.size();
  est.inner_n = budget.inner;
  est.eps = e;
  return finish(est, ys);
}

std::vector<std::pair<double, double>> uniform_bins(double t, int count) {
  if (count < 1 || !(t > 0)) throw Error(ErrorKind::InvalidArgument, "bins need t > 0 and count >= 1");
  std::vector<std::pair<double, double>> out;
  for (int b = 0; b < count; ++b) out.emplace_back(t * b / count, t * (b + 1) / count);
  out.back().second = t;
  return out;
}

std::vector<double> kernel_nodes(double t, int count) {
  if (count < 2) throw Error(ErrorKind::InvalidArgument, "need at least two kernel nodes");
  std::vector<double> out;
  for (int k = 0; k < count; ++k) {
    out.push_back(0.5 * t * (1.0 - std::cos(std::acos(-1.0) * k / (count - 1))));
  }
  out.front() = 0.0;
  out.back() = t;
  if (count % 2 == 1) out[static_cast<std::size_t>(count / 2)] = 0.5 * t;
  return out;
}

std::vector<ChaosKernelEstimate> projection_kernel_order1(const ChaosProblem& problem,
                                                          const std::vector<std::pair<double, double>>& bins,
                                                          int i, std::size_t replicas, std::uint64_t seed) {
  require_index(problem.fields, i);
  const auto sb = to_steps(bins, problem.cfg.dt, problem.t);
  const int steps = steps_for(problem.t, problem.cfg.dt);
  const auto pairs = sample_pairs(problem, pair_count(replicas), seed);
  std::vector<std::vector<double>> samples(bins.size());
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (!pairs[k].ok) continue;
    const NoisePath w = pair_path(problem, steps, seed, k);
    const double half = 0.5 * (pairs[k].plus - pairs[k].minus);
    for (std::size_t b = 0; b < sb.size(); ++b) {
      samples[b].push_back(half * window(w, sb[b].a, sb[b].b, i) / sb[b].width);
    }
  }
  std::vector<ChaosKernelEstimate> out;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    ChaosKernelEstimate e;
    e.order = 1;
    e.i = i;
    e.taus = {0.5 * (bins[b].first + bins[b].second)};
    e.bins = {bins[b]};
    e.method = KernelMethod::Projection;
    e.outer_n = samples[b].size() * 2;
    out.push_back(finish(e, samples[b]));
  }
  return out;
}

std::vector<ChaosKernelEstimate> projection_regression(const ChaosProblem& problem, const std::vector<double>& nodes,
                                                       int bin_count, int i, std::size_t replicas,
                                                       std::uint64_t seed, int degree) {
  require_index(problem.fields, i);
  const auto bins = uniform_bins(problem.t, bin_count);
  const auto sb = to_steps(bins, problem.cfg.dt, problem.t);
  const int d = std::max(0, std::min(degree, bin_count - 1));
  const double t = problem.t;
  // Bin averages of the monomials (tau / t)^m.
  Eigen::MatrixXd D(bin_count, d + 1);
  for (int b = 0; b < bin_count; ++b) {
    const double lo = bins[static_cast<std::size_t>(b)].first / t, hi = bins[static_cast<std::size_t>(b)].second / t;
    for (int m = 0; m <= d; ++m) D(b, m) = (std::pow(hi, m + 1) - std::pow(lo, m + 1)) / ((m + 1) * (hi - lo));
  }
  const Eigen::MatrixXd H = (D.transpose() * D).ldlt().solve(D.transpose());
  Eigen::MatrixXd L(static_cast<Eigen::Index>(nodes.size()), bin_count);
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    Eigen::RowVectorXd v(d + 1);
    for (int m = 0; m <= d; ++m) v[m] = std::pow(nodes[q] / t, m);
    L.row(static_cast<Eigen::Index>(q)) = v * H;
  }

  const int steps = steps_for(t, problem.cfg.dt);
  const auto pairs = sample_pairs(problem, pair_count(replicas), seed);
  std::vector<std::vector<double>> samples(nodes.size());
  Eigen::VectorXd proj(bin_count);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (!pairs[k].ok) continue;
    const NoisePath w = pair_path(problem, steps, seed, k);
    const double half = 0.5 * (pairs[k].plus - pairs[k].minus);
    for (int b = 0; b < bin_count; ++b) {
      const auto& s = sb[static_cast<std::size_t>(b)];
      proj[b] = half * window(w, s.a, s.b, i) / s.width;
    }
    const Eigen::VectorXd at = L * proj;
    for (std::size_t q = 0; q < nodes.size(); ++q) samples[q].push_back(at[static_cast<Eigen::Index>(q)]);
  }
  std::vector<ChaosKernelEstimate> out;
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    ChaosKernelEstimate e;
    e.order = 1;
    e.i = i;
    e.taus = {nodes[q]};
    e.method = KernelMethod::ProjectionRegression;
    e.outer_n = samples[q].size() * 2;
    e.bins = bins;
    out.push_back(finish(e, samples[q]));
  }
  return out;
}

std::vector<ChaosKernelEstimate> clark_ocone_kernel(const ChaosProblem& problem, const std::vector<double>& s,
                                                    int i, std::size_t replicas, std::uint64_t seed,
                                                    MalliavinInit init) {
  require_index(problem.fields, i);
  const double t = problem.t, dt = problem.cfg.dt;
  const int steps = steps_for(t, dt);
  // Interior times go to the Malliavin solver; s = t is analytic, s > t is 0.
  AuxiliaryRequest aux;
  aux.malliavin_init = init;
  std::vector<int> kind(s.size(), 0);  // 0 interior, 1 terminal, 2 after t
  for (std::size_t q = 0; q < s.size(); ++q) {
    if (s[q] > t * (1 + 1e-12) + 1e-15) {
      kind[q] = 2;
    } else if (std::abs(s[q] - t) <= 1e-12 * std::max(1.0, t)) {
      kind[q] = 1;
    } else {
      aux.malliavin_times.push_back(s[q]);
    }
  }
  SolverConfig cfg = problem.cfg;
  cfg.save_stride = std::max(1, steps);
  const auto& Vi = problem.fields.diffusion[static_cast<std::size_t>(i)];
  const std::size_t P = pair_count(replicas);
  std::vector<std::vector<double>> vals(P, std::vector<double>(s.size(), 0.0));
  std::vector<char> ok(P, 0);
  parallel_for(P, [&](std::size_t k) {
    const NoisePath w = pair_path(problem, steps, seed, k);
    try {
      for (const NoisePath& path : {w, w.negated()}) {
        FlowSolution sol;
        if (aux.any() && steps > 0) {
          sol = solve_interacting_flow(problem.mu, problem.fields, path, {}, cfg, aux);
        } else {
          sol.measures = {steps > 0 ? evolve(problem, problem.mu, path) : problem.mu};
          sol.times = {t};
        }
        for (std::size_t q = 0; q < s.size(); ++q) {
          double v = 0.0;
          if (kind[q] == 0) {
            v = malliavin_functional(problem.f, sol, s[q])[i];
          } else if (kind[q] == 1) {
            v = problem.f.directional(sol.final_measure(), Vi);
          }
          vals[k][q] += 0.5 * v;
        }
      }
      ok[k] = 1;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFinite) throw;
    }
  });
  std::vector<ChaosKernelEstimate> out;
  for (std::size_t q = 0; q < s.size(); ++q) {
    std::vector<double> samples;
    for (std::size_t k = 0; k < P; ++k) {
      if (ok[k]) samples.push_back(vals[k][q]);
    }
    ChaosKernelEstimate e;
    e.order = 1;
    e.i = i;
    e.taus = {s[q]};
    e.method = KernelMethod::ClarkOcone;
    e.outer_n = samples.size() * 2;
    out.push_back(finish(e, samples));
  }
  return out;
}

ChaosKernelEstimate projection_kernel_order2(const ChaosProblem& problem, std::pair<double, double> b1,
                                             std::pair<double, double> b2, int i, int j, std::size_t replicas,
                                             std::uint64_t seed) {
  require_index(problem.fields, i);
  require_index(problem.fields, j);
  if (i == j && b1.second > b2.first + 1e-15 && b2.second > b1.first + 1e-15) {
    throw Error(ErrorKind::InvalidArgument, "same-index order-2 projection needs disjoint bins");
  }
  const auto sb = to_steps({b1, b2}, problem.cfg.dt, problem.t);
  const int steps = steps_for(problem.t, problem.cfg.dt);
  const auto pairs = sample_pairs(problem, pair_count(replicas), seed);
  std::vector<double> samples;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (!pairs[k].ok) continue;
    const NoisePath w = pair_path(problem, steps, seed, k);
    const double x = window(w, sb[0].a, sb[0].b, i) * window(w, sb[1].a, sb[1].b, j);
    samples.push_back(0.5 * (pairs[k].plus + pairs[k].minus) * x / (sb[0].width * sb[1].width));
  }
  ChaosKernelEstimate e;
  e.order = 2;
  e.i = i;
  e.taus = {0.5 * (b1.first + b1.second), 0.5 * (b2.first + b2.second)};
  e.bins = {b1, b2};
  e.method = KernelMethod::Projection;
  e.outer_n = samples.size() * 2;
  return finish(e, samples);
}

TruncationReport truncation_diagnostics(const ChaosProblem& problem, std::size_t replicas, int bin_count,
                                        std::uint64_t seed) {
  problem.fields.require_manifold(problem.mu.manifold());
  TruncationReport rep;
  rep.t = problem.t;
  const std::size_t P = pair_count(replicas);
  rep.replicas = 2 * P;
  const int n = problem.fields.noise_dim();
  const auto pairs = sample_pairs(problem, P, seed);
  std::vector<double> means, squares;
  for (const auto& v : pairs) {
    if (!v.ok) {
      rep.failed += 2;
      continue;
    }
    means.push_back(0.5 * (v.plus + v.minus));
    squares.push_back(0.5 * (v.plus * v.plus + v.minus * v.minus));
  }
  rep.mean = mean_and_stderr(means).mean;
  rep.variance = std::max(0.0, mean_and_stderr(squares).mean - rep.mean * rep.mean);
  if (means.empty() || n == 0 || problem.t <= 0.0) {
    rep.residual_share = rep.variance > 0 ? 1.0 : 0.0;
    return rep;
  }

  const auto bins = uniform_bins(problem.t, bin_count);
  const auto sb = to_steps(bins, problem.cfg.dt, problem.t);
  const int steps = steps_for(problem.t, problem.cfg.dt);
  const std::size_t B = sb.size();
  const std::size_t R = static_cast<std::size_t>(n) * B;  // regressors
  std::vector<std::vector<double>> p1(R);
  // Same-index disjoint pairs b1 < b2, then mixed-index pairs i < j over all bins.
  struct Pair2 {
    std::size_t a, b;  // regressor indices
    double w;
    bool mixed;
  };
  std::vector<Pair2> p2;
  for (int i = 0; i < n; ++i) {
    for (std::size_t b1 = 0; b1 < B; ++b1) {
      for (std::size_t b2 = b1 + 1; b2 < B; ++b2) {
        p2.push_back({i * B + b1, i * B + b2, sb[b1].width * sb[b2].width, false});
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      for (std::size_t b1 = 0; b1 < B; ++b1) {
        for (std::size_t b2 = 0; b2 < B; ++b2) {
          p2.push_back({i * B + b1, j * B + b2, sb[b1].width * sb[b2].width, true});
        }
      }
    }
  }
  std::vector<std::vector<double>> q2(p2.size());
  Eigen::MatrixXd XtX = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(R + 1), static_cast<Eigen::Index>(R + 1));
  Eigen::VectorXd Xty = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(R + 1));
  double yy = 0.0, ysum = 0.0;
  std::size_t N = 0;
  Eigen::VectorXd x(static_cast<Eigen::Index>(R + 1));
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (!pairs[k].ok) continue;
    const NoisePath w = pair_path(problem, steps, seed, k);
    x[0] = 1.0;
    for (int i = 0; i < n; ++i) {
      for (std::size_t b = 0; b < B; ++b) x[static_cast<Eigen::Index>(1 + i * B + b)] = window(w, sb[b].a, sb[b].b, i);
    }
    const double half_odd = 0.5 * (pairs[k].plus - pairs[k].minus);
    // Centering leaves the disjoint-bin projections unchanged and removes the
    // variance contributed by the mean.
    const double half_even = 0.5 * (pairs[k].plus + pairs[k].minus) - rep.mean;
    for (std::size_t r = 0; r < R; ++r) {
      p1[r].push_back(half_odd * x[static_cast<Eigen::Index>(r + 1)] / sb[r % B].width);
    }
    for (std::size_t q = 0; q < p2.size(); ++q) {
      q2[q].push_back(half_even * x[static_cast<Eigen::Index>(p2[q].a + 1)] * x[static_cast<Eigen::Index>(p2[q].b + 1)] /
                      p2[q].w);
    }
    for (double sign : {1.0, -1.0}) {
      const double y = sign > 0 ? pairs[k].plus : pairs[k].minus;
      Eigen::VectorXd xs = sign * x;
      xs[0] = 1.0;
      XtX.selfadjointView<Eigen::Lower>().rankUpdate(xs);
      Xty += y * xs;
      yy += y * y;
      ysum += y;
      ++N;
    }
  }
  XtX.triangularView<Eigen::StrictlyUpper>() = XtX.transpose();

  rep.projections.assign(static_cast<std::size_t>(n), {});
  for (int i = 0; i < n; ++i) {
    for (std::size_t b = 0; b < B; ++b) {
      const auto m = mean_and_stderr(p1[i * B + b]);
      rep.projections[static_cast<std::size_t>(i)].push_back(m);
      rep.first_order_budget += sb[b].width * (m.mean * m.mean - m.stderr * m.stderr);
    }
  }
  for (std::size_t q = 0; q < p2.size(); ++q) {
    const auto m = mean_and_stderr(q2[q]);
    const double contrib = p2[q].w * (m.mean * m.mean - m.stderr * m.stderr);
    if (p2[q].mixed) {
      rep.mixed_budget += contrib;
      rep.mixed_max_abs = std::max(rep.mixed_max_abs, std::abs(m.mean));
    } else {
      rep.second_order_budget += contrib;
    }
  }

  const double dn = static_cast<double>(N);
  const double sst = yy - ysum * ysum / dn;
  if (sst > 0.0 && dn > static_cast<double>(R) + 1.0) {
    const Eigen::VectorXd beta = XtX.ldlt().solve(Xty);
    const double ssr = std::max(0.0, yy - beta.dot(Xty));
    const double r2 = 1.0 - ssr / sst;
    rep.first_order_share = 1.0 - (1.0 - r2) * (dn - 1.0) / (dn - static_cast<double>(R) - 1.0);
  }
  rep.residual_share = 1.0 - rep.first_order_share;
  return rep;
}

}  // namespace mvflow
