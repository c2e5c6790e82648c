#pragma once

// Semigroup T_t f(mu) = E f(mu_t), the operators A_i = D_I along V_i(., mu),
// and three estimators of the first chaos kernel a_1^{t,i}(tau):
//   SemigroupFormula      T_tau A_i T_{t-tau} f(mu) by nested Monte Carlo
//   ProjectionRegression  E[f(mu_t) dB^i(bin)] / |bin|, smoothed across bins
//   ClarkOcone            E[D^i_s f(mu_t)] via Malliavin flows
// plus the order-2 kernel and a variance-budget diagnostic.
//
// Noise index i is 0-based into FieldSet::diffusion.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mvflow/calculus.hpp"
#include "mvflow/flow_solver.hpp"

namespace mvflow {

/// f, mu, the model and the horizon t shared by every estimator.
struct ChaosProblem {
  MeasureFunctional f;
  EmpiricalMeasure mu;
  FieldSet fields;
  SolverConfig cfg;
  double t = 0.0;
};

struct SemigroupEstimate {
  double value = 0.0;
  /// Standard deviation of the antithetic pair means over sqrt(pairs).
  double stderr = 0.0;
  std::size_t replicas = 0;
  std::size_t failed = 0;
  double t = 0.0;
  std::uint64_t seed = 0;
};

/// Paths come in antithetic pairs (W, -W); pair p uses NoisePath::generate(n,
/// t, dt, seed, p). `replicas` counts paths and is rounded up to even. With
/// antithetic = false every path is independent (stream p) and the stderr is
/// over single paths.
SemigroupEstimate estimate_semigroup(const ChaosProblem& problem, std::size_t replicas,
                                     std::uint64_t seed, bool antithetic = true);

struct ApplyAResult {
  double fd = 0.0;
  std::optional<double> analytic;
  double eps = 0.0;
};

/// Central difference of g along V_i frozen at mu, plus the analytic pairing.
ApplyAResult apply_A(const MeasureFunctional& g, const EmpiricalMeasure& mu, const FieldSet& fields, int i,
                     double eps);
/// Same for an estimator g; g must use common random numbers internally, so
/// that it is a deterministic function of its argument.
double apply_A(const std::function<double(const EmpiricalMeasure&)>& g, const EmpiricalMeasure& mu,
               const FieldSet& fields, int i, double eps);

enum class KernelMethod { SemigroupFormula, ProjectionRegression, ClarkOcone, Projection };
std::string to_string(KernelMethod m);

struct ChaosKernelEstimate {
  int order = 1;
  int i = 0;
  std::vector<double> taus;
  /// Bin (or bin pair, flattened) for projection estimates.
  std::vector<std::pair<double, double>> bins;
  KernelMethod method = KernelMethod::SemigroupFormula;
  double value = 0.0;
  double stderr = 0.0;
  std::size_t outer_n = 0;
  std::size_t inner_n = 0;
  double eps = 0.0;
  /// Richardson estimate of the finite-difference bias (0 when not requested).
  double bias = 0.0;
};

struct ChaosBudget {
  std::size_t outer = 200;
  /// Inner samples per outer state. One inner sample already gives an
  /// unbiased nested estimator; more only trade outer variance for cost.
  std::size_t inner = 4;
  double eps = 1e-2;
  /// Also evaluate at 2 eps and report (Y(2eps) - Y(eps)) / 3 as the bias.
  bool richardson = false;
  /// Cap on the number of simulated paths.
  std::size_t max_paths = 400'000'000;
  std::uint64_t seed = 0;
};

/// T_tau A_i T_{t-tau} f(mu). At tau = t the inner A_i f is analytic.
ChaosKernelEstimate kv_kernel_order1(const ChaosProblem& problem, double tau, int i, const ChaosBudget& budget);

/// T_tau1 A_i T_{tau2-tau1} A_i T_{t-tau2} f(mu) for tau1 < tau2 <= t, by a
/// common-random-number cross difference.
ChaosKernelEstimate kv_kernel_order2(const ChaosProblem& problem, double tau1, double tau2, int i,
                                     const ChaosBudget& budget);

/// Uniform partition of [0, t].
std::vector<std::pair<double, double>> uniform_bins(double t, int count);
/// Chebyshev-Lobatto nodes on [0, t]; count = 3 gives {0, t/2, t}.
std::vector<double> kernel_nodes(double t, int count);

/// Per-bin E[f(mu_t) dB^i(b)] / |b| (method Projection).
std::vector<ChaosKernelEstimate> projection_kernel_order1(const ChaosProblem& problem,
                                                          const std::vector<std::pair<double, double>>& bins,
                                                          int i, std::size_t replicas, std::uint64_t seed);

/// Least-squares polynomial (degree <= 2, fitted to bin averages) through the
/// bin projections, evaluated at the nodes. The estimate at each node is a
/// fixed linear combination of per-replica projections, so its stderr is exact.
std::vector<ChaosKernelEstimate> projection_regression(const ChaosProblem& problem, const std::vector<double>& nodes,
                                                       int bin_count, int i, std::size_t replicas,
                                                       std::uint64_t seed, int degree = 2);

/// E[D^i_s f(mu_t)] for each s (analytic A_i f(mu_t) at s = t; zero for s > t).
std::vector<ChaosKernelEstimate> clark_ocone_kernel(const ChaosProblem& problem, const std::vector<double>& s,
                                                    int i, std::size_t replicas, std::uint64_t seed,
                                                    MalliavinInit init = MalliavinInit::FieldValue);

/// E[f(mu_t) dB^i(b1) dB^j(b2)] / (|b1| |b2|) for disjoint bins (or i != j).
ChaosKernelEstimate projection_kernel_order2(const ChaosProblem& problem, std::pair<double, double> b1,
                                             std::pair<double, double> b2, int i, int j, std::size_t replicas,
                                             std::uint64_t seed);

struct TruncationReport {
  double t = 0.0;
  std::size_t replicas = 0;
  std::size_t failed = 0;
  double mean = 0.0;
  double variance = 0.0;
  /// sum_i sum_b |b| p_{i,b}^2 with the noise bias removed.
  double first_order_budget = 0.0;
  /// Adjusted R^2 of f(mu_t) regressed on every bin increment.
  double first_order_share = 0.0;
  double residual_share = 0.0;
  /// Same-index order-2 budget sum_{b1<b2} |b1||b2| q^2 (bias removed).
  double second_order_budget = 0.0;
  /// Mixed-index projections E[f dB^i(b1) dB^j(b2)] / (|b1||b2|), i < j.
  double mixed_max_abs = 0.0;
  double mixed_budget = 0.0;
  /// Projections p[i][b] with stderr.
  std::vector<std::vector<MeanEstimate>> projections;
};

/// Uses the same paths as estimate_semigroup(problem, replicas, seed), so
/// `mean` equals that estimate's value exactly.
TruncationReport truncation_diagnostics(const ChaosProblem& problem, std::size_t replicas, int bin_count,
                                        std::uint64_t seed);

/// |a - b| <= 3 sqrt(sa^2 + sb^2) plus a roundoff allowance.
bool agree_within_3_sigma(double a, double sa, double b, double sb);

}  // namespace mvflow
