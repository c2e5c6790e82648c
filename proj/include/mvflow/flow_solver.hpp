#pragma once

// Integration of the interacting system
//   dx(u,t) = V_0(x, mu_t) dt + sum_i V_i(x, mu_t) o dB^i_t,   mu_t = mu o x(., t)^{-1}
// for carrier particles (the support of mu) and tracked initial points, with
// optional linearized flows solved on the same grid and noise.

#include <cstdint>
#include <optional>
#include <vector>

#include "mvflow/empirical_measure.hpp"
#include "mvflow/interaction_fields.hpp"
#include "mvflow/noise.hpp"

namespace mvflow {

enum class Scheme { StratonovichHeun, ItoEulerCorrected };

struct SolverConfig {
  Scheme scheme = Scheme::StratonovichHeun;
  double dt = 1e-3;
  /// Snapshot every save_stride steps; the final time is always saved.
  int save_stride = 1;
  /// Project onto the manifold after every step. When off, the Heun step is
  /// taken in ambient coordinates without retraction so that the drift away
  /// from the manifold can be measured.
  bool renormalize = true;
};

struct FieldSet {
  InteractionField drift;
  std::vector<InteractionField> diffusion;

  const Manifold& manifold() const { return drift.manifold(); }
  int noise_dim() const { return static_cast<int>(diffusion.size()); }
  bool measure_free() const;
  /// Copy with diffusion field i replaced by the zero field.
  FieldSet without_diffusion(int i) const;
  /// Throws ManifoldMismatch unless every field lives on `m`.
  void require_manifold(const Manifold& m) const;
};

/// Initial value of a Malliavin block.
enum class MalliavinInit {
  /// V_i(x(u,s), mu_s), the continuous-time initial condition.
  FieldValue,
  /// Derivative of the one-step map with respect to the increment starting
  /// at s; makes the discrete integration-by-parts identity exact.
  StepDerivative,
};

struct AuxiliaryRequest {
  /// Jacobian flow of the tracked points, started at the tangent projector.
  bool jacobian = false;
  /// Direction psi for the variational flow D_I^psi x (bound to mu_0).
  std::optional<InteractionField> variational;
  /// Times s (grid points) of the Malliavin derivatives D_s x.
  std::vector<double> malliavin_times;
  MalliavinInit malliavin_init = MalliavinInit::FieldValue;

  bool any() const { return jacobian || variational.has_value() || !malliavin_times.empty(); }
};

/// D_s x for one s: per snapshot, N x n blocks for carriers and tracked points.
struct MalliavinFlow {
  double s = 0.0;
  int step = 0;
  std::vector<std::vector<Eigen::MatrixXd>> carriers;
  std::vector<std::vector<Eigen::MatrixXd>> tracked;
};

struct FlowSolution {
  std::vector<double> times;
  std::vector<int> steps;
  std::vector<EmpiricalMeasure> measures;
  /// tracked[snapshot][j].
  std::vector<std::vector<Point>> tracked;

  /// jacobian[snapshot][j], N x N acting on T_uM.
  std::vector<std::vector<Mat>> jacobian;
  /// variational[snapshot][j] = D_I^psi x(u_j, t).
  std::vector<std::vector<Vec>> variational;
  std::vector<MalliavinFlow> malliavin;

  const EmpiricalMeasure& final_measure() const { return measures.back(); }
  std::size_t snapshot_count() const { return times.size(); }
  /// Index of the Malliavin flow for time s; throws MissingAuxiliary.
  const MalliavinFlow& malliavin_at(double s) const;
};

FlowSolution solve_interacting_flow(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                    const NoisePath& noise, const std::vector<Point>& tracked,
                                    const SolverConfig& cfg, const AuxiliaryRequest& aux = {});

/// Carrier positions at every step of the direct solver (for Picard and
/// convergence studies).
std::vector<std::vector<Point>> solve_carrier_path(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                                   const NoisePath& noise, const SolverConfig& cfg);

/// Final measure only; the cheapest entry point for Monte Carlo estimators.
EmpiricalMeasure evolve_measure(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                const NoisePath& noise, const SolverConfig& cfg);

/// Frozen-measure Picard iterates. Iterate 1 is driven by the constant path
/// mu_0; iterate k by the measure path of iterate k-1. All iterates share the
/// noise path. Returns `iterations` solutions.
std::vector<FlowSolution> picard_solve(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                       const NoisePath& noise, const std::vector<Point>& tracked,
                                       const SolverConfig& cfg, int iterations);

/// sup over snapshots of W2 between two solutions sampled on the same grid.
double sup_w2_gap(const FlowSolution& a, const FlowSolution& b);

struct MeanEstimate {
  double mean = 0.0;
  double stderr = 0.0;
  std::size_t count = 0;
};
MeanEstimate mean_and_stderr(const std::vector<double>& samples);

struct StabilityOptions {
  double horizon = 0.5;
  std::size_t replicas = 100;
  std::uint64_t seed = 0;
  /// Optional tracked pair (u, v) for the pointwise ratio.
  std::optional<std::pair<Point, Point>> tracked_pair;
};

struct StabilityReport {
  double w2_initial = 0.0;
  /// E[sup_t W2(mu_t, nu_t)^p] / W2(mu_0, nu_0)^p for p = 2 and 4 (0 when the
  /// initial measures coincide and the numerator is 0).
  MeanEstimate ratio_p2;
  MeanEstimate ratio_p4;
  /// Raw numerators E[sup_t W2^p].
  MeanEstimate numerator_p2;
  MeanEstimate numerator_p4;
  /// E[sup_t d(x(u,t), x(v,t))^2] / (d(u,v)^2 + W2(mu0,nu0)^2) when requested.
  std::optional<MeanEstimate> tracked_ratio_p2;
  std::size_t failed = 0;
};

StabilityReport estimate_stability(const EmpiricalMeasure& mu0, const EmpiricalMeasure& nu0,
                                   const FieldSet& fields, const SolverConfig& cfg,
                                   const StabilityOptions& options);

struct ConvergenceReport {
  std::vector<double> dts;
  /// gaps[k] = E[sup_t max_particles d(x_{dt_k}, x_{dt_{k+1}})] with stderr.
  std::vector<MeanEstimate> gaps;
  /// Least-squares slope of log gap against log dt (NaN if any gap is 0).
  double order = 0.0;
};

/// Strong self-convergence on a dyadic ladder (dts must halve); the coarse
/// noise is the sum of the finest increments.
ConvergenceReport convergence_order(const EmpiricalMeasure& mu0, const FieldSet& fields,
                                    const std::vector<Point>& tracked, double horizon,
                                    const std::vector<double>& dts, std::size_t replicas,
                                    std::uint64_t seed, SolverConfig base = {});

/// Least-squares slope of log y against log x.
double log_log_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace mvflow
