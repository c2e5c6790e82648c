#pragma once

// Config-driven experiments: one flat JSON file per experiment, validated
// before any compute, resolved with defaults, and run suite by suite into an
// output directory.
//
// <out>/resolved-config.json   the config with every default filled in
// <out>/records.csv            one row per result record
// <out>/report.json            per-suite summary and acceptance outcome
// <out>/checkpoints/*.jsonl    measure snapshots from `simulate`
// plus per-suite CSV/JSON files (trajectories, calculus, kv-kernels-order*, ...).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvflow/calculus.hpp"
#include "mvflow/flow_solver.hpp"

namespace mvflow {

struct FunctionalSpec {
  std::string name;
  MeasureFunctional f;
  /// Suites that use this functional (empty: all).
  std::vector<std::string> suites;
  /// Closed-form expectations turned into acceptance checks when present.
  std::optional<double> expect_mean;
  std::optional<double> expect_kernel_order1;
  std::optional<double> expect_kernel_order2;
  std::optional<double> expect_first_order_share;

  bool used_by(const std::string& suite) const;
};

struct Budgets {
  std::size_t replicas = 1000;
  std::size_t outer = 200;
  std::size_t inner = 1;
  std::size_t malliavin_replicas = 2000;
  double eps = 1e-2;
  bool richardson = true;
  int nodes = 3;
  int bins = 8;
  int regression_degree = 2;
  std::vector<int> orders{1};
  int order2_bins = 2;
  std::vector<double> diagnostic_times;
  std::vector<double> perturbations{0.2, 0.1, 0.05};
  std::vector<double> dt_ladder;
  int picard_iterations = 8;
  int calculus_configurations = 50;
  std::vector<double> eps_ladder{1e-2, 1e-3};
  std::size_t output_replicas = 4;
  int checkpoint_stride = 0;
};

struct Thresholds {
  double sigma = 3.0;
  double first_order_share_min = 0.0;
  std::optional<double> first_order_share_at;
  double share_tolerance = 1e-6;
  double stability_factor = 2.0;
  double picard_ratio = 0.8;
  double picard_direct_factor = 3.0;
  double halving_tolerance = 0.3;
  double derivative_tolerance = 1e-4;
  double slope_min = 1.8;
  double empirical_gradient_tolerance = 1e-5;
  double manifold_tolerance = 1e-10;
};

struct ExperimentConfig {
  std::string id;
  Manifold manifold = Manifold::euclidean(1);
  FieldSet fields{InteractionField::zero(Manifold::euclidean(1)), {}};
  EmpiricalMeasure mu0 = EmpiricalMeasure::delta(Manifold::euclidean(1), Vec::Zero(1));
  std::vector<FunctionalSpec> functionals;
  SolverConfig solver;
  double horizon = 1.0;
  Budgets budgets;
  Thresholds checks;
  std::uint64_t seed = 0;
  std::filesystem::path out;
  std::vector<std::string> suites;
  /// Input with every default written back.
  nlohmann::json resolved;
  /// Git-style blob SHA-1 of the resolved config without the output directory.
  std::string hash;
};

/// Validates and resolves. Unknown keys, wrong types and bad values raise
/// ConfigInvalid naming the offending JSON path.
ExperimentConfig parse_config(const nlohmann::json& input);
ExperimentConfig load_config(const std::filesystem::path& file);

/// Optional command-line overrides, applied to the JSON before validation so
/// they land in the resolved config and its hash.
struct ConfigOverrides {
  std::optional<std::vector<std::string>> suites;
  std::optional<std::size_t> replicas;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> order;
};
nlohmann::json apply_overrides(nlohmann::json input, const ConfigOverrides& o);

/// `git hash-object` of the given bytes.
std::string git_blob_sha1(const std::string& bytes);

const std::vector<std::string>& known_suites();

struct ResultRecord {
  std::string suite;
  std::string test;
  std::string parameters;
  double value = 0.0;
  double stderr = 0.0;
  double tolerance = 0.0;
  /// Unset for informational records.
  std::optional<bool> pass;
  bool acceptance = false;
  double wall_time = 0.0;
};

struct RunResult {
  std::vector<ResultRecord> records;
  std::size_t acceptance_checks = 0;
  std::size_t acceptance_failures = 0;
  bool ok() const { return acceptance_failures == 0; }
};

/// Runs every suite in config.suites and writes the output layout. Suite
/// failures other than config errors become failed records.
RunResult run_experiment(const ExperimentConfig& config);

}  // namespace mvflow
