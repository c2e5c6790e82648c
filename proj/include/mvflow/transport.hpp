#pragma once

// Exact discrete optimal transport on small supports.

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace mvflow {

/// Minimum-cost perfect matching on a square cost matrix (Jonker-Volgenant).
/// Returns the optimal total cost; `assignment[i]` receives the column matched
/// to row i. The result is a deterministic function of the cost matrix.
double solve_assignment(const Eigen::MatrixXd& cost, std::vector<int>* assignment = nullptr);

/// Exact transportation problem min <plan, cost> subject to row sums `supply`
/// and column sums `demand` (successive shortest paths). Both marginals must
/// carry the same total mass up to 1e-12.
double solve_transport(const Eigen::MatrixXd& cost, std::span<const double> supply,
                       std::span<const double> demand, Eigen::MatrixXd* plan = nullptr);

}  // namespace mvflow
