#pragma once

// Discretized n-dimensional Brownian driver on a uniform grid.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace mvflow {

class NoisePath {
 public:
  NoisePath() = default;

  /// Increments (j, i) ~ N(0, dt), a pure function of (seed, stream_id, i, j).
  /// Throws InvalidGrid unless dt > 0 and horizon / dt is an integer.
  static NoisePath generate(int n, double horizon, double dt, std::uint64_t seed,
                            std::uint64_t stream_id);
  /// Same as generate, but from an already derived stream.
  static NoisePath from_stream(int n, int steps, double dt, std::uint64_t stream);
  /// Wraps explicit increments (rows = steps, columns = Brownian motions).
  static NoisePath from_increments(double dt, Eigen::MatrixXd increments);

  int dimension() const { return static_cast<int>(increments_.cols()); }
  int steps() const { return static_cast<int>(increments_.rows()); }
  double dt() const { return dt_; }
  double horizon() const { return dt_ * steps(); }

  const Eigen::MatrixXd& increments() const { return increments_; }
  double increment(int step, int i) const { return increments_(step, i); }
  /// B^i at grid time index `step` (B_0 = 0).
  double value(int step, int i) const;

  /// Path on the grid with step factor * dt whose increments are sums of
  /// consecutive fine increments. Throws InvalidGrid if factor does not
  /// divide the step count.
  NoisePath coarsen(int factor) const;
  /// Antithetic partner (all increments negated).
  NoisePath negated() const;
  /// Steps [begin, end) as a path of its own.
  NoisePath slice(int begin, int end) const;
  /// Same increments with column i set to zero.
  NoisePath without(int i) const;

  bool operator==(const NoisePath& other) const {
    return dt_ == other.dt_ && increments_.rows() == other.increments_.rows() &&
           increments_.cols() == other.increments_.cols() && increments_ == other.increments_;
  }

 private:
  double dt_ = 0.0;
  Eigen::MatrixXd increments_;
};

/// Number of steps of size dt in horizon; throws InvalidGrid unless it is a
/// positive integer up to 1e-9 relative slack (0 steps allowed when horizon = 0).
int grid_steps(double horizon, double dt);

}  // namespace mvflow
