#include "mvflow/noise.hpp"

#include <cmath>
#include <string>

#include "mvflow/error.hpp"
#include "mvflow/random.hpp"

namespace mvflow {

int grid_steps(double horizon, double dt) {
  if (!(dt > 0) || !std::isfinite(dt)) throw Error(ErrorKind::InvalidGrid, "time step must be positive");
  if (!(horizon >= 0) || !std::isfinite(horizon)) throw Error(ErrorKind::InvalidGrid, "horizon must be nonnegative");
  const double ratio = horizon / dt;
  const double rounded = std::round(ratio);
  if (std::abs(ratio - rounded) > 1e-9 * std::max(1.0, ratio)) {
    throw Error(ErrorKind::InvalidGrid, "horizon " + std::to_string(horizon) + " is not a multiple of dt " +
                                            std::to_string(dt));
  }
  return static_cast<int>(rounded);
}

NoisePath NoisePath::generate(int n, double horizon, double dt, std::uint64_t seed,
                              std::uint64_t stream_id) {
  const int steps = grid_steps(horizon, dt);
  return from_stream(n, steps, dt, derive_stream(seed, {stream_id}));
}

NoisePath NoisePath::from_stream(int n, int steps, double dt, std::uint64_t stream) {
  if (n < 0) throw Error(ErrorKind::InvalidArgument, "negative noise dimension");
  if (!(dt > 0)) throw Error(ErrorKind::InvalidGrid, "time step must be positive");
  NoisePath p;
  p.dt_ = dt;
  p.increments_.resize(steps, n);
  const double sd = std::sqrt(dt);
  for (int j = 0; j < steps; ++j) {
    for (int i = 0; i < n; ++i) p.increments_(j, i) = sd * gaussian_at(stream, static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(i));
  }
  return p;
}

NoisePath NoisePath::from_increments(double dt, Eigen::MatrixXd increments) {
  if (!(dt > 0)) throw Error(ErrorKind::InvalidGrid, "time step must be positive");
  NoisePath p;
  p.dt_ = dt;
  p.increments_ = std::move(increments);
  return p;
}

double NoisePath::value(int step, int i) const {
  double b = 0.0;
  for (int j = 0; j < step; ++j) b += increments_(j, i);
  return b;
}

NoisePath NoisePath::coarsen(int factor) const {
  if (factor < 1 || steps() % factor != 0) {
    throw Error(ErrorKind::InvalidGrid, "coarsening factor must divide the step count");
  }
  NoisePath p;
  p.dt_ = dt_ * factor;
  p.increments_ = Eigen::MatrixXd::Zero(steps() / factor, dimension());
  for (int j = 0; j < steps(); ++j) p.increments_.row(j / factor) += increments_.row(j);
  return p;
}

NoisePath NoisePath::negated() const {
  NoisePath p = *this;
  p.increments_ = -increments_;
  return p;
}

NoisePath NoisePath::slice(int begin, int end) const {
  if (begin < 0 || end < begin || end > steps()) throw Error(ErrorKind::InvalidGrid, "slice out of range");
  NoisePath p;
  p.dt_ = dt_;
  p.increments_ = increments_.middleRows(begin, end - begin);
  return p;
}

NoisePath NoisePath::without(int i) const {
  NoisePath p = *this;
  if (i >= 0 && i < dimension()) p.increments_.col(i).setZero();
  return p;
}

}  // namespace mvflow
