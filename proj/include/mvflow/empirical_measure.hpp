#pragma once

// Finite-support probability measures on a manifold. Measures are immutable
// value snapshots; operations return new measures.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvflow/geometry.hpp"

namespace mvflow {

class EmpiricalMeasure {
 public:
  /// Validates: weights nonnegative and summing to 1 within 1e-12, points on
  /// the manifold within 1e-10.
  EmpiricalMeasure(Manifold manifold, std::vector<Point> points, std::vector<double> weights);

  static EmpiricalMeasure uniform(Manifold manifold, std::vector<Point> points);
  static EmpiricalMeasure delta(Manifold manifold, Point x);

  const Manifold& manifold() const { return manifold_; }
  std::size_t size() const { return points_.size(); }
  std::span<const Point> points() const { return points_; }
  std::span<const double> weights() const { return weights_; }
  const Point& point(std::size_t i) const { return points_[i]; }
  double weight(std::size_t i) const { return weights_[i]; }
  bool equal_weights() const { return equal_weights_; }

  /// Same weights, mapped support.
  template <class Map>
  EmpiricalMeasure pushforward(Map&& map) const {
    std::vector<Point> mapped;
    mapped.reserve(points_.size());
    for (const auto& p : points_) mapped.push_back(map(p));
    return {manifold_, std::move(mapped), weights_, equal_weights_};
  }

  /// Same weights on a new support of equal length, without re-validation
  /// (solver snapshots, possibly off the manifold when not renormalized).
  EmpiricalMeasure relocated(std::vector<Point> points) const;

  /// Sum_i w_i f(x_i).
  template <class F>
  double integrate(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < points_.size(); ++i) s += weights_[i] * f(points_[i]);
    return s;
  }

  /// Weighted mean of the ambient coordinates.
  Vec ambient_mean() const;

  /// One JSON object per line: {"coords":[...],"weight":w}.
  std::string to_jsonl() const;
  static EmpiricalMeasure from_jsonl(const Manifold& manifold, std::string_view text);

  /// Equality as measures: same atoms with the same total mass, support order
  /// ignored (atoms matched within `tol`).
  bool same_measure(const EmpiricalMeasure& other, double tol = 0.0) const;

 private:
  EmpiricalMeasure(Manifold manifold, std::vector<Point> points, std::vector<double> weights,
                   bool equal_weights)
      : manifold_(std::move(manifold)),
        points_(std::move(points)),
        weights_(std::move(weights)),
        equal_weights_(equal_weights) {}

  Manifold manifold_;
  std::vector<Point> points_;
  std::vector<double> weights_;
  bool equal_weights_ = false;
};

/// Distribution of a single point, used to build i.i.d. empirical measures.
struct PointSampler {
  enum class Kind { Uniform, ProjectedGaussian };
  Kind kind = Kind::Uniform;
  /// ProjectedGaussian: project(center + scale * N(0, I)).
  Point center;
  double scale = 1.0;

  Point draw(const Manifold& manifold, CounterRng& rng) const;
};

EmpiricalMeasure sample_iid(const Manifold& manifold, const PointSampler& sampler, std::size_t n,
                            CounterRng& rng);

struct W2Options {
  std::size_t support_cap = 512;
  /// Above the cap, subsample `support_cap` atoms from each side instead of
  /// failing; the result is then flagged approximate.
  bool allow_subsample = false;
  std::uint64_t subsample_stream = 0;
};

struct W2Result {
  double value = 0.0;
  bool approximate = false;
};

/// Exact Wasserstein-2 distance with ground cost d_M^2.
W2Result wasserstein2_detailed(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                               const W2Options& options = {});
inline double wasserstein2(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                           const W2Options& options = {}) {
  return wasserstein2_detailed(mu, nu, options).value;
}

}  // namespace mvflow
