#include "mvflow/empirical_measure.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "mvflow/error.hpp"
#include "mvflow/transport.hpp"

namespace mvflow {

EmpiricalMeasure::EmpiricalMeasure(Manifold manifold, std::vector<Point> points,
                                   std::vector<double> weights)
    : manifold_(std::move(manifold)), points_(std::move(points)), weights_(std::move(weights)) {
  if (points_.empty()) throw Error(ErrorKind::InvalidArgument, "empty measure");
  if (points_.size() != weights_.size()) {
    throw Error(ErrorKind::InvalidArgument, "points and weights differ in length");
  }
  // Neumaier summation: uniform weights 1/n must pass for very large n.
  double total = 0.0, carry = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0)) throw Error(ErrorKind::InvalidArgument, "negative weight");
    const double t = total + w;
    carry += std::abs(total) >= w ? (total - t) + w : (w - t) + total;
    total = t;
  }
  total += carry;
  if (std::abs(total - 1.0) > 1e-12) {
    throw Error(ErrorKind::InvalidArgument, "weights must sum to 1");
  }
  for (const auto& p : points_) {
    if (!manifold_.contains(p)) {
      throw Error(ErrorKind::ManifoldMismatch, "support point not on " + manifold_.spec());
    }
  }
  equal_weights_ = std::all_of(weights_.begin(), weights_.end(),
                               [&](double w) { return w == weights_.front(); });
}

EmpiricalMeasure EmpiricalMeasure::relocated(std::vector<Point> points) const {
  if (points.size() != points_.size()) {
    throw Error(ErrorKind::InvalidArgument, "relocated support must keep its length");
  }
  return {manifold_, std::move(points), weights_, equal_weights_};
}

EmpiricalMeasure EmpiricalMeasure::uniform(Manifold manifold, std::vector<Point> points) {
  const std::size_t n = points.size();
  std::vector<double> w(n, n ? 1.0 / static_cast<double>(n) : 0.0);
  return {std::move(manifold), std::move(points), std::move(w)};
}

EmpiricalMeasure EmpiricalMeasure::delta(Manifold manifold, Point x) {
  return {std::move(manifold), {std::move(x)}, {1.0}};
}

Vec EmpiricalMeasure::ambient_mean() const {
  Vec m = Vec::Zero(manifold_.ambient_dim());
  for (std::size_t i = 0; i < points_.size(); ++i) m += weights_[i] * points_[i];
  return m;
}

std::string EmpiricalMeasure::to_jsonl() const {
  std::string out;
  for (std::size_t i = 0; i < points_.size(); ++i) {
    nlohmann::json line;
    line["coords"] = std::vector<double>(points_[i].data(), points_[i].data() + points_[i].size());
    line["weight"] = weights_[i];
    out += line.dump();
    out += '\n';
  }
  return out;
}

EmpiricalMeasure EmpiricalMeasure::from_jsonl(const Manifold& manifold, std::string_view text) {
  std::vector<Point> pts;
  std::vector<double> w;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    const auto coords = j.at("coords").get<std::vector<double>>();
    if (static_cast<int>(coords.size()) != manifold.ambient_dim()) {
      throw Error(ErrorKind::ManifoldMismatch, "checkpoint coordinate count");
    }
    pts.push_back(Eigen::Map<const Eigen::VectorXd>(coords.data(), coords.size()));
    w.push_back(j.at("weight").get<double>());
  }
  return {manifold, std::move(pts), std::move(w)};
}

bool EmpiricalMeasure::same_measure(const EmpiricalMeasure& other, double tol) const {
  if (!(manifold_ == other.manifold_)) return false;
  // Merge atoms within tolerance on both sides and compare masses.
  auto collapse = [tol](const EmpiricalMeasure& m) {
    std::vector<std::pair<Point, double>> atoms;
    for (std::size_t i = 0; i < m.size(); ++i) {
      bool merged = false;
      for (auto& [p, w] : atoms) {
        if ((p - m.point(i)).norm() <= tol) {
          w += m.weight(i);
          merged = true;
          break;
        }
      }
      if (!merged) atoms.emplace_back(m.point(i), m.weight(i));
    }
    return atoms;
  };
  auto a = collapse(*this);
  auto b = collapse(other);
  if (a.size() != b.size()) return false;
  for (const auto& [p, w] : a) {
    const auto it = std::find_if(b.begin(), b.end(),
                                 [&](const auto& q) { return (q.first - p).norm() <= tol; });
    if (it == b.end() || std::abs(it->second - w) > 1e-12) return false;
  }
  return true;
}

Point PointSampler::draw(const Manifold& manifold, CounterRng& rng) const {
  switch (kind) {
    case Kind::Uniform: return manifold.sample_uniform(1, rng).front();
    case Kind::ProjectedGaussian: {
      for (;;) {
        Vec p = center;
        for (int k = 0; k < p.size(); ++k) p[k] += scale * rng.normal();
        try {
          return manifold.project_to_manifold(p);
        } catch (const Error&) {
          // Degenerate draw; try again.
        }
      }
    }
  }
  return {};
}

EmpiricalMeasure sample_iid(const Manifold& manifold, const PointSampler& sampler, std::size_t n,
                            CounterRng& rng) {
  if (n == 0) throw Error(ErrorKind::InvalidArgument, "sample size must be positive");
  if (sampler.kind == PointSampler::Kind::ProjectedGaussian &&
      sampler.center.size() != manifold.ambient_dim()) {
    throw Error(ErrorKind::ManifoldMismatch, "sampler center dimension");
  }
  std::vector<Point> pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) pts.push_back(sampler.draw(manifold, rng));
  return EmpiricalMeasure::uniform(manifold, std::move(pts));
}

namespace {

constexpr std::size_t kMaxRefinedSupport = 2048;

Eigen::MatrixXd squared_distance_matrix(const Manifold& M, std::span<const Point> a,
                                        std::span<const Point> b) {
  Eigen::MatrixXd c(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = M.geodesic_distance(a[i], b[j]);
      c(i, j) = d * d;
    }
  }
  return c;
}

EmpiricalMeasure subsample(const EmpiricalMeasure& mu, std::size_t k, CounterRng& rng) {
  // Draws by weight through the cumulative distribution.
  std::vector<double> cdf(mu.size());
  std::partial_sum(mu.weights().begin(), mu.weights().end(), cdf.begin());
  std::vector<Point> pts;
  pts.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double u = rng.uniform() * cdf.back();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    pts.push_back(mu.point(std::min<std::size_t>(it - cdf.begin(), mu.size() - 1)));
  }
  return EmpiricalMeasure::uniform(mu.manifold(), std::move(pts));
}

}  // namespace

W2Result wasserstein2_detailed(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                               const W2Options& options) {
  require_same_manifold(mu.manifold(), nu.manifold(), "wasserstein2");
  if (mu.size() > options.support_cap || nu.size() > options.support_cap) {
    if (!options.allow_subsample) {
      throw Error(ErrorKind::SupportTooLarge,
                  "support exceeds cap of " + std::to_string(options.support_cap));
    }
    CounterRng rng(options.subsample_stream);
    const auto a = subsample(mu, std::min(mu.size(), options.support_cap), rng);
    const auto b = subsample(nu, std::min(nu.size(), options.support_cap), rng);
    W2Options exact = options;
    exact.allow_subsample = false;
    return {wasserstein2_detailed(a, b, exact).value, true};
  }
  const Eigen::MatrixXd cost = squared_distance_matrix(mu.manifold(), mu.points(), nu.points());
  double total = 0.0;
  const std::size_t common = std::lcm(mu.size(), nu.size());
  if (mu.equal_weights() && nu.equal_weights() && common <= kMaxRefinedSupport) {
    // Equal-weight measures: split atoms into copies of mass 1/common and
    // solve an assignment problem, which is exact for this cost.
    if (common == mu.size() && common == nu.size()) {
      total = solve_assignment(cost) / static_cast<double>(common);
    } else {
      const std::size_t ra = common / mu.size(), rb = common / nu.size();
      // Repeated columns are cheap for the row-reduction phase, repeated rows are not,
      // so put the side with more copies along the columns.
      const bool flip = ra > rb;
      Eigen::MatrixXd refined(common, common);
      for (std::size_t i = 0; i < common; ++i) {
        for (std::size_t j = 0; j < common; ++j) {
          refined(i, j) = flip ? cost(j / ra, i / rb) : cost(i / ra, j / rb);
        }
      }
      total = solve_assignment(refined) / static_cast<double>(common);
    }
  } else {
    total = solve_transport(cost, mu.weights(), nu.weights());
  }
  return {std::sqrt(std::max(total, 0.0)), false};
}

}  // namespace mvflow
