#pragma once

// Manifolds presented through explicit isometric embeddings in R^N.
//
// All points and tangent vectors are stored in ambient coordinates. Tangent
// spaces are the images of the orthogonal tangent projector P_x; the
// retraction is the exact Riemannian exponential map for every family.

#include <string>
#include <string_view>
#include <vector>

#include "mvflow/linalg.hpp"
#include "mvflow/random.hpp"

namespace mvflow {

enum class ManifoldKind { Euclidean, Sphere, FlatTorus };

/// Tolerance for "point lies on the manifold".
inline constexpr double kOnManifoldTol = 1e-10;
/// Relative tolerance for "vector lies in the tangent space".
inline constexpr double kTangencyTol = 1e-10;

class Manifold {
 public:
  static Manifold euclidean(int dim);
  /// Unit sphere S^dim in R^(dim+1).
  static Manifold sphere(int dim);
  /// Product of dim unit circles in R^(2 dim).
  static Manifold flat_torus(int dim);
  /// Parses "euclidean:d", "sphere:d" or "torus:d".
  static Manifold parse(std::string_view spec);

  ManifoldKind kind() const { return kind_; }
  int intrinsic_dim() const { return dim_; }
  int ambient_dim() const { return ambient_; }
  std::string spec() const;
  bool compact() const { return kind_ != ManifoldKind::Euclidean; }

  bool operator==(const Manifold&) const = default;

  /// Nearest point of the manifold. Throws DegeneratePoint when a normalized
  /// block has norm below 1e-14.
  Point project_to_manifold(const Vec& p) const;
  /// Distance from p to its projection.
  double manifold_residual(const Vec& p) const;
  bool contains(const Vec& p, double tol = kOnManifoldTol) const;

  Mat tangent_projector(const Vec& x) const;
  Tangent project_to_tangent(const Point& x, const Vec& v) const;
  bool is_tangent(const Point& x, const Vec& v, double rel_tol = kTangencyTol) const;

  /// Matrix M with M w = (D_w P)(x) v, the derivative of the tangent
  /// projector along w applied to v.
  Mat projector_derivative(const Point& x, const Vec& v) const;

  /// Orthonormal basis of T_xM as the columns of an N x d matrix.
  Mat tangent_basis(const Point& x) const;

  /// exp_x(v), the exact exponential map.
  Point retract(const Point& x, const Tangent& v) const;

  double geodesic_distance(const Point& x, const Point& y) const;
  static double chordal_distance(const Point& x, const Point& y) { return (x - y).norm(); }

  /// Constant C with d_M <= C |x - y| for every pair.
  double bilipschitz_constant() const;

  /// I.i.d. draws from the normalized Riemannian volume (sphere, torus);
  /// Euclidean spaces have no finite volume and draw standard normals.
  std::vector<Point> sample_uniform(std::size_t n, CounterRng& rng) const;
  Tangent random_tangent(const Point& x, CounterRng& rng) const;

  /// Per-factor angles of a torus point.
  std::vector<double> torus_angles(const Point& x) const;
  Point torus_point(const std::vector<double>& angles) const;

 private:
  Manifold(ManifoldKind kind, int dim, int ambient) : kind_(kind), dim_(dim), ambient_(ambient) {}

  ManifoldKind kind_;
  int dim_;
  int ambient_;
};

/// Throws ManifoldMismatch unless a == b.
void require_same_manifold(const Manifold& a, const Manifold& b, std::string_view what);

}  // namespace mvflow
