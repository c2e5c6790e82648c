#include "mvflow/geometry.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

#include "mvflow/error.hpp"

namespace mvflow {

namespace {

constexpr double kDegenerate = 1e-14;

int parse_dim(std::string_view text, std::string_view spec) {
  int value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || value < 1) {
    throw Error(ErrorKind::ConfigInvalid, "bad manifold dimension in '" + std::string(spec) + "'");
  }
  return value;
}

// Projector onto the complement of the unit vector n, written into the block
// of P starting at (off, off).
template <class Block>
void write_block_projector(Block&& block, const Vec& n) {
  block = Mat::Identity(n.size(), n.size()) - n * n.transpose();
}

}  // namespace

Manifold Manifold::euclidean(int dim) {
  if (dim < 1 || dim > kMaxAmbient) {
    throw Error(ErrorKind::InvalidArgument, "euclidean dimension out of range");
  }
  return {ManifoldKind::Euclidean, dim, dim};
}

Manifold Manifold::sphere(int dim) {
  if (dim < 1 || dim + 1 > kMaxAmbient) {
    throw Error(ErrorKind::InvalidArgument, "sphere dimension out of range");
  }
  return {ManifoldKind::Sphere, dim, dim + 1};
}

Manifold Manifold::flat_torus(int dim) {
  if (dim < 1 || 2 * dim > kMaxAmbient) {
    throw Error(ErrorKind::InvalidArgument, "torus dimension out of range");
  }
  return {ManifoldKind::FlatTorus, dim, 2 * dim};
}

Manifold Manifold::parse(std::string_view spec) {
  const auto colon = spec.find(':');
  if (colon == std::string_view::npos) {
    throw Error(ErrorKind::ConfigInvalid, "manifold spec must look like 'sphere:2', got '" +
                                              std::string(spec) + "'");
  }
  const auto family = spec.substr(0, colon);
  const int dim = parse_dim(spec.substr(colon + 1), spec);
  try {
    if (family == "euclidean") return euclidean(dim);
    if (family == "sphere") return sphere(dim);
    if (family == "torus") return flat_torus(dim);
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigInvalid, e.what());
  }
  throw Error(ErrorKind::ConfigInvalid, "unknown manifold family '" + std::string(family) + "'");
}

std::string Manifold::spec() const {
  switch (kind_) {
    case ManifoldKind::Euclidean: return "euclidean:" + std::to_string(dim_);
    case ManifoldKind::Sphere: return "sphere:" + std::to_string(dim_);
    case ManifoldKind::FlatTorus: return "torus:" + std::to_string(dim_);
  }
  return {};
}

Point Manifold::project_to_manifold(const Vec& p) const {
  if (p.size() != ambient_) throw Error(ErrorKind::ManifoldMismatch, "ambient dimension");
  switch (kind_) {
    case ManifoldKind::Euclidean: return p;
    case ManifoldKind::Sphere: {
      const double n = p.norm();
      if (n < kDegenerate) throw Error(ErrorKind::DegeneratePoint, "projecting the origin");
      return p / n;
    }
    case ManifoldKind::FlatTorus: {
      Point out(ambient_);
      for (int k = 0; k < dim_; ++k) {
        const double n = std::hypot(p[2 * k], p[2 * k + 1]);
        if (n < kDegenerate) throw Error(ErrorKind::DegeneratePoint, "zero circle block");
        out[2 * k] = p[2 * k] / n;
        out[2 * k + 1] = p[2 * k + 1] / n;
      }
      return out;
    }
  }
  return p;
}

double Manifold::manifold_residual(const Vec& p) const {
  return (project_to_manifold(p) - p).norm();
}

bool Manifold::contains(const Vec& p, double tol) const {
  if (p.size() != ambient_ || !p.allFinite()) return false;
  try {
    return manifold_residual(p) <= tol;
  } catch (const Error&) {
    return false;
  }
}

Mat Manifold::tangent_projector(const Vec& x) const {
  Mat P = Mat::Identity(ambient_, ambient_);
  switch (kind_) {
    case ManifoldKind::Euclidean: break;
    case ManifoldKind::Sphere: {
      const Vec n = x / x.norm();
      write_block_projector(P, n);
      break;
    }
    case ManifoldKind::FlatTorus:
      for (int k = 0; k < dim_; ++k) {
        Vec n = x.segment(2 * k, 2);
        n /= n.norm();
        write_block_projector(P.block(2 * k, 2 * k, 2, 2), n);
      }
      break;
  }
  return P;
}

Tangent Manifold::project_to_tangent(const Point& x, const Vec& v) const {
  switch (kind_) {
    case ManifoldKind::Euclidean: return v;
    case ManifoldKind::Sphere: {
      const double r2 = x.squaredNorm();
      return v - x * (x.dot(v) / r2);
    }
    case ManifoldKind::FlatTorus: {
      Tangent out(ambient_);
      for (int k = 0; k < dim_; ++k) {
        const double nx = x[2 * k], ny = x[2 * k + 1];
        const double r2 = nx * nx + ny * ny;
        const double c = (nx * v[2 * k] + ny * v[2 * k + 1]) / r2;
        out[2 * k] = v[2 * k] - c * nx;
        out[2 * k + 1] = v[2 * k + 1] - c * ny;
      }
      return out;
    }
  }
  return v;
}

bool Manifold::is_tangent(const Point& x, const Vec& v, double rel_tol) const {
  const double scale = std::max(v.norm(), 1.0);
  return (project_to_tangent(x, v) - v).norm() <= rel_tol * scale;
}

Mat Manifold::projector_derivative(const Point& x, const Vec& v) const {
  // For P(u) = I - n n^T with n = u/|u|: D_w P v = -(1/r)(<n,v> P w + n <P w, v>).
  Mat M = Mat::Zero(ambient_, ambient_);
  auto block = [&](int off, int len) {
    const Vec u = x.segment(off, len);
    const double r = u.norm();
    const Vec n = u / r;
    const Vec vb = v.segment(off, len);
    Mat P = Mat::Identity(len, len) - n * n.transpose();
    M.block(off, off, len, len) = -(n.dot(vb) * P + n * (P * vb).transpose()) / r;
  };
  switch (kind_) {
    case ManifoldKind::Euclidean: break;
    case ManifoldKind::Sphere: block(0, ambient_); break;
    case ManifoldKind::FlatTorus:
      for (int k = 0; k < dim_; ++k) block(2 * k, 2);
      break;
  }
  return M;
}

Mat Manifold::tangent_basis(const Point& x) const {
  Mat B = Mat::Zero(ambient_, dim_);
  switch (kind_) {
    case ManifoldKind::Euclidean: B = Mat::Identity(dim_, dim_); break;
    case ManifoldKind::Sphere: {
      Eigen::MatrixXd A = Eigen::MatrixXd::Identity(ambient_, ambient_);
      // Put x first so the remaining Householder columns span its complement.
      Eigen::MatrixXd X(ambient_, ambient_ + 1);
      X.col(0) = x / x.norm();
      X.rightCols(ambient_) = A;
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(X);
      const Eigen::MatrixXd Q = qr.householderQ();
      B = Q.rightCols(dim_);
      break;
    }
    case ManifoldKind::FlatTorus:
      for (int k = 0; k < dim_; ++k) {
        const double r = std::hypot(x[2 * k], x[2 * k + 1]);
        B(2 * k, k) = -x[2 * k + 1] / r;
        B(2 * k + 1, k) = x[2 * k] / r;
      }
      break;
  }
  return B;
}

Point Manifold::retract(const Point& x, const Tangent& v) const {
  switch (kind_) {
    case ManifoldKind::Euclidean: return x + v;
    case ManifoldKind::Sphere: {
      const Tangent t = project_to_tangent(x, v);
      const double theta = t.norm();
      if (theta == 0.0) return x;
      return x * std::cos(theta) + t * (std::sin(theta) / theta);
    }
    case ManifoldKind::FlatTorus: {
      Point out(ambient_);
      for (int k = 0; k < dim_; ++k) {
        const double nx = x[2 * k], ny = x[2 * k + 1];
        // Advance the angle by the component of v along (-ny, nx).
        const double alpha = -ny * v[2 * k] + nx * v[2 * k + 1];
        const double c = std::cos(alpha), s = std::sin(alpha);
        out[2 * k] = c * nx - s * ny;
        out[2 * k + 1] = s * nx + c * ny;
      }
      return out;
    }
  }
  return x;
}

double Manifold::geodesic_distance(const Point& x, const Point& y) const {
  switch (kind_) {
    case ManifoldKind::Euclidean: return (x - y).norm();
    case ManifoldKind::Sphere:
      // arccos<x,y>, in a form that keeps full precision for close pairs.
      return 2.0 * std::atan2((x - y).norm(), (x + y).norm());
    case ManifoldKind::FlatTorus: {
      double sum = 0.0;
      for (int k = 0; k < dim_; ++k) {
        const double cross = x[2 * k] * y[2 * k + 1] - x[2 * k + 1] * y[2 * k];
        const double dot = x[2 * k] * y[2 * k] + x[2 * k + 1] * y[2 * k + 1];
        const double d = std::atan2(cross, dot);
        sum += d * d;
      }
      return std::sqrt(sum);
    }
  }
  return 0.0;
}

double Manifold::bilipschitz_constant() const {
  return kind_ == ManifoldKind::Euclidean ? 1.0 : std::numbers::pi / 2.0;
}

std::vector<Point> Manifold::sample_uniform(std::size_t n, CounterRng& rng) const {
  std::vector<Point> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Point p(ambient_);
    switch (kind_) {
      case ManifoldKind::Euclidean:
        for (int k = 0; k < ambient_; ++k) p[k] = rng.normal();
        break;
      case ManifoldKind::Sphere: {
        double r = 0.0;
        do {
          for (int k = 0; k < ambient_; ++k) p[k] = rng.normal();
          r = p.norm();
        } while (r < 1e-8);
        p /= r;
        break;
      }
      case ManifoldKind::FlatTorus:
        for (int k = 0; k < dim_; ++k) {
          const double a = 2.0 * std::numbers::pi * rng.uniform();
          p[2 * k] = std::cos(a);
          p[2 * k + 1] = std::sin(a);
        }
        break;
    }
    out.push_back(p);
  }
  return out;
}

Tangent Manifold::random_tangent(const Point& x, CounterRng& rng) const {
  Vec v(ambient_);
  for (int k = 0; k < ambient_; ++k) v[k] = rng.normal();
  return project_to_tangent(x, v);
}

std::vector<double> Manifold::torus_angles(const Point& x) const {
  std::vector<double> a(dim_);
  for (int k = 0; k < dim_; ++k) a[k] = std::atan2(x[2 * k + 1], x[2 * k]);
  return a;
}

Point Manifold::torus_point(const std::vector<double>& angles) const {
  Point p(ambient_);
  for (int k = 0; k < dim_; ++k) {
    p[2 * k] = std::cos(angles[k]);
    p[2 * k + 1] = std::sin(angles[k]);
  }
  return p;
}

void require_same_manifold(const Manifold& a, const Manifold& b, std::string_view what) {
  if (!(a == b)) {
    throw Error(ErrorKind::ManifoldMismatch,
                std::string(what) + ": " + a.spec() + " vs " + b.spec());
  }
}

}  // namespace mvflow
