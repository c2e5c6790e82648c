#include "mvflow/interaction_fields.hpp"

#include <cmath>
#include <numbers>

#include "mvflow/error.hpp"

namespace mvflow {

namespace {

double phi(MomentMap::Transform t, double m) {
  switch (t) {
    case MomentMap::Transform::Identity: return m;
    case MomentMap::Transform::Tanh: return std::tanh(m);
    case MomentMap::Transform::Sin: return std::sin(m);
  }
  return m;
}

double dphi(MomentMap::Transform t, double m) {
  switch (t) {
    case MomentMap::Transform::Identity: return 1.0;
    case MomentMap::Transform::Tanh: {
      const double c = std::cosh(m);
      return 1.0 / (c * c);
    }
    case MomentMap::Transform::Sin: return std::cos(m);
  }
  return 1.0;
}

// Radius of the smallest centered ball containing the embedded manifold.
std::optional<double> ambient_radius(const Manifold& m) {
  switch (m.kind()) {
    case ManifoldKind::Sphere: return 1.0;
    case ManifoldKind::FlatTorus: return std::sqrt(static_cast<double>(m.intrinsic_dim()));
    case ManifoldKind::Euclidean: return std::nullopt;
  }
  return std::nullopt;
}

template <class A, class B>
bool close_mat(const A& fd, const B& an, double rel_tol) {
  const double scale = std::max({fd.norm(), an.norm(), 1e-3});
  return (fd - an).norm() <= rel_tol * scale + 1e-9;
}

void require_finite_param(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(ErrorKind::InvalidArgument, std::string(what) + " must be finite");
}

}  // namespace

// ---------------------------------------------------------------- ScalarField

ScalarField ScalarField::constant(double c) {
  require_finite_param(c, "constant");
  ScalarField f;
  f.kind_ = Kind::Constant;
  f.name_ = "constant";
  f.c_ = c;
  return f;
}

ScalarField ScalarField::linear(Vec a, double offset) {
  ScalarField f;
  f.kind_ = Kind::Linear;
  f.name_ = "linear";
  f.a_ = std::move(a);
  f.c_ = offset;
  return f;
}

ScalarField ScalarField::coordinate(int dim, int index) {
  if (index < 0 || index >= dim) throw Error(ErrorKind::InvalidArgument, "coordinate index out of range");
  ScalarField f = linear(Vec::Unit(dim, index));
  f.name_ = "coordinate";
  f.index_ = index;
  return f;
}

ScalarField ScalarField::coordinate_square(int index) {
  if (index < 0) throw Error(ErrorKind::InvalidArgument, "coordinate index out of range");
  ScalarField f;
  f.kind_ = Kind::CoordinateSquare;
  f.name_ = "coordinate_square";
  f.index_ = index;
  return f;
}

ScalarField ScalarField::gaussian_bump(Vec center, double sigma, double amplitude) {
  if (!(sigma > 0)) throw Error(ErrorKind::InvalidArgument, "gaussian_bump sigma must be positive");
  ScalarField f;
  f.kind_ = Kind::GaussianBump;
  f.name_ = "gaussian_bump";
  f.a_ = std::move(center);
  f.sigma_ = sigma;
  f.c_ = amplitude;
  return f;
}

ScalarField ScalarField::custom(ValueFn value, GradFn gradient, HessFn hessian, std::string name) {
  if (!value || !gradient || !hessian) {
    throw Error(ErrorKind::InvalidArgument, "custom scalar field needs value, gradient and hessian");
  }
  ScalarField f;
  f.kind_ = Kind::Custom;
  f.name_ = std::move(name);
  f.value_fn_ = std::make_shared<const ValueFn>(std::move(value));
  f.grad_fn_ = std::make_shared<const GradFn>(std::move(gradient));
  f.hess_fn_ = std::make_shared<const HessFn>(std::move(hessian));
  return f;
}

double ScalarField::value(const Vec& x) const {
  switch (kind_) {
    case Kind::Constant: return c_;
    case Kind::Linear: return a_.dot(x) + c_;
    case Kind::CoordinateSquare: return x(index_) * x(index_);
    case Kind::GaussianBump: return c_ * std::exp(-(x - a_).squaredNorm() / (2 * sigma_ * sigma_));
    case Kind::Custom: return (*value_fn_)(x);
  }
  return 0.0;
}

Vec ScalarField::gradient(const Vec& x) const {
  switch (kind_) {
    case Kind::Constant: return Vec::Zero(x.size());
    case Kind::Linear: return a_;
    case Kind::CoordinateSquare: {
      Vec g = Vec::Zero(x.size());
      g(index_) = 2 * x(index_);
      return g;
    }
    case Kind::GaussianBump: {
      const double s2 = sigma_ * sigma_;
      return -value(x) / s2 * (x - a_);
    }
    case Kind::Custom: return (*grad_fn_)(x);
  }
  return Vec::Zero(x.size());
}

Mat ScalarField::hessian(const Vec& x) const {
  const auto n = x.size();
  switch (kind_) {
    case Kind::Constant:
    case Kind::Linear: return Mat::Zero(n, n);
    case Kind::CoordinateSquare: {
      Mat h = Mat::Zero(n, n);
      h(index_, index_) = 2.0;
      return h;
    }
    case Kind::GaussianBump: {
      const double s2 = sigma_ * sigma_;
      const double v = value(x);
      const Vec d = x - a_;
      return v / (s2 * s2) * d * d.transpose() - v / s2 * Mat::Identity(n, n);
    }
    case Kind::Custom: return (*hess_fn_)(x);
  }
  return Mat::Zero(n, n);
}

std::optional<double> ScalarField::lipschitz_bound(const Manifold& manifold) const {
  // A bound on |grad f| over the convex hull of the embedded manifold bounds
  // the chordal Lipschitz constant, and chordal <= geodesic distance.
  switch (kind_) {
    case Kind::Constant: return 0.0;
    case Kind::Linear: return a_.norm();
    case Kind::CoordinateSquare: {
      const auto r = ambient_radius(manifold);
      if (!r) return std::nullopt;
      // Every coordinate of a torus or sphere point is bounded by 1.
      return 2.0 * std::min(*r, 1.0);
    }
    case Kind::GaussianBump: return std::abs(c_) / sigma_ * std::exp(-0.5);
    case Kind::Custom: return std::nullopt;
  }
  return std::nullopt;
}

void ScalarField::validate(const Manifold& manifold) const {
  const int n = manifold.ambient_dim();
  if ((kind_ == Kind::Linear || kind_ == Kind::GaussianBump) && a_.size() != n) {
    throw Error(ErrorKind::ManifoldMismatch,
                name_ + " parameter has length " + std::to_string(a_.size()) + ", ambient dimension is " +
                    std::to_string(n));
  }
  if (kind_ == Kind::CoordinateSquare && index_ >= n) {
    throw Error(ErrorKind::ManifoldMismatch, "coordinate index exceeds ambient dimension");
  }
}

// ------------------------------------------------------------------ MomentMap

MomentMap::MomentMap(Mat A, Vec b, Eigen::MatrixXd C, Transform transform)
    : ambient_(static_cast<int>(b.size())),
      moments_(static_cast<int>(C.cols())),
      A_(std::move(A)),
      b_(std::move(b)),
      C_(std::move(C)),
      transform_(transform) {
  if (A_.rows() != ambient_ || A_.cols() != ambient_ || (moments_ > 0 && C_.rows() != ambient_)) {
    throw Error(ErrorKind::InvalidArgument, "moment map shapes do not agree");
  }
  if (C_.rows() != ambient_) C_.resize(ambient_, 0);
}

MomentMap MomentMap::zero(int ambient) {
  return {Mat::Zero(ambient, ambient), Vec::Zero(ambient), Eigen::MatrixXd(ambient, 0)};
}

MomentMap MomentMap::constant(Vec b) {
  const int n = static_cast<int>(b.size());
  return {Mat::Zero(n, n), std::move(b), Eigen::MatrixXd(n, 0)};
}

MomentMap MomentMap::scaled_position(int ambient, double s) {
  return {s * Mat::Identity(ambient, ambient), Vec::Zero(ambient), Eigen::MatrixXd(ambient, 0)};
}

MomentMap MomentMap::rotation(Vec axis, double rate) {
  if (axis.size() != 3) throw Error(ErrorKind::InvalidArgument, "rotation needs a 3-vector axis");
  Mat K(3, 3);
  K << 0, -axis(2), axis(1), axis(2), 0, -axis(0), -axis(1), axis(0), 0;
  return {rate * K, Vec::Zero(3), Eigen::MatrixXd(3, 0)};
}

MomentMap MomentMap::custom(int ambient, int moments, ValueFn value, JacFn du, JacFn dm) {
  if (!value || !du || !dm) throw Error(ErrorKind::InvalidArgument, "custom moment map needs value, du and dm");
  MomentMap g;
  g.ambient_ = ambient;
  g.moments_ = moments;
  g.A_ = Mat::Zero(ambient, ambient);
  g.b_ = Vec::Zero(ambient);
  g.C_ = Eigen::MatrixXd::Zero(ambient, moments);
  g.value_fn_ = std::make_shared<const ValueFn>(std::move(value));
  g.du_fn_ = std::make_shared<const JacFn>(std::move(du));
  g.dm_fn_ = std::make_shared<const JacFn>(std::move(dm));
  return g;
}

Vec MomentMap::value(const Vec& u, std::span<const double> m) const {
  if (value_fn_) return (*value_fn_)(u, m);
  Vec out = A_ * u + b_;
  for (int j = 0; j < moments_; ++j) out += C_.col(j) * phi(transform_, m[j]);
  return out;
}

Mat MomentMap::du(const Vec& u, std::span<const double> m) const {
  if (du_fn_) return (*du_fn_)(u, m);
  return A_;
}

Eigen::MatrixXd MomentMap::dm(const Vec& u, std::span<const double> m) const {
  if (dm_fn_) return (*dm_fn_)(u, m);
  Eigen::MatrixXd out = C_;
  for (int j = 0; j < moments_; ++j) out.col(j) *= dphi(transform_, m[j]);
  return out;
}

std::optional<double> MomentMap::dm_bound() const {
  if (dm_fn_) return std::nullopt;
  if (moments_ == 0) return 0.0;
  // |phi'| <= 1 for every built-in transform.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(C_);
  return svd.singularValues()(0);
}

// --------------------------------------------------------------- SmoothKernel

SmoothKernel SmoothKernel::alignment(double kappa) {
  require_finite_param(kappa, "kappa");
  SmoothKernel k;
  k.kind_ = Kind::Alignment;
  k.name_ = "alignment";
  k.kappa_ = kappa;
  return k;
}

SmoothKernel SmoothKernel::gaussian_chordal(double kappa, double sigma) {
  require_finite_param(kappa, "kappa");
  if (!(sigma > 0)) throw Error(ErrorKind::InvalidArgument, "gaussian kernel sigma must be positive");
  SmoothKernel k;
  k.kind_ = Kind::GaussianChordal;
  k.name_ = "gaussian_chordal";
  k.kappa_ = kappa;
  k.sigma_ = sigma;
  return k;
}

SmoothKernel SmoothKernel::custom(ValueFn value, GradFn grad_u, MatFn mixed, MatFn hess_uu,
                                  std::string name) {
  if (!value || !grad_u || !mixed) {
    throw Error(ErrorKind::InvalidArgument, "custom kernel needs value, grad_u and mixed derivative");
  }
  SmoothKernel k;
  k.kind_ = Kind::Custom;
  k.name_ = std::move(name);
  k.value_fn_ = std::make_shared<const ValueFn>(std::move(value));
  k.grad_fn_ = std::make_shared<const GradFn>(std::move(grad_u));
  k.mixed_fn_ = std::make_shared<const MatFn>(std::move(mixed));
  if (hess_uu) k.hess_fn_ = std::make_shared<const MatFn>(std::move(hess_uu));
  return k;
}

double SmoothKernel::value(const Vec& u, const Vec& x) const {
  switch (kind_) {
    case Kind::Alignment: return kappa_ * u.dot(x);
    case Kind::GaussianChordal: return kappa_ * std::exp(-(u - x).squaredNorm() / (2 * sigma_ * sigma_));
    case Kind::Custom: return (*value_fn_)(u, x);
  }
  return 0.0;
}

Vec SmoothKernel::grad_u(const Vec& u, const Vec& x) const {
  switch (kind_) {
    case Kind::Alignment: return kappa_ * x;
    case Kind::GaussianChordal: return -value(u, x) / (sigma_ * sigma_) * (u - x);
    case Kind::Custom: return (*grad_fn_)(u, x);
  }
  return Vec::Zero(u.size());
}

Mat SmoothKernel::hess_uu(const Vec& u, const Vec& x) const {
  const auto n = u.size();
  switch (kind_) {
    case Kind::Alignment: return Mat::Zero(n, n);
    case Kind::GaussianChordal: {
      const double s2 = sigma_ * sigma_;
      const double v = value(u, x);
      const Vec d = u - x;
      return v / (s2 * s2) * d * d.transpose() - v / s2 * Mat::Identity(n, n);
    }
    case Kind::Custom: {
      if (hess_fn_) return (*hess_fn_)(u, x);
      Mat h(n, n);
      const double step = 1e-5;
      for (int j = 0; j < n; ++j) {
        Vec up = u, um = u;
        up(j) += step;
        um(j) -= step;
        h.col(j) = ((*grad_fn_)(up, x) - (*grad_fn_)(um, x)) / (2 * step);
      }
      return h;
    }
  }
  return Mat::Zero(n, n);
}

Mat SmoothKernel::mixed(const Vec& u, const Vec& x) const {
  const auto n = u.size();
  switch (kind_) {
    case Kind::Alignment: return kappa_ * Mat::Identity(n, n);
    case Kind::GaussianChordal: return -hess_uu(u, x);
    case Kind::Custom: return (*mixed_fn_)(u, x);
  }
  return Mat::Zero(n, n);
}

std::optional<double> SmoothKernel::mixed_bound() const {
  switch (kind_) {
    case Kind::Alignment: return std::abs(kappa_);
    case Kind::GaussianChordal:
      // |v/s^2 (I - d d^T/s^2)| <= |kappa|/s^2 max(1, |(r^2/s^2 - 1)| e^{-r^2/2s^2}) = |kappa|/s^2.
      return std::abs(kappa_) / (sigma_ * sigma_);
    case Kind::Custom: return std::nullopt;
  }
  return std::nullopt;
}

// ----------------------------------------------------------- InteractionField

InteractionField InteractionField::kernel(Manifold manifold, SmoothKernel kernel, int order) {
  if (order < 1) throw Error(ErrorKind::InvalidArgument, "kernel order must be at least 1");
  InteractionField f(std::move(manifold));
  f.family_ = Family::Kernel;
  f.order_ = order;
  f.label_ = kernel.name();
  f.kernel_ = std::make_shared<const SmoothKernel>(std::move(kernel));
  return f;
}

InteractionField InteractionField::moment(Manifold manifold, MomentMap map,
                                          std::vector<ScalarField> observables) {
  if (map.ambient_dim() != manifold.ambient_dim()) {
    throw Error(ErrorKind::ManifoldMismatch, "moment map dimension does not match the manifold");
  }
  if (static_cast<int>(observables.size()) != map.moment_count()) {
    throw Error(ErrorKind::InvalidArgument, "moment map expects " + std::to_string(map.moment_count()) +
                                                " observables, got " + std::to_string(observables.size()));
  }
  for (const auto& f : observables) f.validate(manifold);
  InteractionField f(std::move(manifold));
  f.family_ = Family::Moment;
  f.label_ = "moment";
  f.map_ = std::make_shared<const MomentMap>(std::move(map));
  f.observables_ = std::move(observables);
  return f;
}

InteractionField InteractionField::zero(Manifold manifold) {
  const int n = manifold.ambient_dim();
  return moment(std::move(manifold), MomentMap::zero(n)).with_label("zero");
}

InteractionField InteractionField::with_label(std::string label) const {
  InteractionField copy = *this;
  copy.label_ = std::move(label);
  return copy;
}

bool InteractionField::measure_free() const {
  return family_ == Family::Moment && map_->moment_count() == 0;
}

bool InteractionField::has_intrinsic_derivative() const {
  return family_ == Family::Moment || order_ == 1;
}

BoundField InteractionField::bind(const EmpiricalMeasure& mu) const {
  require_same_manifold(manifold_, mu.manifold(), "field and measure");
  return BoundField(*this, mu.points(), mu.weights());
}

BoundField InteractionField::bind_points(std::span<const Point> points,
                                         std::span<const double> weights) const {
  return BoundField(*this, points, weights);
}

Tangent InteractionField::evaluate(const Point& u, const EmpiricalMeasure& mu) const {
  return bind(mu).value(u);
}

Mat InteractionField::spatial_jacobian(const Point& u, const EmpiricalMeasure& mu) const {
  return bind(mu).jacobian(u);
}

Mat InteractionField::intrinsic_derivative(const Point& u, const EmpiricalMeasure& mu,
                                           const Point& x) const {
  return bind(mu).intrinsic(u, x);
}

std::optional<double> InteractionField::measure_lipschitz_bound() const {
  if (family_ == Family::Moment) {
    const auto gb = map_->dm_bound();
    if (!gb) return std::nullopt;
    if (*gb == 0.0) return 0.0;
    double s = 0.0;
    for (const auto& f : observables_) {
      const auto l = f.lipschitz_bound(manifold_);
      if (!l) return std::nullopt;
      s += *l * *l;
    }
    return *gb * std::sqrt(s);
  }
  const auto m = kernel_->mixed_bound();
  if (!m) return std::nullopt;
  if (order_ == 1) return *m;
  // V = k G S^{k-1}; needs sup |phi| and sup |grad_u phi| as well.
  double sup_phi = 0.0, sup_grad = 0.0;
  if (kernel_->kind() == SmoothKernel::Kind::GaussianChordal) {
    sup_phi = std::abs(kernel_->kappa());
    sup_grad = std::abs(kernel_->kappa()) / kernel_->sigma() * std::exp(-0.5);
  } else {
    const auto r = ambient_radius(manifold_);
    if (!r) return std::nullopt;
    sup_phi = std::abs(kernel_->kappa()) * *r * *r;
    sup_grad = std::abs(kernel_->kappa()) * *r;
  }
  const int k = order_;
  return k * (*m * std::pow(sup_phi, k - 1) + (k - 1) * sup_grad * sup_grad * std::pow(sup_phi, k - 2));
}

void InteractionField::self_check(CounterRng& rng, double rel_tol, int trials) const {
  const double h = 1e-5;
  // Second derivatives are differenced from first derivatives, whose own
  // roundoff is amplified by 1/h; the looser bound keeps the check honest
  // without flagging correct closed forms.
  const double tol2 = std::max(rel_tol, 1e-5);
  const auto fail = [&](const std::string& what) {
    throw Error(ErrorKind::ConfigInvalid, "derivative self-check failed for " + label_ + ": " + what);
  };
  const auto pts = manifold_.sample_uniform(static_cast<std::size_t>(2 * trials), rng);
  const int n = manifold_.ambient_dim();
  for (int t = 0; t < trials; ++t) {
    const Vec& u = pts[2 * t];
    const Vec& x = pts[2 * t + 1];
    if (family_ == Family::Kernel) {
      const SmoothKernel& k = *kernel_;
      Vec g(n);
      Mat hu(n, n), hx(n, n);
      for (int j = 0; j < n; ++j) {
        Vec up = u, um = u, xp = x, xm = x;
        up(j) += h;
        um(j) -= h;
        xp(j) += h;
        xm(j) -= h;
        g(j) = (k.value(up, x) - k.value(um, x)) / (2 * h);
        hu.col(j) = (k.grad_u(up, x) - k.grad_u(um, x)) / (2 * h);
        hx.col(j) = (k.grad_u(u, xp) - k.grad_u(u, xm)) / (2 * h);
      }
      if (!close_mat(g, k.grad_u(u, x), rel_tol)) fail("grad_u");
      if (!close_mat(hu, k.hess_uu(u, x), tol2)) fail("hess_uu");
      if (!close_mat(hx, k.mixed(u, x), tol2)) fail("mixed derivative");
    } else {
      for (const auto& f : observables_) {
        Vec g(n);
        Mat hs(n, n);
        for (int j = 0; j < n; ++j) {
          Vec up = u, um = u;
          up(j) += h;
          um(j) -= h;
          g(j) = (f.value(up) - f.value(um)) / (2 * h);
          hs.col(j) = (f.gradient(up) - f.gradient(um)) / (2 * h);
        }
        if (!close_mat(g, f.gradient(u), rel_tol)) fail("gradient of " + f.name());
        if (!close_mat(hs, f.hessian(u), tol2)) fail("hessian of " + f.name());
      }
      const MomentMap& g = *map_;
      std::vector<double> m(static_cast<std::size_t>(g.moment_count()));
      for (auto& v : m) v = rng.normal();
      Mat du(n, n);
      for (int j = 0; j < n; ++j) {
        Vec up = u, um = u;
        up(j) += h;
        um(j) -= h;
        du.col(j) = (g.value(up, m) - g.value(um, m)) / (2 * h);
      }
      if (!close_mat(du, g.du(u, m), rel_tol)) fail("d/du of g");
      Eigen::MatrixXd dm(n, g.moment_count());
      for (int j = 0; j < g.moment_count(); ++j) {
        auto mp = m, mm = m;
        mp[j] += h;
        mm[j] -= h;
        dm.col(j) = (g.value(u, mp) - g.value(u, mm)) / (2 * h);
      }
      if (!close_mat(dm, g.dm(u, m), rel_tol)) fail("d/dm of g");
    }
  }
}

// ----------------------------------------------------------------- BoundField

BoundField::BoundField(const InteractionField& field, std::span<const Point> points,
                       std::span<const double> weights)
    : field_(field) {
  const int n = field.manifold().ambient_dim();
  if (points.size() != weights.size()) throw Error(ErrorKind::InvalidArgument, "points/weights size mismatch");
  if (field.family_ == InteractionField::Family::Kernel) {
    if (field.kernel_->kind() == SmoothKernel::Kind::Alignment) {
      mean_ = Vec::Zero(n);
      for (std::size_t r = 0; r < points.size(); ++r) mean_ += weights[r] * points[r];
    }
    points_.assign(points.begin(), points.end());
    weights_.assign(weights.begin(), weights.end());
    return;
  }
  const MomentMap& g = *field.map_;
  const int m = g.moment_count();
  if (m == 0) {
    moments_.clear();
  } else {
    points_.assign(points.begin(), points.end());
    weights_.assign(weights.begin(), weights.end());
    moments_.assign(static_cast<std::size_t>(m), 0.0);
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < points.size(); ++r) s += weights[r] * field.observables_[j].value(points[r]);
      moments_[j] = s;
    }
  }
  if (!g.is_custom()) {
    offset_ = g.b();
    for (int j = 0; j < m; ++j) offset_ += g.C().col(j) * phi(g.transform(), moments_[j]);
    dm_ = g.dm(Vec::Zero(n), moments_);
  }
}

Vec BoundField::ambient(const Vec& u) const {
  const InteractionField& f = field_;
  if (f.family_ == InteractionField::Family::Moment) {
    const MomentMap& g = *f.map_;
    if (g.is_custom()) return g.value(u, moments_);
    return g.A() * u + offset_;
  }
  const SmoothKernel& k = *f.kernel_;
  const int order = f.order_;
  if (k.kind() == SmoothKernel::Kind::Alignment) {
    const Vec G = k.kappa() * mean_;
    if (order == 1) return G;
    const double S = k.kappa() * u.dot(mean_);
    return order * std::pow(S, order - 1) * G;
  }
  Vec G = Vec::Zero(u.size());
  double S = 0.0;
  for (std::size_t r = 0; r < points_.size(); ++r) {
    G += weights_[r] * k.grad_u(u, points_[r]);
    if (order > 1) S += weights_[r] * k.value(u, points_[r]);
  }
  if (order == 1) return G;
  return order * std::pow(S, order - 1) * G;
}

Tangent BoundField::value(const Vec& u) const {
  return field_.manifold().project_to_tangent(u, ambient(u));
}

Mat BoundField::jacobian(const Vec& u) const {
  const InteractionField& f = field_;
  const Manifold& M = f.manifold();
  const int n = M.ambient_dim();
  Mat D(n, n);
  Vec amb;
  if (f.family_ == InteractionField::Family::Moment) {
    const MomentMap& g = *f.map_;
    D = g.du(u, moments_);
    amb = g.is_custom() ? g.value(u, moments_) : Vec(g.A() * u + offset_);
  } else {
    const SmoothKernel& k = *f.kernel_;
    const int order = f.order_;
    Vec G = Vec::Zero(n);
    Mat H = Mat::Zero(n, n);
    double S = 0.0;
    if (k.kind() == SmoothKernel::Kind::Alignment) {
      G = k.kappa() * mean_;
      S = k.kappa() * u.dot(mean_);
    } else {
      for (std::size_t r = 0; r < points_.size(); ++r) {
        G += weights_[r] * k.grad_u(u, points_[r]);
        H += weights_[r] * k.hess_uu(u, points_[r]);
        if (order > 1) S += weights_[r] * k.value(u, points_[r]);
      }
    }
    if (order == 1) {
      D = H;
      amb = G;
    } else {
      D = order * (std::pow(S, order - 1) * H + (order - 1) * std::pow(S, order - 2) * G * G.transpose());
      amb = order * std::pow(S, order - 1) * G;
    }
  }
  return M.tangent_projector(u) * D + M.projector_derivative(u, amb);
}

Mat BoundField::intrinsic(const Vec& u, const Vec& x) const {
  const InteractionField& f = field_;
  const Manifold& M = f.manifold();
  const int n = M.ambient_dim();
  if (!f.has_intrinsic_derivative()) {
    throw Error(ErrorKind::UnsupportedOrder, "no closed-form intrinsic derivative for kernel order " +
                                                 std::to_string(f.order_));
  }
  if (f.family_ == InteractionField::Family::Kernel) {
    return M.tangent_projector(u) * f.kernel_->mixed(u, x);
  }
  const int m = f.map_->moment_count();
  if (m == 0) return Mat::Zero(n, n);
  const Eigen::MatrixXd dm = f.map_->is_custom() ? f.map_->dm(u, moments_) : dm_;
  Eigen::MatrixXd grads(m, n);
  for (int j = 0; j < m; ++j) grads.row(j) = f.observables_[j].gradient(x).transpose();
  return M.tangent_projector(u) * Mat(dm * grads);
}

MeanFieldSummary BoundField::summarize(std::span<const Eigen::MatrixXd> blocks) const {
  const InteractionField& f = field_;
  MeanFieldSummary s;
  if (blocks.empty()) return s;
  s.columns = static_cast<int>(blocks.front().cols());
  if (f.measure_free()) return s;
  if (!f.has_intrinsic_derivative()) {
    throw Error(ErrorKind::UnsupportedOrder, "linearized flows need a closed-form intrinsic derivative");
  }
  if (blocks.size() != points_.size()) {
    throw Error(ErrorKind::InvalidArgument, "mean-field blocks must match the bound support");
  }
  const int n = f.manifold().ambient_dim();
  if (f.family_ == InteractionField::Family::Kernel) {
    if (f.kernel_->kind() == SmoothKernel::Kind::Alignment) {
      s.reduced = Eigen::MatrixXd::Zero(n, s.columns);
      for (std::size_t r = 0; r < blocks.size(); ++r) s.reduced += weights_[r] * blocks[r];
    } else {
      s.blocks.assign(blocks.begin(), blocks.end());
    }
    return s;
  }
  const int m = f.map_->moment_count();
  s.reduced = Eigen::MatrixXd::Zero(m, s.columns);
  for (std::size_t r = 0; r < blocks.size(); ++r) {
    for (int j = 0; j < m; ++j) {
      s.reduced.row(j) += weights_[r] * (f.observables_[j].gradient(points_[r]).transpose() * blocks[r]);
    }
  }
  return s;
}

Eigen::MatrixXd BoundField::mean_field(const Vec& u, const MeanFieldSummary& s) const {
  const InteractionField& f = field_;
  const Manifold& M = f.manifold();
  const int n = M.ambient_dim();
  if (s.columns == 0 || f.measure_free()) return Eigen::MatrixXd::Zero(n, s.columns);
  const Mat P = M.tangent_projector(u);
  if (f.family_ == InteractionField::Family::Kernel) {
    if (f.kernel_->kind() == SmoothKernel::Kind::Alignment) {
      return f.kernel_->kappa() * (P * s.reduced);
    }
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, s.columns);
    for (std::size_t r = 0; r < points_.size(); ++r) {
      acc += weights_[r] * (f.kernel_->mixed(u, points_[r]) * s.blocks[r]);
    }
    return P * acc;
  }
  const Eigen::MatrixXd dm = f.map_->is_custom() ? f.map_->dm(u, moments_) : dm_;
  return P * (dm * s.reduced);
}

// -------------------------------------------------------------- Ito correction

Vec ito_correction(std::span<const BoundField> fields, const Point& u) {
  if (fields.empty()) return Vec::Zero(u.size());
  Vec c = Vec::Zero(u.size());
  for (const auto& f : fields) c += f.jacobian(u) * f.value(u);
  return 0.5 * c;
}

Vec ito_correction(std::span<const InteractionField> fields, const Point& u,
                   const EmpiricalMeasure& mu) {
  std::vector<BoundField> bound;
  bound.reserve(fields.size());
  for (const auto& f : fields) bound.push_back(f.bind(mu));
  return ito_correction(bound, u);
}

}  // namespace mvflow
