#pragma once

// Measure-dependent vector fields V(u, mu).
//
// Two families:
//   kernel fields  V(u,mu) = P_u  E_{x_1..x_k ~ mu} grad_u prod_j phi(u, x_j)
//   moment fields  V(u,mu) = P_u  g(u, <f_1,mu>, ..., <f_m,mu>)
// Every field is an ambient map composed with the tangent projector P_u, so
// the ambient formulas double as the smooth extension off the manifold.

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvflow/empirical_measure.hpp"
#include "mvflow/geometry.hpp"

namespace mvflow {

/// Smooth real function on the ambient space with closed-form gradient and
/// Hessian.
class ScalarField {
 public:
  enum class Kind { Constant, Linear, CoordinateSquare, GaussianBump, Custom };

  using ValueFn = std::function<double(const Vec&)>;
  using GradFn = std::function<Vec(const Vec&)>;
  using HessFn = std::function<Mat(const Vec&)>;

  static ScalarField constant(double c);
  /// <a, x> + offset.
  static ScalarField linear(Vec a, double offset = 0.0);
  static ScalarField coordinate(int dim, int index);
  /// x_index^2.
  static ScalarField coordinate_square(int index);
  /// amplitude * exp(-|x - center|^2 / (2 sigma^2)).
  static ScalarField gaussian_bump(Vec center, double sigma, double amplitude = 1.0);
  static ScalarField custom(ValueFn value, GradFn gradient, HessFn hessian,
                            std::string name = "custom");

  Kind kind() const { return kind_; }
  const std::string& name() const { return name_; }

  double value(const Vec& x) const;
  double operator()(const Vec& x) const { return value(x); }
  /// Ambient gradient. The manifold gradient is its tangent projection.
  Vec gradient(const Vec& x) const;
  Mat hessian(const Vec& x) const;

  /// Lipschitz constant w.r.t. the geodesic distance, when a closed form is
  /// known on this manifold.
  std::optional<double> lipschitz_bound(const Manifold& manifold) const;
  /// Throws ManifoldMismatch when parameters do not fit the ambient space.
  void validate(const Manifold& manifold) const;

 private:
  Kind kind_ = Kind::Constant;
  std::string name_;
  double c_ = 0.0;
  double sigma_ = 1.0;
  int index_ = 0;
  Vec a_;
  std::shared_ptr<const ValueFn> value_fn_;
  std::shared_ptr<const GradFn> grad_fn_;
  std::shared_ptr<const HessFn> hess_fn_;
};

/// g(u, m) = A u + b + C phi(m), phi applied elementwise.
class MomentMap {
 public:
  enum class Transform { Identity, Tanh, Sin };

  using ValueFn = std::function<Vec(const Vec&, std::span<const double>)>;
  using JacFn = std::function<Eigen::MatrixXd(const Vec&, std::span<const double>)>;

  MomentMap(Mat A, Vec b, Eigen::MatrixXd C, Transform transform = Transform::Identity);
  static MomentMap zero(int ambient);
  static MomentMap constant(Vec b);
  /// s * u.
  static MomentMap scaled_position(int ambient, double s);
  /// rate * (axis x u); requires ambient dimension 3.
  static MomentMap rotation(Vec axis, double rate);
  /// Closed-form user map: value, d/du (N x N), d/dm (N x m).
  static MomentMap custom(int ambient, int moments, ValueFn value, JacFn du, JacFn dm);

  int ambient_dim() const { return ambient_; }
  int moment_count() const { return moments_; }
  bool is_custom() const { return static_cast<bool>(value_fn_); }
  Transform transform() const { return transform_; }
  const Mat& A() const { return A_; }
  const Vec& b() const { return b_; }
  const Eigen::MatrixXd& C() const { return C_; }

  Vec value(const Vec& u, std::span<const double> m) const;
  Mat du(const Vec& u, std::span<const double> m) const;
  Eigen::MatrixXd dm(const Vec& u, std::span<const double> m) const;
  /// sup over m of the operator norm of dm, if finite and known.
  std::optional<double> dm_bound() const;

 private:
  MomentMap() = default;

  int ambient_ = 0;
  int moments_ = 0;
  Mat A_;
  Vec b_;
  Eigen::MatrixXd C_;
  Transform transform_ = Transform::Identity;
  std::shared_ptr<const ValueFn> value_fn_;
  std::shared_ptr<const JacFn> du_fn_;
  std::shared_ptr<const JacFn> dm_fn_;
};

/// Pair potential phi(u, x) with closed-form derivatives in u and the mixed
/// derivative in (x, u).
class SmoothKernel {
 public:
  enum class Kind { Alignment, GaussianChordal, Custom };

  using ValueFn = std::function<double(const Vec&, const Vec&)>;
  using GradFn = std::function<Vec(const Vec&, const Vec&)>;
  using MatFn = std::function<Mat(const Vec&, const Vec&)>;

  /// kappa <u, x>.
  static SmoothKernel alignment(double kappa);
  /// kappa exp(-|u - x|^2 / (2 sigma^2)).
  static SmoothKernel gaussian_chordal(double kappa, double sigma);
  /// User triple (phi, grad_u phi, d_x grad_u phi); the u-Hessian falls back
  /// to central differences of grad_u when not supplied.
  static SmoothKernel custom(ValueFn value, GradFn grad_u, MatFn mixed,
                             MatFn hess_uu = nullptr, std::string name = "custom");

  Kind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  double kappa() const { return kappa_; }
  double sigma() const { return sigma_; }

  double value(const Vec& u, const Vec& x) const;
  Vec grad_u(const Vec& u, const Vec& x) const;
  Mat hess_uu(const Vec& u, const Vec& x) const;
  /// Matrix K with K w = d/dx [grad_u phi(u, x)] w.
  Mat mixed(const Vec& u, const Vec& x) const;
  /// sup over (u, x) of |mixed| (operator norm), when known.
  std::optional<double> mixed_bound() const;

 private:
  Kind kind_ = Kind::Alignment;
  std::string name_;
  double kappa_ = 1.0;
  double sigma_ = 1.0;
  std::shared_ptr<const ValueFn> value_fn_;
  std::shared_ptr<const GradFn> grad_fn_;
  std::shared_ptr<const MatFn> mixed_fn_;
  std::shared_ptr<const MatFn> hess_fn_;
};

/// Per-support-point contraction used by the linearized (variational and
/// Malliavin) flows: holds whatever is needed to evaluate
///   sum_r w_r D_I V(u, mu)(x_r) Y_r
/// for blocks Y_r of tangent columns attached to the support points.
struct MeanFieldSummary {
  int columns = 0;
  /// Alignment kernels: sum_r w_r Y_r.  Moment fields: sum_r w_r grad F(x_r) Y_r
  /// (rows = observables).
  Eigen::MatrixXd reduced;
  /// Generic kernels keep the blocks.
  std::vector<Eigen::MatrixXd> blocks;
};

class BoundField;

class InteractionField {
 public:
  static InteractionField kernel(Manifold manifold, SmoothKernel kernel, int order = 1);
  static InteractionField moment(Manifold manifold, MomentMap map,
                                 std::vector<ScalarField> observables = {});
  static InteractionField zero(Manifold manifold);

  enum class Family { Kernel, Moment };

  const Manifold& manifold() const { return manifold_; }
  Family family() const { return family_; }
  int order() const { return order_; }
  const SmoothKernel& kernel() const { return *kernel_; }
  const MomentMap& map() const { return *map_; }
  const std::vector<ScalarField>& observables() const { return observables_; }
  const std::string& label() const { return label_; }
  InteractionField with_label(std::string label) const;

  /// True when V(u, mu) does not depend on mu.
  bool measure_free() const;
  /// True when D_I V has a closed form (kernel order 1 or moment field).
  bool has_intrinsic_derivative() const;

  /// Freezes the field at a measure. `bind_points` skips validation and is
  /// meant for the solver inner loop.
  BoundField bind(const EmpiricalMeasure& mu) const;
  BoundField bind_points(std::span<const Point> points, std::span<const double> weights) const;

  /// V(u, mu), tangent at u.
  Tangent evaluate(const Point& u, const EmpiricalMeasure& mu) const;
  /// Ambient derivative of the tangent field along tangent directions at u.
  /// Its tangent part is the covariant derivative; the normal part is the
  /// second-fundamental-form term produced by differentiating P_u.
  Mat spatial_jacobian(const Point& u, const EmpiricalMeasure& mu) const;
  /// D_I V(u, mu)(x) as a map T_xM -> T_uM (ambient N x N matrix).
  Mat intrinsic_derivative(const Point& u, const EmpiricalMeasure& mu, const Point& x) const;

  /// L with |V(u,mu) - V(u,nu)| <= L W2(mu, nu), from closed-form bounds.
  std::optional<double> measure_lipschitz_bound() const;

  /// Finite-difference check of every supplied derivative at random points;
  /// throws ConfigInvalid on mismatch.
  void self_check(CounterRng& rng, double rel_tol = 1e-6, int trials = 8) const;

 private:
  InteractionField(Manifold manifold) : manifold_(std::move(manifold)) {}

  Manifold manifold_;
  Family family_ = Family::Moment;
  int order_ = 1;
  std::shared_ptr<const SmoothKernel> kernel_;
  std::shared_ptr<const MomentMap> map_;
  std::vector<ScalarField> observables_;
  std::string label_;

  friend class BoundField;
};

/// A field frozen at one measure; cheap to evaluate repeatedly.
class BoundField {
 public:
  BoundField(const InteractionField& field, std::span<const Point> points,
             std::span<const double> weights);

  const InteractionField& field() const { return field_; }
  bool measure_free() const { return field_.measure_free(); }

  /// Ambient (unprojected) value of the extension.
  Vec ambient(const Vec& u) const;
  /// P_u applied to the ambient value.
  Tangent value(const Vec& u) const;
  /// Ambient derivative of u -> P_u ambient(u); apply to tangent vectors.
  Mat jacobian(const Vec& u) const;
  /// D_I V(u, mu)(x) : T_xM -> T_uM.
  Mat intrinsic(const Vec& u, const Vec& x) const;

  /// Prepares sum_r w_r D_I V(., mu)(x_r) Y_r for blocks attached to the bound
  /// support (same order as the points the field was bound to).
  MeanFieldSummary summarize(std::span<const Eigen::MatrixXd> blocks) const;
  /// Evaluates the summary at u (N x columns).
  Eigen::MatrixXd mean_field(const Vec& u, const MeanFieldSummary& summary) const;

  std::span<const double> moments() const { return moments_; }

 private:
  InteractionField field_;
  std::vector<Point> points_;
  std::vector<double> weights_;
  // Kernel fields.
  Vec mean_;  // alignment fast path
  // Moment fields.
  std::vector<double> moments_;
  Vec offset_;               // b + C phi(m) for built-in maps
  Eigen::MatrixXd dm_;       // d/dm g, constant in u for built-in maps
};

/// Ito drift correction 1/2 sum_i D V_i [V_i] at (u, mu), in ambient
/// coordinates (tangent part plus the normal curvature part).
Vec ito_correction(std::span<const InteractionField> fields, const Point& u,
                   const EmpiricalMeasure& mu);
Vec ito_correction(std::span<const BoundField> fields, const Point& u);

}  // namespace mvflow
