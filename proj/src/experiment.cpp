#include "mvflow/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mvflow/chaos_expansion.hpp"
#include "mvflow/error.hpp"
#include "mvflow/parallel.hpp"

namespace mvflow {

using nlohmann::json;
namespace fs = std::filesystem;

// ------------------------------------------------------------------ schema

namespace {

[[noreturn]] void invalid(const std::string& path, const std::string& what) {
  throw Error(ErrorKind::ConfigInvalid, (path.empty() ? std::string("/") : path) + ": " + what);
}

// One JSON object under validation. Every key read is marked; defaults are
// written into the object so it ends up as the resolved config.
class Obj {
 public:
  Obj(json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) invalid(path_, "expected an object");
  }

  const std::string& path() const { return path_; }
  std::string sub(const std::string& key) const { return path_ + "/" + key; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_[key].is_null(); }

  json& required(const std::string& key) {
    used_.insert(key);
    if (!has(key)) invalid(sub(key), "required");
    return j_[key];
  }
  json& get(const std::string& key, json fallback) {
    used_.insert(key);
    if (!j_.contains(key)) j_[key] = std::move(fallback);
    return j_[key];
  }
  // Optional keys without a default stay absent (or null).
  json* optional(const std::string& key) {
    used_.insert(key);
    return has(key) ? &j_[key] : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) invalid(sub(item.key()), "unknown key");
    }
  }

 private:
  json& j_;
  std::string path_;
  std::set<std::string> used_;
};

double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) invalid(path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) invalid(path, "expected a finite number");
  return v;
}
double as_positive(const json& j, const std::string& path) {
  const double v = as_number(j, path);
  if (v <= 0) invalid(path, "expected a positive number");
  return v;
}
std::int64_t as_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) invalid(path, "expected an integer");
  return j.get<std::int64_t>();
}
std::size_t as_count(const json& j, const std::string& path, std::size_t min = 1) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    invalid(path, "expected a non-negative integer");
  }
  const auto v = j.get<std::uint64_t>();
  if (v < min) invalid(path, "must be at least " + std::to_string(min));
  return static_cast<std::size_t>(v);
}
std::uint64_t as_u64(const json& j, const std::string& path) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    invalid(path, "expected a non-negative integer");
  }
  return j.get<std::uint64_t>();
}
bool as_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) invalid(path, "expected true or false");
  return j.get<bool>();
}
std::string as_string(const json& j, const std::string& path) {
  if (!j.is_string()) invalid(path, "expected a string");
  return j.get<std::string>();
}
std::vector<double> as_numbers(const json& j, const std::string& path) {
  if (!j.is_array()) invalid(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t k = 0; k < j.size(); ++k) out.push_back(as_number(j[k], path + "/" + std::to_string(k)));
  return out;
}
Vec as_vec(const json& j, const std::string& path, int size) {
  const auto v = as_numbers(j, path);
  if (size >= 0 && static_cast<int>(v.size()) != size) {
    invalid(path, "expected " + std::to_string(size) + " entries");
  }
  if (v.empty() || v.size() > static_cast<std::size_t>(kMaxAmbient)) invalid(path, "bad vector length");
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t k = 0; k < v.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[k];
  return out;
}
Eigen::MatrixXd as_matrix(const json& j, const std::string& path, int rows, int cols) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows) {
    invalid(path, "expected " + std::to_string(rows) + " rows");
  }
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const auto row = as_numbers(j[static_cast<std::size_t>(r)], path + "/" + std::to_string(r));
    if (static_cast<int>(row.size()) != cols) invalid(path + "/" + std::to_string(r), "expected " + std::to_string(cols) + " columns");
    for (int c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}
std::string one_of(const json& j, const std::string& path, std::initializer_list<const char*> options) {
  const std::string s = as_string(j, path);
  std::string list;
  for (const char* o : options) {
    if (s == o) return s;
    list += list.empty() ? o : std::string(", ") + o;
  }
  invalid(path, "expected one of " + list);
}

// Library errors raised while building objects from a valid-looking config
// (points off the manifold, shape mismatches) are config errors too.
template <class F>
auto guarded(const std::string& path, F&& build) {
  try {
    return build();
  } catch (const Error& e) {
    const std::string what = e.what();
    if (e.kind() == ErrorKind::ConfigInvalid && what.starts_with("/")) throw;
    invalid(path, what);
  }
}

ScalarField parse_scalar(json& j, const std::string& path, const Manifold& m) {
  Obj o(j, path);
  const std::string type = one_of(o.required("type"), o.sub("type"),
                                  {"constant", "linear", "coordinate", "coordinate_square", "gaussian_bump"});
  Obj p(o.get("params", json::object()), o.sub("params"));
  const int a = m.ambient_dim();
  ScalarField f = ScalarField::constant(0.0);
  if (type == "constant") {
    f = ScalarField::constant(as_number(p.get("c", 0.0), p.sub("c")));
  } else if (type == "linear") {
    const Vec coef = as_vec(p.required("a"), p.sub("a"), a);
    f = ScalarField::linear(coef, as_number(p.get("offset", 0.0), p.sub("offset")));
  } else if (type == "coordinate" || type == "coordinate_square") {
    const auto index = as_int(p.required("index"), p.sub("index"));
    if (index < 0 || index >= a) invalid(p.sub("index"), "coordinate index out of range");
    f = type == "coordinate" ? ScalarField::coordinate(a, static_cast<int>(index))
                             : ScalarField::coordinate_square(static_cast<int>(index));
  } else {
    const Vec center = as_vec(p.required("center"), p.sub("center"), a);
    const double sigma = as_positive(p.get("sigma", 1.0), p.sub("sigma"));
    const double amplitude = as_number(p.get("amplitude", 1.0), p.sub("amplitude"));
    f = ScalarField::gaussian_bump(center, sigma, amplitude);
  }
  p.finish();
  o.finish();
  return f;
}

SmoothKernel parse_kernel(json& j, const std::string& path) {
  Obj o(j, path);
  const std::string type = one_of(o.required("type"), o.sub("type"), {"alignment", "gaussian_chordal"});
  Obj p(o.get("params", json::object()), o.sub("params"));
  const double kappa = as_number(p.get("kappa", 1.0), p.sub("kappa"));
  std::optional<SmoothKernel> k;
  if (type == "alignment") {
    k = SmoothKernel::alignment(kappa);
  } else {
    k = SmoothKernel::gaussian_chordal(kappa, as_positive(p.get("sigma", 1.0), p.sub("sigma")));
  }
  p.finish();
  o.finish();
  return *k;
}

MomentMap parse_moment_map(json& j, const std::string& path, const Manifold& m, int moments) {
  Obj o(j, path);
  const std::string type =
      one_of(o.required("type"), o.sub("type"), {"zero", "constant", "scaled_position", "rotation", "affine"});
  Obj p(o.get("params", json::object()), o.sub("params"));
  const int a = m.ambient_dim();
  std::optional<MomentMap> g;
  if (type != "affine" && moments > 0) invalid(o.sub("type"), "observables need an affine moment map");
  if (type == "zero") {
    g = MomentMap::zero(a);
  } else if (type == "constant") {
    g = MomentMap::constant(as_vec(p.required("b"), p.sub("b"), a));
  } else if (type == "scaled_position") {
    g = MomentMap::scaled_position(a, as_number(p.required("s"), p.sub("s")));
  } else if (type == "rotation") {
    if (a != 3) invalid(o.sub("type"), "rotation needs a 3-dimensional ambient space");
    const Vec axis = as_vec(p.required("axis"), p.sub("axis"), 3);
    g = guarded(p.sub("axis"), [&] { return MomentMap::rotation(axis, as_number(p.get("rate", 1.0), p.sub("rate"))); });
  } else {
    json zeros_a = json::array(), zeros_c = json::array();
    for (int r = 0; r < a; ++r) {
      zeros_a.push_back(std::vector<double>(static_cast<std::size_t>(a), 0.0));
      zeros_c.push_back(std::vector<double>(static_cast<std::size_t>(moments), 0.0));
    }
    const Eigen::MatrixXd A = as_matrix(p.get("A", zeros_a), p.sub("A"), a, a);
    const Vec b = as_vec(p.get("b", std::vector<double>(static_cast<std::size_t>(a), 0.0)), p.sub("b"), a);
    const Eigen::MatrixXd C = as_matrix(p.get("C", zeros_c), p.sub("C"), a, moments);
    const std::string t = one_of(p.get("transform", "identity"), p.sub("transform"), {"identity", "tanh", "sin"});
    const auto transform = t == "identity" ? MomentMap::Transform::Identity
                           : t == "tanh"   ? MomentMap::Transform::Tanh
                                           : MomentMap::Transform::Sin;
    g = guarded(path, [&] { return MomentMap(Mat(A), b, C, transform); });
  }
  p.finish();
  o.finish();
  return *g;
}

InteractionField parse_field(json& j, const std::string& path, const Manifold& m) {
  Obj o(j, path);
  const std::string cls = one_of(o.required("class"), o.sub("class"), {"zero", "kernel", "moment"});
  const std::string label = as_string(o.get("label", ""), o.sub("label"));
  std::optional<InteractionField> field;
  if (cls == "zero") {
    field = InteractionField::zero(m);
  } else if (cls == "kernel") {
    const SmoothKernel k = parse_kernel(o.required("kernel"), o.sub("kernel"));
    const auto order = as_int(o.get("order", 1), o.sub("order"));
    if (order < 1) invalid(o.sub("order"), "kernel order must be at least 1");
    field = guarded(path, [&] { return InteractionField::kernel(m, k, static_cast<int>(order)); });
  } else {
    json& fs = o.get("f", json::array());
    if (!fs.is_array()) invalid(o.sub("f"), "expected an array of observables");
    std::vector<ScalarField> observables;
    for (std::size_t k = 0; k < fs.size(); ++k) observables.push_back(parse_scalar(fs[k], o.sub("f") + "/" + std::to_string(k), m));
    const MomentMap g = parse_moment_map(o.required("g"), o.sub("g"), m, static_cast<int>(observables.size()));
    field = guarded(path, [&] { return InteractionField::moment(m, g, observables); });
  }
  o.finish();
  return label.empty() ? *field : field->with_label(label);
}

MeasureFunctional parse_measure_functional(Obj& o, const Manifold& m) {
  const std::string type = one_of(o.required("type"), o.sub("type"), {"linear", "composite", "pair"});
  if (type == "pair") return MeasureFunctional::pair(parse_kernel(o.required("kernel"), o.sub("kernel")));
  const ScalarField f = parse_scalar(o.required("f"), o.sub("f"), m);
  if (type == "linear") return MeasureFunctional::linear(f);
  const std::string c = one_of(o.required("curve"), o.sub("curve"), {"identity", "square", "exp", "sin", "tanh"});
  using C = MeasureFunctional::Curve;
  const C curve = c == "identity" ? C::Identity : c == "square" ? C::Square : c == "exp" ? C::Exp : c == "sin" ? C::Sin : C::Tanh;
  return MeasureFunctional::composite(curve, f);
}

std::vector<std::string> parse_suite_list(json& j, const std::string& path) {
  if (!j.is_array()) invalid(path, "expected an array of suite names");
  std::vector<std::string> out;
  for (std::size_t k = 0; k < j.size(); ++k) {
    const std::string p = path + "/" + std::to_string(k);
    const std::string s = as_string(j[k], p);
    if (std::find(known_suites().begin(), known_suites().end(), s) == known_suites().end()) {
      invalid(p, "unknown suite '" + s + "'");
    }
    out.push_back(s);
  }
  return out;
}

FunctionalSpec parse_functional(json& j, const std::string& path, const Manifold& m) {
  Obj o(j, path);
  FunctionalSpec spec;
  spec.f = parse_measure_functional(o, m);
  spec.name = as_string(o.get("name", spec.f.describe()), o.sub("name"));
  spec.suites = parse_suite_list(o.get("suites", json::array()), o.sub("suites"));
  Obj e(o.get("expect", json::object()), o.sub("expect"));
  auto opt = [&](const char* key) -> std::optional<double> {
    if (json* v = e.optional(key)) return as_number(*v, e.sub(key));
    return std::nullopt;
  };
  spec.expect_mean = opt("mean");
  spec.expect_kernel_order1 = opt("kernel_order1");
  spec.expect_kernel_order2 = opt("kernel_order2");
  spec.expect_first_order_share = opt("first_order_share");
  e.finish();
  o.finish();
  return spec;
}

EmpiricalMeasure parse_initial(json& j, const std::string& path, const Manifold& m) {
  Obj o(j, path);
  const bool explicit_points = o.has("points");
  const bool sampled = o.has("sampler");
  if (explicit_points == sampled) invalid(path, "give exactly one of 'points' or 'sampler'");
  std::optional<EmpiricalMeasure> mu;
  if (explicit_points) {
    json& pts = o.required("points");
    if (!pts.is_array() || pts.empty()) invalid(o.sub("points"), "expected a non-empty array of points");
    std::vector<Point> points;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      points.push_back(as_vec(pts[k], o.sub("points") + "/" + std::to_string(k), m.ambient_dim()));
    }
    if (json* w = o.optional("weights")) {
      const auto weights = as_numbers(*w, o.sub("weights"));
      mu = guarded(o.sub("weights"), [&] { return EmpiricalMeasure(m, points, weights); });
    } else {
      mu = guarded(o.sub("points"), [&] { return EmpiricalMeasure::uniform(m, points); });
    }
  } else {
    Obj s(o.required("sampler"), o.sub("sampler"));
    PointSampler sampler;
    const std::string type = one_of(s.required("type"), s.sub("type"), {"uniform", "projected_gaussian"});
    if (type == "projected_gaussian") {
      sampler.kind = PointSampler::Kind::ProjectedGaussian;
      sampler.center = as_vec(s.required("center"), s.sub("center"), m.ambient_dim());
      sampler.scale = as_positive(s.get("scale", 1.0), s.sub("scale"));
    }
    s.finish();
    const std::size_t n = as_count(o.required("n"), o.sub("n"));
    CounterRng rng(as_u64(o.get("seed", 0), o.sub("seed")));
    mu = guarded(path, [&] { return sample_iid(m, sampler, n, rng); });
  }
  o.finish();
  return *mu;
}

}  // namespace

const std::vector<std::string>& known_suites() {
  static const std::vector<std::string> names{"simulate",  "check-calculus", "kv-kernels", "kv-diagnostics",
                                              "stability", "convergence",    "picard"};
  return names;
}

bool FunctionalSpec::used_by(const std::string& suite) const {
  return suites.empty() || std::find(suites.begin(), suites.end(), suite) != suites.end();
}

std::string git_blob_sha1(const std::string& bytes) {
  const std::string blob = "blob " + std::to_string(bytes.size()) + std::string(1, '\0') + bytes;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error(ErrorKind::InvalidArgument, "SHA-1 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int k = 0; k < len; ++k) {
    std::snprintf(buf, sizeof buf, "%02x", digest[k]);
    hex += buf;
  }
  return hex;
}

ExperimentConfig parse_config(const json& input) {
  ExperimentConfig c;
  c.resolved = input;
  Obj top(c.resolved, "");

  c.id = as_string(top.required("id"), "/id");
  if (c.id.empty()) invalid("/id", "must not be empty");
  as_string(top.get("description", ""), "/description");
  c.manifold = guarded("/manifold", [&] { return Manifold::parse(as_string(top.required("manifold"), "/manifold")); });

  {
    Obj s(top.get("solver", json::object()), "/solver");
    const std::string scheme =
        one_of(s.get("scheme", "stratonovich_heun"), s.sub("scheme"), {"stratonovich_heun", "ito_euler_corrected"});
    c.solver.scheme = scheme == "stratonovich_heun" ? Scheme::StratonovichHeun : Scheme::ItoEulerCorrected;
    c.solver.dt = as_positive(s.get("dt", 0.01), s.sub("dt"));
    const auto stride = as_int(s.get("save_stride", 1), s.sub("save_stride"));
    if (stride < 1) invalid(s.sub("save_stride"), "must be at least 1");
    c.solver.save_stride = static_cast<int>(stride);
    c.solver.renormalize = as_bool(s.get("renormalize", true), s.sub("renormalize"));
    c.horizon = as_number(s.get("horizon", 1.0), s.sub("horizon"));
    if (c.horizon < 0) invalid(s.sub("horizon"), "must be non-negative");
    guarded(s.sub("horizon"), [&] { return grid_steps(c.horizon, c.solver.dt); });
    s.finish();
  }

  {
    Obj f(top.get("fields", json::object()), "/fields");
    c.fields.drift = parse_field(f.get("drift", json{{"class", "zero"}}), f.sub("drift"), c.manifold);
    json& diff = f.get("diffusion", json::array());
    if (!diff.is_array()) invalid(f.sub("diffusion"), "expected an array of fields");
    c.fields.diffusion.clear();
    for (std::size_t k = 0; k < diff.size(); ++k) {
      c.fields.diffusion.push_back(parse_field(diff[k], f.sub("diffusion") + "/" + std::to_string(k), c.manifold));
    }
    f.finish();
  }

  c.mu0 = parse_initial(top.required("initial_measure"), "/initial_measure", c.manifold);

  {
    json& fs = top.get("functionals", json::array());
    if (!fs.is_array()) invalid("/functionals", "expected an array");
    for (std::size_t k = 0; k < fs.size(); ++k) {
      c.functionals.push_back(parse_functional(fs[k], "/functionals/" + std::to_string(k), c.manifold));
    }
  }

  {
    Obj b(top.get("budgets", json::object()), "/budgets");
    Budgets& B = c.budgets;
    B.replicas = as_count(b.get("replicas", B.replicas), b.sub("replicas"), 2);
    B.outer = as_count(b.get("outer", B.outer), b.sub("outer"), 2);
    B.inner = as_count(b.get("inner", B.inner), b.sub("inner"));
    B.malliavin_replicas = as_count(b.get("malliavin_replicas", B.malliavin_replicas), b.sub("malliavin_replicas"), 2);
    B.eps = as_positive(b.get("eps", B.eps), b.sub("eps"));
    B.richardson = as_bool(b.get("richardson", B.richardson), b.sub("richardson"));
    B.nodes = static_cast<int>(as_count(b.get("nodes", B.nodes), b.sub("nodes"), 2));
    B.bins = static_cast<int>(as_count(b.get("bins", B.bins), b.sub("bins")));
    B.regression_degree = static_cast<int>(as_count(b.get("regression_degree", B.regression_degree), b.sub("regression_degree"), 0));
    if (B.regression_degree > 2) invalid(b.sub("regression_degree"), "at most 2");
    if (B.regression_degree + 1 > B.bins) invalid(b.sub("bins"), "need more bins than the regression degree");
    json& orders = b.get("orders", B.orders);
    if (!orders.is_array() || orders.empty()) invalid(b.sub("orders"), "expected a non-empty array");
    B.orders.clear();
    for (std::size_t k = 0; k < orders.size(); ++k) {
      const auto o = as_int(orders[k], b.sub("orders") + "/" + std::to_string(k));
      if (o != 1 && o != 2) invalid(b.sub("orders") + "/" + std::to_string(k), "chaos order must be 1 or 2");
      B.orders.push_back(static_cast<int>(o));
    }
    B.order2_bins = static_cast<int>(as_count(b.get("order2_bins", B.order2_bins), b.sub("order2_bins"), 2));
    B.diagnostic_times = as_numbers(b.get("diagnostic_times", std::vector<double>{c.horizon}), b.sub("diagnostic_times"));
    for (double t : B.diagnostic_times) {
      if (t <= 0) invalid(b.sub("diagnostic_times"), "times must be positive");
    }
    B.perturbations = as_numbers(b.get("perturbations", B.perturbations), b.sub("perturbations"));
    for (double d : B.perturbations) {
      if (d <= 0) invalid(b.sub("perturbations"), "perturbation sizes must be positive");
    }
    const double dt = c.solver.dt;
    B.dt_ladder = as_numbers(b.get("dt_ladder", std::vector<double>{4 * dt, 2 * dt, dt}), b.sub("dt_ladder"));
    if (B.dt_ladder.size() < 2) invalid(b.sub("dt_ladder"), "need at least two step sizes");
    for (std::size_t k = 0; k < B.dt_ladder.size(); ++k) {
      if (B.dt_ladder[k] <= 0 || (k > 0 && B.dt_ladder[k] >= B.dt_ladder[k - 1])) {
        invalid(b.sub("dt_ladder"), "step sizes must be positive and decreasing");
      }
      const double ratio = B.dt_ladder[k] / B.dt_ladder.back();
      if (std::abs(ratio - std::round(ratio)) > 1e-9 * ratio) {
        invalid(b.sub("dt_ladder"), "every step must be an integer multiple of the finest");
      }
      guarded(b.sub("dt_ladder"), [&] { return grid_steps(c.horizon, B.dt_ladder[k]); });
    }
    B.picard_iterations = static_cast<int>(as_count(b.get("picard_iterations", B.picard_iterations), b.sub("picard_iterations"), 2));
    B.calculus_configurations =
        static_cast<int>(as_count(b.get("calculus_configurations", B.calculus_configurations), b.sub("calculus_configurations")));
    B.eps_ladder = as_numbers(b.get("eps_ladder", B.eps_ladder), b.sub("eps_ladder"));
    if (B.eps_ladder.size() < 2) invalid(b.sub("eps_ladder"), "need at least two rungs");
    for (double e : B.eps_ladder) {
      if (e <= 0) invalid(b.sub("eps_ladder"), "rungs must be positive");
    }
    B.output_replicas = as_count(b.get("output_replicas", B.output_replicas), b.sub("output_replicas"), 0);
    B.checkpoint_stride = static_cast<int>(as_count(b.get("checkpoint_stride", B.checkpoint_stride), b.sub("checkpoint_stride"), 0));
    b.finish();
  }

  {
    Obj t(top.get("checks", json::object()), "/checks");
    Thresholds& T = c.checks;
    T.sigma = as_positive(t.get("sigma", T.sigma), t.sub("sigma"));
    T.first_order_share_min = as_number(t.get("first_order_share_min", T.first_order_share_min), t.sub("first_order_share_min"));
    if (json* at = t.optional("first_order_share_at")) T.first_order_share_at = as_positive(*at, t.sub("first_order_share_at"));
    T.share_tolerance = as_positive(t.get("share_tolerance", T.share_tolerance), t.sub("share_tolerance"));
    T.stability_factor = as_positive(t.get("stability_factor", T.stability_factor), t.sub("stability_factor"));
    T.picard_ratio = as_positive(t.get("picard_ratio", T.picard_ratio), t.sub("picard_ratio"));
    T.picard_direct_factor = as_positive(t.get("picard_direct_factor", T.picard_direct_factor), t.sub("picard_direct_factor"));
    T.halving_tolerance = as_positive(t.get("halving_tolerance", T.halving_tolerance), t.sub("halving_tolerance"));
    T.derivative_tolerance = as_positive(t.get("derivative_tolerance", T.derivative_tolerance), t.sub("derivative_tolerance"));
    T.slope_min = as_positive(t.get("slope_min", T.slope_min), t.sub("slope_min"));
    T.empirical_gradient_tolerance =
        as_positive(t.get("empirical_gradient_tolerance", T.empirical_gradient_tolerance), t.sub("empirical_gradient_tolerance"));
    T.manifold_tolerance = as_positive(t.get("manifold_tolerance", T.manifold_tolerance), t.sub("manifold_tolerance"));
    t.finish();
  }

  c.seed = as_u64(top.get("seed", 0), "/seed");
  c.out = as_string(top.get("out", "out/" + c.id), "/out");
  c.suites = parse_suite_list(top.get("suites", json::array()), "/suites");
  top.finish();

  json hashed = c.resolved;
  hashed.erase("out");
  c.hash = git_blob_sha1(hashed.dump());
  return c;
}

ExperimentConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::ConfigInvalid, "cannot read config file " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::ConfigInvalid, file.string() + ": " + e.what());
  }
  return parse_config(j);
}

json apply_overrides(json input, const ConfigOverrides& o) {
  if (!input.is_object()) invalid("", "expected an object");
  if (o.suites) input["suites"] = *o.suites;
  if (o.seed) input["seed"] = *o.seed;
  if (o.out) input["out"] = *o.out;
  if (o.replicas || o.order) {
    if (!input.contains("budgets")) input["budgets"] = json::object();
    if (!input["budgets"].is_object()) invalid("/budgets", "expected an object");
    if (o.replicas) input["budgets"]["replicas"] = *o.replicas;
    if (o.order) input["budgets"]["orders"] = json::array({*o.order});
  }
  return input;
}

// ------------------------------------------------------------------ running

namespace {

using Clock = std::chrono::steady_clock;

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Short form for parameter labels; values keep full precision.
std::string lbl(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json num_json(double v) { return std::isfinite(v) ? json(v) : json(num(v)); }

// FNV-1a, so suite streams do not depend on the order suites are listed in.
std::uint64_t label_of(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + "\"";
}

class Run {
 public:
  explicit Run(const ExperimentConfig& c) : c_(c) {}

  const ExperimentConfig& config() const { return c_; }
  RunResult& result() { return result_; }

  void begin(const std::string& suite) {
    suite_ = suite;
    start_ = Clock::now();
  }
  double elapsed() const { return std::chrono::duration<double>(Clock::now() - start_).count(); }
  std::uint64_t seed() const { return derive_stream(c_.seed, {label_of(suite_)}); }

  void info(const std::string& test, const std::string& params, double value, double stderr = 0.0) {
    add({suite_, test, params, value, stderr, 0.0, std::nullopt, false, elapsed()});
  }
  void check(const std::string& test, const std::string& params, double value, double stderr, double tolerance,
             bool pass) {
    add({suite_, test, params, value, stderr, tolerance, pass, true, elapsed()});
  }
  // |value - expected| within sigma standard errors (plus roundoff).
  void expect_near(const std::string& test, const std::string& params, double value, double stderr, double expected) {
    const double tol = c_.checks.sigma * stderr + 1e-10 * std::max(1.0, std::abs(expected));
    const double dev = std::abs(value - expected);
    add({suite_, test, params, value, stderr, tol, dev <= tol, true, elapsed()});
  }
  void failure(const std::string& test, const std::string& params, bool acceptance) {
    add({suite_, test, params, std::nan(""), 0.0, 0.0, false, acceptance, elapsed()});
  }

  std::ofstream open(const fs::path& rel) const {
    const fs::path p = c_.out / rel;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error(ErrorKind::OutputUnwritable, "cannot write " + p.string());
    return f;
  }

 private:
  void add(ResultRecord r) {
    if (r.acceptance) {
      ++result_.acceptance_checks;
      if (!r.pass.value_or(false)) ++result_.acceptance_failures;
    }
    result_.records.push_back(std::move(r));
  }

  const ExperimentConfig& c_;
  RunResult result_;
  std::string suite_;
  Clock::time_point start_;
};

ChaosProblem problem_for(const ExperimentConfig& c, const FunctionalSpec& f, double t) {
  return {f.f, c.mu0, c.fields, c.solver, t};
}

std::string fparam(const FunctionalSpec& f) { return "f=" + f.name; }

// ---------------------------------------------------------------- simulate

void suite_simulate(Run& run) {
  const auto& c = run.config();
  const int n = c.fields.noise_dim();
  const std::size_t R = c.budgets.replicas;
  const std::uint64_t seed = run.seed();
  std::vector<const FunctionalSpec*> fs;
  for (const auto& f : c.functionals) {
    if (f.used_by("simulate")) fs.push_back(&f);
  }

  struct Slot {
    bool ok = true;
    std::string error;
    std::vector<double> values;
    double residual = 0.0;
    std::optional<FlowSolution> kept;
  };
  std::vector<Slot> slots(R);
  parallel_for(R, [&](std::size_t r) {
    Slot& s = slots[r];
    try {
      const auto W = NoisePath::generate(n, c.horizon, c.solver.dt, seed, r);
      FlowSolution sol = solve_interacting_flow(c.mu0, c.fields, W, {}, c.solver);
      for (const auto* f : fs) s.values.push_back(f->f(sol.final_measure()));
      for (const auto& m : sol.measures) {
        for (const auto& p : m.points()) s.residual = std::max(s.residual, c.manifold.manifold_residual(p));
      }
      if (r < c.budgets.output_replicas) s.kept = std::move(sol);
    } catch (const Error& e) {
      s.ok = false;
      s.error = std::string(to_string(e.kind())) + ": " + e.what();
    }
  });

  std::ofstream traj = run.open("trajectories.csv");
  traj << "replica,time,particle_id";
  for (int k = 0; k < c.manifold.ambient_dim(); ++k) traj << ",x" << k;
  traj << "\n";
  json index = json::array();
  for (std::size_t r = 0; r < R; ++r) {
    if (!slots[r].kept) continue;
    const FlowSolution& sol = *slots[r].kept;
    for (std::size_t k = 0; k < sol.snapshot_count(); ++k) {
      const auto& m = sol.measures[k];
      for (std::size_t p = 0; p < m.size(); ++p) {
        traj << r << "," << num(sol.times[k]) << "," << p;
        for (int d = 0; d < m.point(p).size(); ++d) traj << "," << num(m.point(p)[d]);
        traj << "\n";
      }
      const bool last = k + 1 == sol.snapshot_count();
      const int stride = c.budgets.checkpoint_stride;
      if (k == 0 || last || (stride > 0 && k % static_cast<std::size_t>(stride) == 0)) {
        char name[64];
        std::snprintf(name, sizeof name, "replica-%05zu-snapshot-%05zu.jsonl", r, k);
        run.open(fs::path("checkpoints") / name) << m.to_jsonl();
        index.push_back({{"file", name}, {"replica", r}, {"snapshot", k}, {"step", sol.steps[k]}, {"time", sol.times[k]}});
      }
    }
  }
  run.open("checkpoints/index.json") << index.dump(2) << "\n";

  std::size_t failed = 0;
  double residual = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    if (!slots[r].ok) {
      ++failed;
      run.failure("replica_failed", "replica=" + std::to_string(r) + ";" + slots[r].error, false);
    } else {
      residual = std::max(residual, slots[r].residual);
    }
  }
  run.info("failed_replicas", "replicas=" + std::to_string(R), static_cast<double>(failed));
  run.check("on_manifold", "max residual over stored points", residual, 0.0, c.checks.manifold_tolerance,
            residual <= c.checks.manifold_tolerance);
  for (std::size_t q = 0; q < fs.size(); ++q) {
    std::vector<double> v;
    for (const auto& s : slots) {
      if (s.ok) v.push_back(s.values[q]);
    }
    if (v.empty()) continue;
    const auto m = mean_and_stderr(v);
    const std::string params = fparam(*fs[q]) + ";t=" + lbl(c.horizon);
    run.info("mean", params, m.mean, m.stderr);
    if (fs[q]->expect_mean) run.expect_near("mean_matches_closed_form", params, m.mean, m.stderr, *fs[q]->expect_mean);
  }
}

// ---------------------------------------------------------- check-calculus

void suite_check_calculus(Run& run) {
  const auto& c = run.config();
  const auto& T = c.checks;
  const auto& ladder = c.budgets.eps_ladder;
  const std::uint64_t seed = run.seed();
  std::vector<InteractionField> directions{c.fields.drift};
  directions.insert(directions.end(), c.fields.diffusion.begin(), c.fields.diffusion.end());
  std::vector<std::string> dir_names{"V0"};
  for (int i = 1; i <= c.fields.noise_dim(); ++i) dir_names.push_back("V" + std::to_string(i));

  struct Row {
    std::string test, config;
    double deviation, tolerance;
    bool pass;
  };
  std::vector<Row> rows;
  auto rel = [](double err, double ref) { return err / std::max(1e-2, std::abs(ref)); };
  // Slope of the error over the first two rungs; skipped at roundoff.
  auto slope_row = [&](const std::string& test, const std::string& cfg, const std::vector<double>& err) {
    if (err[0] < 1e-12) return;
    const double s = std::log(err[0] / err[1]) / std::log(ladder[0] / ladder[1]);
    rows.push_back({test, cfg, s, T.slope_min, s >= T.slope_min});
  };

  for (int k = 0; k < c.budgets.calculus_configurations; ++k) {
    CounterRng rng(derive_stream(seed, {static_cast<std::uint64_t>(k)}));
    const auto mu = sample_iid(c.manifold, PointSampler{}, 3 + static_cast<std::size_t>(k % 6), rng);
    const std::vector<Point> pts(mu.points().begin(), mu.points().end());
    std::optional<DifferentiablePath> path;
    std::string path_name;
    if (c.manifold.kind() == ManifoldKind::Sphere && c.manifold.ambient_dim() == 3) {
      Vec axis(3);
      for (int d = 0; d < 3; ++d) axis[d] = rng.normal();
      path = DifferentiablePath::rotation(axis);
      path_name = "rotation";
    } else if (c.manifold.kind() == ManifoldKind::Euclidean) {
      Vec v(c.manifold.ambient_dim());
      for (int d = 0; d < v.size(); ++d) v[d] = rng.normal();
      path = DifferentiablePath::translation(v);
      path_name = "translation";
    }
    for (const auto& F : c.functionals) {
      if (!F.used_by("check-calculus")) continue;
      const std::string base = "k=" + std::to_string(k) + ";n=" + std::to_string(mu.size()) + ";" + fparam(F);
      for (std::size_t d = 0; d < directions.size(); ++d) {
        const std::string cfg = base + ";V=" + dir_names[d];
        const double a = F.f.directional(mu, directions[d]);
        std::vector<double> err;
        for (double e : ladder) err.push_back(std::abs(fd_intrinsic_directional(F.f, mu, directions[d], e) - a));
        const double dev = rel(err.back(), a);
        rows.push_back({"intrinsic_derivative", cfg, dev, T.derivative_tolerance, dev <= T.derivative_tolerance});
        slope_row("intrinsic_derivative_slope", cfg, err);
      }
      if (path) {
        const std::string cfg = base + ";path=" + path_name;
        std::vector<double> err;
        double analytic = 0.0;
        for (double e : ladder) {
          const auto r = chain_rule_residual(F.f, *path, mu, 0.3, e);
          err.push_back(r.residual);
          analytic = r.analytic;
        }
        const double dev = rel(err.back(), analytic);
        rows.push_back({"chain_rule", cfg, dev, T.derivative_tolerance, dev <= T.derivative_tolerance});
        slope_row("chain_rule_slope", cfg, err);
      }
      const double g = empirical_gradient_identity(F.f, c.manifold, pts);
      rows.push_back({"empirical_gradient", base, g, T.empirical_gradient_tolerance, g <= T.empirical_gradient_tolerance});
    }
  }

  std::ofstream out = run.open("calculus.csv");
  out << "test,config,deviation,tolerance,pass\n";
  std::map<std::string, std::vector<const Row*>> by_test;
  for (const auto& r : rows) {
    out << r.test << "," << csv_field(r.config) << "," << num(r.deviation) << "," << num(r.tolerance) << ","
        << (r.pass ? "true" : "false") << "\n";
    by_test[r.test].push_back(&r);
  }
  for (const auto& [test, list] : by_test) {
    const bool slope = test.ends_with("_slope");
    double worst = slope ? INFINITY : 0.0;
    bool pass = true;
    for (const Row* r : list) {
      worst = slope ? std::min(worst, r->deviation) : std::max(worst, r->deviation);
      pass = pass && r->pass;
    }
    run.check(test, "cases=" + std::to_string(list.size()) + (slope ? ";worst slope" : ";worst deviation"), worst, 0.0,
              list.front()->tolerance, pass);
  }
}

// -------------------------------------------------------------- kv-kernels

void suite_kv_kernels(Run& run) {
  const auto& c = run.config();
  const auto& B = c.budgets;
  const std::uint64_t seed = run.seed();
  const int n = c.fields.noise_dim();
  const auto nodes = kernel_nodes(c.horizon, B.nodes);
  const double sigma = c.checks.sigma;

  for (int order : B.orders) {
    std::ofstream out = run.open("kv-kernels-order" + std::to_string(order) + ".csv");
    out << "functional,method,i," << (order == 1 ? "tau1" : "tau1,tau2") << ",value,stderr,outer_n,inner_n,eps,bias\n";
    auto row = [&](const FunctionalSpec& f, const ChaosKernelEstimate& e, double t1, double t2) {
      out << csv_field(f.name) << "," << to_string(e.method) << "," << e.i + 1 << "," << num(t1);
      if (order == 2) out << "," << num(t2);
      out << "," << num(e.value) << "," << num(e.stderr) << "," << e.outer_n << "," << e.inner_n << "," << num(e.eps)
          << "," << num(e.bias) << "\n";
    };
    for (std::size_t fi = 0; fi < c.functionals.size(); ++fi) {
      const auto& f = c.functionals[fi];
      if (!f.used_by("kv-kernels")) continue;
      const ChaosProblem problem = problem_for(c, f, c.horizon);
      for (int i = 0; i < n; ++i) {
        const auto fu = static_cast<std::uint64_t>(fi), iu = static_cast<std::uint64_t>(i);
        const std::string base = fparam(f) + ";i=" + std::to_string(i + 1);
        if (order == 1) {
          std::vector<ChaosKernelEstimate> kv;
          for (double tau : nodes) {
            kv.push_back(kv_kernel_order1(problem, tau, i,
                                          ChaosBudget{.outer = B.outer,
                                                      .inner = B.inner,
                                                      .eps = B.eps,
                                                      .richardson = B.richardson,
                                                      .seed = derive_stream(seed, {1, fu, iu})}));
          }
          const auto pr = projection_regression(problem, nodes, B.bins, i, B.replicas, derive_stream(seed, {2, fu, iu}),
                                                B.regression_degree);
          const auto co = clark_ocone_kernel(problem, nodes, i, B.malliavin_replicas, derive_stream(seed, {3, fu, iu}));
          for (std::size_t q = 0; q < nodes.size(); ++q) {
            const std::string p = base + ";tau=" + lbl(nodes[q]);
            const ChaosKernelEstimate* est[3] = {&kv[q], &pr[q], &co[q]};
            for (const auto* e : est) {
              row(f, *e, nodes[q], 0.0);
              if (f.expect_kernel_order1) {
                run.expect_near("kernel_matches_closed_form", p + ";method=" + to_string(e->method), e->value, e->stderr,
                                *f.expect_kernel_order1);
              }
            }
            for (int a = 0; a < 3; ++a) {
              for (int b = a + 1; b < 3; ++b) {
                const double se = std::hypot(est[a]->stderr, est[b]->stderr);
                const double tol = sigma * se + 1e-10 * (1.0 + std::abs(est[a]->value) + std::abs(est[b]->value));
                const double gap = std::abs(est[a]->value - est[b]->value);
                run.check("estimators_agree",
                          p + ";pair=" + to_string(est[a]->method) + "/" + to_string(est[b]->method), gap, se, tol,
                          gap <= tol);
              }
            }
          }
        } else {
          for (std::size_t a = 0; a < nodes.size(); ++a) {
            for (std::size_t b = a + 1; b < nodes.size(); ++b) {
              const auto e = kv_kernel_order2(problem, nodes[a], nodes[b], i,
                                              ChaosBudget{.outer = B.outer,
                                                          .inner = B.inner,
                                                          .eps = B.eps,
                                                          .richardson = B.richardson,
                                                          .seed = derive_stream(seed, {4, fu, iu})});
              row(f, e, nodes[a], nodes[b]);
              if (f.expect_kernel_order2) {
                run.expect_near("kernel_matches_closed_form",
                                base + ";tau1=" + lbl(nodes[a]) + ";tau2=" + lbl(nodes[b]) + ";method=" + to_string(e.method),
                                e.value, e.stderr, *f.expect_kernel_order2);
              }
            }
          }
          const auto bins = uniform_bins(c.horizon, B.order2_bins);
          for (std::size_t a = 0; a < bins.size(); ++a) {
            for (std::size_t b = a + 1; b < bins.size(); ++b) {
              const auto e = projection_kernel_order2(problem, bins[a], bins[b], i, i, B.replicas,
                                                      derive_stream(seed, {5, fu, iu, a, b}));
              const double m1 = 0.5 * (bins[a].first + bins[a].second), m2 = 0.5 * (bins[b].first + bins[b].second);
              row(f, e, m1, m2);
              if (f.expect_kernel_order2) {
                run.expect_near("kernel_matches_closed_form",
                                base + ";bin1=" + lbl(m1) + ";bin2=" + lbl(m2) + ";method=" + to_string(e.method), e.value,
                                e.stderr, *f.expect_kernel_order2);
              }
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------- kv-diagnostics

void suite_kv_diagnostics(Run& run) {
  const auto& c = run.config();
  const std::uint64_t seed = run.seed();
  json out = json::object();
  for (std::size_t fi = 0; fi < c.functionals.size(); ++fi) {
    const auto& f = c.functionals[fi];
    if (!f.used_by("kv-diagnostics")) continue;
    json entries = json::array();
    std::vector<std::pair<double, double>> shares;  // (t, share)
    for (double t : c.budgets.diagnostic_times) {
      const auto r = truncation_diagnostics(problem_for(c, f, t), c.budgets.replicas, c.budgets.bins,
                                            derive_stream(seed, {static_cast<std::uint64_t>(fi)}));
      json proj = json::array();
      for (const auto& row : r.projections) {
        json pr = json::array();
        for (const auto& m : row) pr.push_back({{"mean", num_json(m.mean)}, {"stderr", num_json(m.stderr)}});
        proj.push_back(pr);
      }
      entries.push_back({{"t", t},
                         {"replicas", r.replicas},
                         {"failed", r.failed},
                         {"mean", num_json(r.mean)},
                         {"variance", num_json(r.variance)},
                         {"first_order_budget", num_json(r.first_order_budget)},
                         {"first_order_share", num_json(r.first_order_share)},
                         {"residual_share", num_json(r.residual_share)},
                         {"second_order_budget", num_json(r.second_order_budget)},
                         {"mixed_max_abs", num_json(r.mixed_max_abs)},
                         {"mixed_budget", num_json(r.mixed_budget)},
                         {"bins", c.budgets.bins},
                         {"projections", proj}});
      const std::string p = fparam(f) + ";t=" + lbl(t);
      run.info("variance", p, r.variance);
      run.info("first_order_share", p, r.first_order_share);
      run.info("mixed_max_abs", p, r.mixed_max_abs);
      if (f.expect_first_order_share) {
        const double dev = std::abs(r.first_order_share - *f.expect_first_order_share);
        run.check("share_matches_closed_form", p, r.first_order_share, 0.0, c.checks.share_tolerance,
                  dev <= c.checks.share_tolerance);
      }
      if (c.checks.first_order_share_min > 0 && c.checks.first_order_share_at &&
          std::abs(t - *c.checks.first_order_share_at) < 1e-12) {
        run.check("first_order_share_min", p, r.first_order_share, 0.0, c.checks.first_order_share_min,
                  r.first_order_share >= c.checks.first_order_share_min);
      }
      shares.emplace_back(t, r.first_order_share);
    }
    if (shares.size() >= 2 && c.checks.first_order_share_min > 0) {
      std::sort(shares.begin(), shares.end(), [](auto& a, auto& b) { return a.first > b.first; });
      bool mono = true;
      for (std::size_t k = 1; k < shares.size(); ++k) mono = mono && shares[k].second > shares[k - 1].second;
      run.check("share_increases_as_t_decreases", fparam(f), shares.back().second - shares.front().second, 0.0, 0.0, mono);
    }
    out[f.name] = entries;
  }
  run.open("kv-diagnostics.json") << out.dump(2) << "\n";
}

// --------------------------------------------------------------- stability

void suite_stability(Run& run) {
  const auto& c = run.config();
  const std::uint64_t seed = run.seed();
  CounterRng rng(derive_stream(seed, {0}));
  std::vector<Tangent> dirs;
  for (const auto& p : c.mu0.points()) {
    Tangent v = c.manifold.random_tangent(p, rng);
    if (v.norm() > 0) v /= v.norm();
    dirs.push_back(v);
  }
  std::vector<double> sizes{0.0};
  sizes.insert(sizes.end(), c.budgets.perturbations.begin(), c.budgets.perturbations.end());
  std::ofstream out = run.open("stability.csv");
  out << "delta,w2_initial,ratio_p2,stderr_p2,ratio_p4,stderr_p4,failed\n";
  std::vector<double> ratios;
  for (double delta : sizes) {
    std::vector<Point> moved;
    for (std::size_t j = 0; j < c.mu0.size(); ++j) moved.push_back(c.manifold.retract(c.mu0.point(j), delta * dirs[j]));
    const auto nu0 = delta == 0.0 ? c.mu0 : c.mu0.relocated(moved);
    const auto r = estimate_stability(
        c.mu0, nu0, c.fields, c.solver,
        StabilityOptions{.horizon = c.horizon, .replicas = c.budgets.replicas, .seed = derive_stream(seed, {1}), .tracked_pair = std::nullopt});
    out << num(delta) << "," << num(r.w2_initial) << "," << num(r.ratio_p2.mean) << "," << num(r.ratio_p2.stderr) << ","
        << num(r.ratio_p4.mean) << "," << num(r.ratio_p4.stderr) << "," << r.failed << "\n";
    const std::string p = "delta=" + lbl(delta);
    run.info("ratio_p2", p, r.ratio_p2.mean, r.ratio_p2.stderr);
    run.info("ratio_p4", p, r.ratio_p4.mean, r.ratio_p4.stderr);
    if (delta == 0.0) {
      run.check("zero_perturbation_is_zero", p, r.ratio_p2.mean, 0.0, 0.0, r.ratio_p2.mean == 0.0);
    } else {
      run.check("ratio_finite", p, r.ratio_p2.mean, r.ratio_p2.stderr, 0.0, std::isfinite(r.ratio_p2.mean));
      ratios.push_back(r.ratio_p2.mean);
    }
  }
  if (!ratios.empty()) {
    const auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
    const double spread = *lo > 0 ? *hi / *lo : INFINITY;
    run.check("ratios_within_factor", "max/min over perturbation sizes", spread, 0.0, c.checks.stability_factor,
              spread <= c.checks.stability_factor);
  }
}

// ------------------------------------------------------------- convergence

void suite_convergence(Run& run) {
  const auto& c = run.config();
  const auto& L = c.budgets.dt_ladder;
  const std::uint64_t seed = run.seed();
  const int n = c.fields.noise_dim();
  const std::size_t R = c.budgets.replicas;
  std::vector<const FunctionalSpec*> fs;
  for (const auto& f : c.functionals) {
    if (f.used_by("convergence")) fs.push_back(&f);
  }
  SolverConfig cfg = c.solver;
  cfg.save_stride = 1;

  // sq[r][q * L.size() + k]: squared residual at T; NaN for a failed replica.
  std::vector<std::vector<double>> sq(R);
  parallel_for(R, [&](std::size_t r) {
    auto& out = sq[r];
    out.assign(fs.size() * L.size(), std::nan(""));
    try {
      const auto fine = NoisePath::generate(n, c.horizon, L.back(), seed, r);
      for (std::size_t k = 0; k < L.size(); ++k) {
        const int factor = static_cast<int>(std::lround(L[k] / L.back()));
        const auto W = factor == 1 ? fine : fine.coarsen(factor);
        SolverConfig ck = cfg;
        ck.dt = L[k];
        const auto sol = solve_interacting_flow(c.mu0, c.fields, W, {}, ck);
        for (std::size_t q = 0; q < fs.size(); ++q) {
          const double res = ito_formula_residual(fs[q]->f, sol, c.fields, W).back();
          out[q * L.size() + k] = res * res;
        }
      }
    } catch (const Error&) {
    }
  });

  std::ofstream csv = run.open("convergence.csv");
  csv << "functional,dt,rms_residual,replicas\n";
  std::size_t failed = 0;
  for (const auto& v : sq) failed += !v.empty() && std::isnan(v.front()) ? 1 : 0;
  run.info("failed_replicas", "replicas=" + std::to_string(R), static_cast<double>(failed));
  for (std::size_t q = 0; q < fs.size(); ++q) {
    std::vector<double> rms;
    for (std::size_t k = 0; k < L.size(); ++k) {
      std::vector<double> v;
      for (const auto& s : sq) {
        if (!std::isnan(s[q * L.size() + k])) v.push_back(s[q * L.size() + k]);
      }
      const auto m = mean_and_stderr(v);
      rms.push_back(std::sqrt(m.mean));
      csv << csv_field(fs[q]->name) << "," << num(L[k]) << "," << num(rms.back()) << "," << v.size() << "\n";
      run.info("ito_residual_rms", fparam(*fs[q]) + ";dt=" + lbl(L[k]), rms.back());
    }
    const double tol = c.checks.halving_tolerance;
    for (std::size_t k = 1; k < L.size(); ++k) {
      const double expected = L[k] / L[k - 1];
      const double ratio = rms[k] / rms[k - 1];
      run.check("ito_residual_ratio", fparam(*fs[q]) + ";dt=" + lbl(L[k - 1]) + "->" + lbl(L[k]) + ";expected=" + lbl(expected),
                ratio, 0.0, tol * expected, std::abs(ratio - expected) <= tol * expected);
    }
  }

  const auto order = convergence_order(c.mu0, c.fields, {}, c.horizon, L, R, derive_stream(seed, {1}), c.solver);
  for (std::size_t k = 0; k < order.gaps.size(); ++k) {
    run.info("pathwise_gap", "dt=" + lbl(order.dts[k]) + "->" + lbl(order.dts[k + 1]), order.gaps[k].mean,
             order.gaps[k].stderr);
  }
  run.info("pathwise_order", "log-log slope", order.order);
}

// ------------------------------------------------------------------ picard

void suite_picard(Run& run) {
  const auto& c = run.config();
  const int K = c.budgets.picard_iterations;
  const auto W = NoisePath::generate(c.fields.noise_dim(), c.horizon, c.solver.dt, run.seed(), 0);
  const auto iterates = picard_solve(c.mu0, c.fields, W, {}, c.solver, K);
  const auto direct = solve_interacting_flow(c.mu0, c.fields, W, {}, c.solver);
  std::ofstream out = run.open("picard.csv");
  out << "iteration,gap_to_previous,gap_to_direct\n";
  std::vector<double> gaps;
  for (int k = 1; k <= K; ++k) {
    const double to_direct = sup_w2_gap(iterates[static_cast<std::size_t>(k - 1)], direct);
    const double gap = k >= 2 ? sup_w2_gap(iterates[static_cast<std::size_t>(k - 1)], iterates[static_cast<std::size_t>(k - 2)])
                              : std::nan("");
    out << k << "," << num(gap) << "," << num(to_direct) << "\n";
    if (k >= 2) {
      gaps.push_back(gap);
      run.info("gap", "K=" + std::to_string(k), gap);
    }
  }
  for (std::size_t k = 1; k < gaps.size(); ++k) {
    const double ratio = gaps[k - 1] > 0 ? gaps[k] / gaps[k - 1] : 0.0;
    run.check("gap_ratio", "K=" + std::to_string(k + 2), ratio, 0.0, c.checks.picard_ratio, ratio < c.checks.picard_ratio);
  }
  const double last = sup_w2_gap(iterates.back(), direct);
  const double bound = c.checks.picard_direct_factor * (gaps.empty() ? 0.0 : gaps.back());
  run.check("final_iterate_matches_direct", "K=" + std::to_string(K), last, 0.0, bound, last <= bound);
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec || !fs::is_directory(c.out)) throw Error(ErrorKind::OutputUnwritable, "cannot create " + c.out.string());
  Run run(c);
  run.open("resolved-config.json") << c.resolved.dump(2) << "\n";

  const auto t0 = Clock::now();
  json suites = json::array();
  for (const auto& name : c.suites) {
    run.begin(name);
    const std::size_t first = run.result().records.size();
    try {
      if (name == "simulate") suite_simulate(run);
      else if (name == "check-calculus") suite_check_calculus(run);
      else if (name == "kv-kernels") suite_kv_kernels(run);
      else if (name == "kv-diagnostics") suite_kv_diagnostics(run);
      else if (name == "stability") suite_stability(run);
      else if (name == "convergence") suite_convergence(run);
      else if (name == "picard") suite_picard(run);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::ConfigInvalid || e.kind() == ErrorKind::OutputUnwritable) throw;
      run.failure("suite_error", std::string(to_string(e.kind())) + ": " + e.what(), true);
    } catch (const std::exception& e) {
      run.failure("suite_error", e.what(), true);
    }
    std::size_t checks = 0, failed = 0;
    for (std::size_t k = first; k < run.result().records.size(); ++k) {
      const auto& r = run.result().records[k];
      if (r.acceptance) {
        ++checks;
        failed += r.pass.value_or(false) ? 0 : 1;
      }
    }
    suites.push_back({{"name", name},
                      {"records", run.result().records.size() - first},
                      {"checks", checks},
                      {"failed", failed},
                      {"wall_time_s", run.elapsed()}});
  }

  const RunResult& result = run.result();
  std::ofstream rec = run.open("records.csv");
  rec << "experiment_id,config_hash,seed,suite,test,parameters,value,stderr,tolerance,pass,acceptance,wall_time_s\n";
  json failed = json::array();
  for (const auto& r : result.records) {
    rec << csv_field(c.id) << "," << c.hash << "," << c.seed << "," << r.suite << "," << r.test << ","
        << csv_field(r.parameters) << "," << num(r.value) << "," << num(r.stderr) << "," << num(r.tolerance) << ","
        << (r.pass ? (*r.pass ? "true" : "false") : "") << "," << (r.acceptance ? "true" : "false") << ","
        << num(r.wall_time) << "\n";
    if (r.acceptance && !r.pass.value_or(false)) {
      failed.push_back({{"suite", r.suite}, {"test", r.test}, {"parameters", r.parameters}});
    }
  }
  // Wall times and worker count are the only run-dependent fields; they live
  // under "runtime" (and the wall_time_s columns) so reruns can be diffed.
  json runtime = {{"workers", worker_count()}, {"wall_time_s", std::chrono::duration<double>(Clock::now() - t0).count()}};
  for (auto& s : suites) {
    runtime["suites"][s["name"].get<std::string>()] = s["wall_time_s"];
    s.erase("wall_time_s");
  }
  json report = {{"experiment_id", c.id},
                 {"config_hash", c.hash},
                 {"seed", c.seed},
                 {"suites", suites},
                 {"records", result.records.size()},
                 {"acceptance", {{"checks", result.acceptance_checks}, {"failed", result.acceptance_failures}, {"ok", result.ok()}}},
                 {"failed_checks", failed},
                 {"runtime", runtime}};
  run.open("report.json") << report.dump(2) << "\n";
  return result;
}

}  // namespace mvflow
