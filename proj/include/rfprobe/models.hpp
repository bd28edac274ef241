#ifndef RFPROBE_MODELS_HPP
#define RFPROBE_MODELS_HPP

// Constructors for the built-in model flows and tabulated (custom) spaces.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rfprobe/error.hpp"
#include "rfprobe/flowspace.hpp"
#include "rfprobe/paths.hpp"

namespace rfprobe {

struct GaussianSpec {
  int n = 1;
  MatrixPath A;  // metric coefficients, positive definite on the window
  MatrixPath a;  // Hessian of the weight potential f
  VectorPath b;
  ScalarPath c = constant_path(0.0);
  double extent = 5.0;  // grid covers [-extent, extent]^n
  int resolution = 200; // points per axis
  TimeWindow window{0.0, 0.4};
};

struct SphereSpec {
  int n = 2;
  ScalarPath lambda = constant_path(1.0);
  int count = 400;
  TimeWindow window{0.0, 0.4};
};

struct ConeSpec {
  double beta = 1.0;
  double radial_extent = 1.0;
  int count = 300;
  int rings = 0;  // overrides count when positive
  TimeWindow window{0.0, 1.0};
};

struct SuspensionSpec {
  double N = 1.0;
  int polar_count = 32;  // number of polar intervals on [0, pi]
  bool time_scaling = true;
  std::optional<TimeWindow> window;  // default [0, 0.4/N] when scaled
};

namespace detail {

inline Eigen::MatrixXd scalar_matrix(double v) { return Eigen::MatrixXd::Constant(1, 1, v); }

class GaussianModel final : public SpaceModel {
 public:
  GaussianModel(GaussianSpec spec, std::vector<double> coords, double cell)
      : spec_(std::move(spec)), coords_(std::move(coords)), cell_(cell) {}

  double distance(double t, std::size_t i, std::size_t j) const override {
    return chart_distance(t, pt(i), pt(j));
  }

  double chart_distance(double t, ConstPoint p, ConstPoint q) const override {
    const int n = spec_.n;
    if (n == 1) {
      const double dx = p[0] - q[0];
      return std::sqrt(spec_.A(t)(0, 0)) * std::abs(dx);
    }
    Eigen::VectorXd v(n);
    for (int k = 0; k < n; ++k) v(k) = p[k] - q[k];
    return std::sqrt(std::max(0.0, v.dot(spec_.A(t) * v)));
  }

  double mass(double t, std::size_t i) const override {
    const Eigen::MatrixXd A = spec_.A(t);
    return std::exp(-potential(t, pt(i))) * std::sqrt(A.determinant()) * cell_;
  }

  bool is_static() const override {
    return spec_.A.is_constant() && spec_.a.is_constant() && spec_.b.is_constant() &&
           spec_.c.is_constant();
  }
  int intrinsic_dimension() const override { return spec_.n; }
  bool has_chart_metric() const override { return true; }
  bool has_geodesic() const override { return true; }

  std::optional<Coords> geodesic(double, ConstPoint p, ConstPoint q, double a) const override {
    Coords out(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) out[k] = (1.0 - a) * p[k] + a * q[k];
    return out;
  }

  bool has_tensor() const override { return true; }
  TensorForm tensor_form(double t, ConstPoint p, double N) const override {
    const int n = spec_.n;
    TensorForm form;
    form.basis = Eigen::MatrixXd::Identity(n, n);
    form.G = spec_.A(t);
    form.B = 0.5 * spec_.A.derivative(t) + spec_.a(t);
    if (std::isfinite(N)) {
      Eigen::VectorXd x(n);
      for (int k = 0; k < n; ++k) x(k) = p[k];
      const Eigen::VectorXd grad = spec_.a(t) * x + spec_.b(t);
      if (N < n) throw Error(ErrorKind::invalid_input, "dimension parameter N below n");
      if (N == n) {
        if (grad.norm() > 0.0)
          throw Error(ErrorKind::invalid_input, "N = n requires a constant weight");
      } else {
        form.B -= grad * grad.transpose() / (N - n);
      }
    }
    return form;
  }

  bool in_core(std::size_t i) const override {
    for (double c : pt(i))
      if (std::abs(c) > 0.5 * spec_.extent) return false;
    return true;
  }

  double potential(double t, ConstPoint p) const {
    Eigen::VectorXd x(spec_.n);
    for (int k = 0; k < spec_.n; ++k) x(k) = p[k];
    return 0.5 * x.dot(spec_.a(t) * x) + x.dot(spec_.b(t)) + spec_.c(t);
  }

 private:
  ConstPoint pt(std::size_t i) const {
    return ConstPoint(coords_.data() + i * spec_.n, spec_.n);
  }

  GaussianSpec spec_;
  std::vector<double> coords_;
  double cell_;
};

// Angle between unit vectors, accurate for nearby and nearly antipodal points.
inline double unit_angle(ConstPoint p, ConstPoint q) {
  double dot = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) dot += p[k] * q[k];
  double cross2 = 0.0;
  if (p.size() == 2) {
    const double c = p[0] * q[1] - p[1] * q[0];
    cross2 = c * c;
  } else {
    const double c0 = p[1] * q[2] - p[2] * q[1];
    const double c1 = p[2] * q[0] - p[0] * q[2];
    const double c2 = p[0] * q[1] - p[1] * q[0];
    cross2 = c0 * c0 + c1 * c1 + c2 * c2;
  }
  return std::atan2(std::sqrt(cross2), dot);
}

inline std::optional<Coords> slerp(ConstPoint p, ConstPoint q, double a) {
  const double w = unit_angle(p, q);
  Coords out(p.size());
  if (w < 1e-14) {
    for (std::size_t k = 0; k < p.size(); ++k) out[k] = p[k];
    return out;
  }
  if (w > std::numbers::pi - 1e-9) return std::nullopt;
  const double s = std::sin(w);
  const double cp = std::sin((1.0 - a) * w) / s, cq = std::sin(a * w) / s;
  double norm = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    out[k] = cp * p[k] + cq * q[k];
    norm += out[k] * out[k];
  }
  norm = std::sqrt(norm);
  for (double& v : out) v /= norm;
  return out;
}

class SphereModel final : public SpaceModel {
 public:
  SphereModel(SphereSpec spec, std::vector<double> coords)
      : spec_(std::move(spec)), coords_(std::move(coords)) {
    const double area = spec_.n == 1 ? 2.0 * std::numbers::pi : 4.0 * std::numbers::pi;
    cell_ = area / static_cast<double>(spec_.count);
  }

  double distance(double t, std::size_t i, std::size_t j) const override {
    return chart_distance(t, pt(i), pt(j));
  }
  double chart_distance(double t, ConstPoint p, ConstPoint q) const override {
    return std::sqrt(spec_.lambda(t)) * unit_angle(p, q);
  }
  double mass(double t, std::size_t) const override {
    return std::pow(spec_.lambda(t), 0.5 * spec_.n) * cell_;
  }
  bool is_static() const override { return spec_.lambda.is_constant(); }
  int intrinsic_dimension() const override { return spec_.n; }
  bool has_chart_metric() const override { return true; }
  bool has_geodesic() const override { return true; }
  std::optional<Coords> geodesic(double, ConstPoint p, ConstPoint q, double a) const override {
    return slerp(p, q, a);
  }

  bool has_tensor() const override { return true; }
  TensorForm tensor_form(double t, ConstPoint p, double N) const override {
    if (std::isfinite(N) && N < spec_.n)
      throw Error(ErrorKind::invalid_input, "dimension parameter N below n");
    const int n = spec_.n;
    TensorForm form;
    form.basis = tangent_basis(p);
    const double lam = spec_.lambda(t);
    form.G = lam * Eigen::MatrixXd::Identity(n, n);
    form.B = (0.5 * spec_.lambda.derivative(t) + (n - 1)) * Eigen::MatrixXd::Identity(n, n);
    return form;
  }

  static Eigen::MatrixXd tangent_basis(ConstPoint p) {
    if (p.size() == 2) {
      Eigen::MatrixXd e(2, 1);
      e << -p[1], p[0];
      return e;
    }
    Eigen::Vector3d x(p[0], p[1], p[2]);
    Eigen::Vector3d helper = std::abs(x(0)) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
    Eigen::Vector3d e1 = (helper - helper.dot(x) * x).normalized();
    Eigen::Vector3d e2 = x.cross(e1);
    Eigen::MatrixXd e(3, 2);
    e.col(0) = e1;
    e.col(1) = e2;
    return e;
  }

 private:
  ConstPoint pt(std::size_t i) const {
    const std::size_t d = static_cast<std::size_t>(spec_.n + 1);
    return ConstPoint(coords_.data() + i * d, d);
  }

  SphereSpec spec_;
  std::vector<double> coords_;
  double cell_ = 0.0;
};

inline double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a < 0) a += two_pi;
  return a;
}

// Signed angular difference q - p in (-pi, pi].
inline double angle_diff(double p, double q) {
  double d = wrap_angle(q - p);
  if (d > std::numbers::pi) d -= 2.0 * std::numbers::pi;
  return d;
}

class ConeModel final : public SpaceModel {
 public:
  ConeModel(ConeSpec spec, std::vector<double> coords, std::vector<double> masses)
      : spec_(std::move(spec)), coords_(std::move(coords)), masses_(std::move(masses)) {}

  double distance(double t, std::size_t i, std::size_t j) const override {
    return chart_distance(t, pt(i), pt(j));
  }
  double chart_distance(double, ConstPoint p, ConstPoint q) const override {
    const double r = p[0], rr = q[0];
    const double ang = std::min(spec_.beta * std::abs(angle_diff(p[1], q[1])), std::numbers::pi);
    // r^2 + r'^2 - 2 r r' cos(ang), written to stay accurate for nearby points
    const double half = std::sin(0.5 * ang);
    const double d2 = (r - rr) * (r - rr) + 4.0 * r * rr * half * half;
    return std::sqrt(std::max(0.0, d2));
  }
  double mass(double, std::size_t i) const override { return masses_[i]; }
  bool is_static() const override { return true; }
  int intrinsic_dimension() const override { return 2; }
  bool has_chart_metric() const override { return true; }
  bool has_geodesic() const override { return true; }

  std::optional<Coords> geodesic(double, ConstPoint p, ConstPoint q, double a) const override {
    if (p[0] == 0.0) return Coords{a * q[0], q[1]};
    if (q[0] == 0.0) return Coords{(1.0 - a) * p[0], p[1]};
    const double alpha = spec_.beta * angle_diff(p[1], q[1]);
    if (std::abs(alpha) >= std::numbers::pi - 1e-12) return std::nullopt;  // through the apex
    const double x = (1.0 - a) * p[0] + a * q[0] * std::cos(alpha);
    const double y = a * q[0] * std::sin(alpha);
    const double r = std::hypot(x, y);
    const double phi = wrap_angle(p[1] + std::atan2(y, x) / spec_.beta);
    return Coords{r, phi};
  }

  bool has_tensor() const override { return true; }
  TensorForm tensor_form(double, ConstPoint p, double N) const override {
    if (std::isfinite(N) && N < 2) throw Error(ErrorKind::invalid_input, "dimension parameter N below n");
    TensorForm form;
    form.basis = Eigen::MatrixXd::Identity(2, 2);
    form.G = Eigen::MatrixXd::Identity(2, 2);
    const double rb = spec_.beta * p[0];
    if (rb > 0.0) form.G(1, 1) = rb * rb;
    form.B = Eigen::MatrixXd::Zero(2, 2);
    return form;
  }

  std::vector<std::size_t> distinguished_points() const override { return {0}; }
  bool in_core(std::size_t i) const override { return pt(i)[0] <= 0.6 * spec_.radial_extent; }

 private:
  ConstPoint pt(std::size_t i) const { return ConstPoint(coords_.data() + 2 * i, 2); }

  ConeSpec spec_;
  std::vector<double> coords_;
  std::vector<double> masses_;
};

class SuspensionModel final : public SpaceModel {
 public:
  SuspensionModel(FlowSpace base, SuspensionSpec spec, std::vector<std::size_t> base_index,
                  std::vector<double> polar, std::vector<double> masses, double base_t)
      : base_(std::move(base)),
        spec_(spec),
        base_index_(std::move(base_index)),
        polar_(std::move(polar)),
        masses_(std::move(masses)),
        base_t_(base_t) {}

  double scale(double t) const { return spec_.time_scaling ? 1.0 - 2.0 * spec_.N * t : 1.0; }

  double distance(double t, std::size_t i, std::size_t j) const override {
    const double delta = std::min(base_.distance(base_t_, base_index_[i], base_index_[j]),
                                  std::numbers::pi);
    return std::sqrt(scale(t)) * suspension_distance(polar_[i], polar_[j], delta);
  }

  double chart_distance(double t, ConstPoint p, ConstPoint q) const override {
    const std::size_t bd = base_.chart_dim();
    const double delta =
        std::min(base_.point_distance(base_t_, p.first(bd), q.first(bd)), std::numbers::pi);
    return std::sqrt(scale(t)) * suspension_distance(p[bd], q[bd], delta);
  }

  static double suspension_distance(double s, double ss, double delta) {
    // chord length in the isometric embedding of the two meridians into S^2
    const double ux = std::sin(s) - std::sin(ss) * std::cos(delta);
    const double uy = std::sin(ss) * std::sin(delta);
    const double uz = std::cos(s) - std::cos(ss);
    const double chord = std::sqrt(ux * ux + uy * uy + uz * uz);
    return 2.0 * std::asin(std::min(1.0, 0.5 * chord));
  }

  double mass(double t, std::size_t i) const override {
    return std::pow(scale(t), 0.5 * (spec_.N + 1.0)) * masses_[i];
  }
  bool is_static() const override { return !spec_.time_scaling; }
  int intrinsic_dimension() const override { return base_.intrinsic_dimension() + 1; }
  bool has_chart_metric() const override { return base_.has_chart_metric(); }
  bool has_geodesic() const override { return base_.has_geodesic() && base_.has_chart_metric(); }

  std::optional<Coords> geodesic(double, ConstPoint p, ConstPoint q, double a) const override {
    const std::size_t bd = base_.chart_dim();
    const double s0 = p[bd], s1 = q[bd];
    const bool p_pole = std::sin(s0) < 1e-12, q_pole = std::sin(s1) < 1e-12;
    ConstPoint pb = p_pole ? q.first(bd) : p.first(bd);
    ConstPoint qb = q_pole ? p.first(bd) : q.first(bd);
    const double delta = (p_pole || q_pole) ? 0.0 : base_.point_distance(base_t_, pb, qb);
    if (delta >= std::numbers::pi - 1e-12) return std::nullopt;
    const Eigen::Vector3d u(std::sin(s0), 0.0, std::cos(s0));
    const Eigen::Vector3d v(std::sin(s1) * std::cos(delta), std::sin(s1) * std::sin(delta),
                            std::cos(s1));
    auto w = slerp(ConstPoint(u.data(), 3), ConstPoint(v.data(), 3), a);
    if (!w) return std::nullopt;
    const Eigen::Vector3d x((*w)[0], (*w)[1], (*w)[2]);
    const double s = std::atan2(std::hypot(x(0), x(1)), x(2));
    Coords out;
    if (delta > 0.0) {
      const double psi = std::atan2(x(1), x(0));
      auto b = base_.geodesic_between(base_t_, pb, qb, std::clamp(psi / delta, 0.0, 1.0));
      if (!b) return std::nullopt;
      out = *b;
    } else {
      out.assign(pb.begin(), pb.end());
    }
    out.push_back(s);
    return out;
  }

  bool has_tensor() const override {
    return base_.kind() == SpaceKind::sphere && base_.is_static() &&
           std::abs(base_.intrinsic_dimension() - spec_.N) < 1e-12 && unit_base_;
  }
  void set_unit_base(bool v) { unit_base_ = v; }

  TensorForm tensor_form(double t, ConstPoint p, double N) const override {
    if (!has_tensor()) throw Error(ErrorKind::unsupported, "suspension tensor needs a unit round base with N = n");
    const int n = base_.intrinsic_dimension();
    if (std::isfinite(N) && N < n + 1)
      throw Error(ErrorKind::invalid_input, "dimension parameter N below n");
    const std::size_t bd = base_.chart_dim();
    TensorForm form;
    form.basis = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(bd + 1), n + 1);
    form.basis.topLeftCorner(static_cast<Eigen::Index>(bd), n) =
        SphereModel::tangent_basis(p.first(bd));
    form.basis(static_cast<Eigen::Index>(bd), n) = 1.0;
    const double kappa = scale(t);
    const double kappa_dot = spec_.time_scaling ? -2.0 * spec_.N : 0.0;
    form.G = kappa * Eigen::MatrixXd::Identity(n + 1, n + 1);
    form.B = (n + 0.5 * kappa_dot) * Eigen::MatrixXd::Identity(n + 1, n + 1);
    return form;
  }

  std::vector<std::size_t> distinguished_points() const override {
    return {0, masses_.size() - 1};
  }

 private:
  FlowSpace base_;
  SuspensionSpec spec_;
  std::vector<std::size_t> base_index_;
  std::vector<double> polar_;
  std::vector<double> masses_;
  double base_t_;
  bool unit_base_ = false;
};

class TabulatedModel final : public SpaceModel {
 public:
  TabulatedModel(std::vector<double> times, std::vector<Eigen::MatrixXd> dist,
                 std::vector<Eigen::VectorXd> mass, int dimension)
      : times_(std::move(times)), dist_(std::move(dist)), mass_(std::move(mass)), dim_(dimension) {}

  double distance(double t, std::size_t i, std::size_t j) const override {
    auto [k, w] = locate(t);
    if (w == 0.0) return dist_[k](i, j);
    return (1.0 - w) * dist_[k](i, j) + w * dist_[k + 1](i, j);
  }
  double mass(double t, std::size_t i) const override {
    auto [k, w] = locate(t);
    if (w == 0.0) return mass_[k](i);
    return (1.0 - w) * mass_[k](i) + w * mass_[k + 1](i);
  }
  bool is_static() const override { return times_.size() == 1; }
  int intrinsic_dimension() const override { return dim_; }

 private:
  // Interval index and interpolation weight; clamped to the tabulated range.
  std::pair<std::size_t, double> locate(double t) const {
    if (times_.size() == 1 || t <= times_.front()) return {0, 0.0};
    if (t >= times_.back()) return {times_.size() - 1, 0.0};
    auto it = std::upper_bound(times_.begin(), times_.end(), t);
    const std::size_t k = static_cast<std::size_t>(it - times_.begin()) - 1;
    return {k, (t - times_[k]) / (times_[k + 1] - times_[k])};
  }

  std::vector<double> times_;
  std::vector<Eigen::MatrixXd> dist_;
  std::vector<Eigen::VectorXd> mass_;
  int dim_;
};

class ProductModel final : public SpaceModel {
 public:
  // Sample k is the pair (ia[k], ib[k]) of factor indices.
  ProductModel(FlowSpace a, FlowSpace b, std::vector<std::size_t> ia, std::vector<std::size_t> ib)
      : a_(std::move(a)), b_(std::move(b)), ia_(std::move(ia)), ib_(std::move(ib)) {}

  double distance(double t, std::size_t i, std::size_t j) const override {
    const double da = a_.distance(t, ia_[i], ia_[j]);
    const double db = b_.distance(t, ib_[i], ib_[j]);
    return std::sqrt(da * da + db * db);
  }
  double mass(double t, std::size_t i) const override { return a_.mass(t, ia_[i]) * b_.mass(t, ib_[i]); }
  bool is_static() const override { return a_.is_static() && b_.is_static(); }
  int intrinsic_dimension() const override {
    return a_.intrinsic_dimension() + b_.intrinsic_dimension();
  }
  bool has_chart_metric() const override { return a_.has_chart_metric() && b_.has_chart_metric(); }
  double chart_distance(double t, ConstPoint p, ConstPoint q) const override {
    const std::size_t ad = a_.chart_dim();
    const double da = a_.point_distance(t, p.first(ad), q.first(ad));
    const double db = b_.point_distance(t, p.subspan(ad), q.subspan(ad));
    return std::sqrt(da * da + db * db);
  }
  bool has_geodesic() const override { return a_.has_geodesic() && b_.has_geodesic(); }
  std::optional<Coords> geodesic(double t, ConstPoint p, ConstPoint q, double s) const override {
    const std::size_t ad = a_.chart_dim();
    auto ga = a_.geodesic_between(t, p.first(ad), q.first(ad), s);
    auto gb = b_.geodesic_between(t, p.subspan(ad), q.subspan(ad), s);
    if (!ga || !gb) return std::nullopt;
    ga->insert(ga->end(), gb->begin(), gb->end());
    return ga;
  }

 private:
  FlowSpace a_;
  FlowSpace b_;
  std::vector<std::size_t> ia_, ib_;
};

inline void check_window_positive(const std::function<bool(double)>& ok, const TimeWindow& w,
                                  const std::string& what) {
  for (int k = 0; k <= 256; ++k) {
    const double t = w.lo + (w.hi - w.lo) * k / 256.0;
    if (!ok(t)) throw Error(ErrorKind::invalid_spec, what + " fails at t = " + std::to_string(t));
  }
}

inline nlohmann::json scalar_path_json(const ScalarPath& p) { return p.coeffs(); }

inline nlohmann::json matrix_path_json(const MatrixPath& p) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& m : p.coeffs()) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(row);
    }
    out.push_back(rows);
  }
  return {{"poly", out}};
}

inline nlohmann::json vector_path_json(const VectorPath& p) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& v : p.coeffs()) out.push_back(std::vector<double>(v.data(), v.data() + v.size()));
  return {{"poly", out}};
}

inline nlohmann::json window_json(const TimeWindow& w) { return {w.lo, w.hi}; }

}  // namespace detail

inline FlowSpace build_gaussian_flow(GaussianSpec spec) {
  const int n = spec.n;
  if (n < 1 || n > 3) throw Error(ErrorKind::invalid_spec, "gaussian dimension must be 1, 2 or 3");
  if (spec.resolution < 16) throw Error(ErrorKind::invalid_spec, "grid resolution must be >= 16 per axis");
  if (!(spec.extent > 0.0)) throw Error(ErrorKind::invalid_spec, "grid extent must be positive");
  if (spec.a.coeffs().front().size() == 0) spec.a = MatrixPath({Eigen::MatrixXd::Zero(n, n)});
  if (spec.b.coeffs().front().size() == 0) spec.b = VectorPath({Eigen::VectorXd::Zero(n)});
  if (spec.A.coeffs().front().size() == 0) spec.A = MatrixPath({Eigen::MatrixXd::Identity(n, n)});
  for (const auto& m : spec.A.coeffs())
    if (m.rows() != n || m.cols() != n) throw Error(ErrorKind::invalid_spec, "A has wrong shape");
  for (const auto& m : spec.a.coeffs()) {
    if (m.rows() != n || m.cols() != n) throw Error(ErrorKind::invalid_spec, "a has wrong shape");
    if (!m.isApprox(m.transpose(), 1e-12) && !m.isZero())
      throw Error(ErrorKind::invalid_spec, "a must be symmetric");
  }
  for (const auto& v : spec.b.coeffs())
    if (v.size() != n) throw Error(ErrorKind::invalid_spec, "b has wrong length");
  detail::check_window_positive(
      [&](double t) {
        Eigen::MatrixXd A = spec.A(t);
        if (!A.isApprox(A.transpose(), 1e-12)) return false;
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        return llt.info() == Eigen::Success;
      },
      spec.window, "positive definiteness of A_t");

  const int R = spec.resolution;
  const double h = 2.0 * spec.extent / (R - 1);
  std::size_t total = 1;
  for (int k = 0; k < n; ++k) total *= static_cast<std::size_t>(R);
  std::vector<double> coords(total * n);
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t rem = idx;
    for (int k = n - 1; k >= 0; --k) {
      coords[idx * n + k] = -spec.extent + h * static_cast<double>(rem % R);
      rem /= R;
    }
  }

  double L = 0.0;
  for (int k = 0; k <= 64; ++k) {
    const double t = spec.window.lo + (spec.window.hi - spec.window.lo) * k / 64.0;
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(spec.A.derivative(t), spec.A(t),
                                                                 Eigen::EigenvaluesOnly);
    L = std::max(L, 0.5 * es.eigenvalues().cwiseAbs().maxCoeff());
  }

  nlohmann::json js = {{"kind", "gaussian"},
                       {"params",
                        {{"n", n},
                         {"A", detail::matrix_path_json(spec.A)},
                         {"a", detail::matrix_path_json(spec.a)},
                         {"b", detail::vector_path_json(spec.b)},
                         {"c", detail::scalar_path_json(spec.c)},
                         {"extent", spec.extent},
                         {"resolution", spec.resolution},
                         {"window", detail::window_json(spec.window)}}}};
  const TimeWindow window = spec.window;
  auto model = std::make_shared<detail::GaussianModel>(std::move(spec), coords, std::pow(h, n));
  return FlowSpace(SpaceKind::gaussian, static_cast<std::size_t>(n), std::move(coords), window, L,
                   1e-9, std::move(model), std::move(js));
}

// One-dimensional convenience: A_t, a_t, b_t given as scalar polynomials.
inline FlowSpace build_gaussian_1d(const ScalarPath& A, const ScalarPath& a, int resolution = 200,
                                   double extent = 5.0, TimeWindow window = {0.0, 0.4},
                                   const ScalarPath& b = constant_path(0.0)) {
  auto lift = [](const ScalarPath& p) {
    std::vector<Eigen::MatrixXd> m;
    for (double c : p.coeffs()) m.push_back(detail::scalar_matrix(c));
    return MatrixPath(std::move(m));
  };
  std::vector<Eigen::VectorXd> bv;
  for (double c : b.coeffs()) bv.push_back(Eigen::VectorXd::Constant(1, c));
  GaussianSpec spec;
  spec.n = 1;
  spec.A = lift(A);
  spec.a = lift(a);
  spec.b = VectorPath(std::move(bv));
  spec.resolution = resolution;
  spec.extent = extent;
  spec.window = window;
  return build_gaussian_flow(std::move(spec));
}

inline FlowSpace build_sphere_flow(SphereSpec spec) {
  if (spec.n != 1 && spec.n != 2) throw Error(ErrorKind::unsupported, "sphere dimension must be 1 or 2");
  const int min_count = spec.n == 1 ? 50 : 200;
  if (spec.count < min_count)
    throw Error(ErrorKind::invalid_spec,
                "sphere sample count must be >= " + std::to_string(min_count));
  detail::check_window_positive([&](double t) { return spec.lambda(t) > 0.0; }, spec.window,
                                "positivity of the scaling path");
  const std::size_t N = static_cast<std::size_t>(spec.count);
  std::vector<double> coords;
  if (spec.n == 1) {
    coords.resize(2 * N);
    for (std::size_t i = 0; i < N; ++i) {
      const double th = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(N);
      coords[2 * i] = std::cos(th);
      coords[2 * i + 1] = std::sin(th);
    }
  } else {
    coords.resize(3 * N);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (std::size_t i = 0; i < N; ++i) {
      const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(N);
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double ph = golden * static_cast<double>(i);
      coords[3 * i] = r * std::cos(ph);
      coords[3 * i + 1] = r * std::sin(ph);
      coords[3 * i + 2] = z;
    }
  }
  double L = 0.0;
  for (int k = 0; k <= 64; ++k) {
    const double t = spec.window.lo + (spec.window.hi - spec.window.lo) * k / 64.0;
    L = std::max(L, 0.5 * std::abs(spec.lambda.derivative(t) / spec.lambda(t)));
  }
  nlohmann::json js = {{"kind", "sphere"},
                       {"params",
                        {{"n", spec.n},
                         {"lambda", detail::scalar_path_json(spec.lambda)},
                         {"count", spec.count},
                         {"window", detail::window_json(spec.window)}}}};
  const std::size_t dim = static_cast<std::size_t>(spec.n + 1);
  const TimeWindow window = spec.window;
  auto model = std::make_shared<detail::SphereModel>(std::move(spec), coords);
  return FlowSpace(SpaceKind::sphere, dim, std::move(coords), window, L, 1e-9, std::move(model),
                   std::move(js));
}

inline FlowSpace build_cone(ConeSpec spec) {
  if (!(spec.beta > 0.0)) throw Error(ErrorKind::invalid_spec, "cone opening parameter must be positive");
  if (!(spec.radial_extent > 0.0)) throw Error(ErrorKind::invalid_spec, "radial extent must be positive");
  int K = spec.rings;
  if (K <= 0) {
    if (spec.count < 8) throw Error(ErrorKind::invalid_spec, "cone sample count must be >= 8");
    K = std::max(1, static_cast<int>(std::lround(
                        std::sqrt((spec.count - 1) / (std::numbers::pi * spec.beta)))));
  }
  const double dr = spec.radial_extent / K;
  std::vector<double> coords{0.0, 0.0};
  std::vector<double> masses{std::numbers::pi * spec.beta * 0.25 * dr * dr};
  for (int k = 1; k <= K; ++k) {
    const double r = k * dr;
    const int nk = std::max(3, static_cast<int>(std::lround(2.0 * std::numbers::pi * spec.beta * r / dr)));
    const double cell = 2.0 * std::numbers::pi * spec.beta * r * dr / nk;
    for (int j = 0; j < nk; ++j) {
      coords.push_back(r);
      coords.push_back(2.0 * std::numbers::pi * j / nk);
      masses.push_back(cell);
    }
  }
  nlohmann::json js = {{"kind", "cone"},
                       {"params",
                        {{"beta", spec.beta},
                         {"radial_extent", spec.radial_extent},
                         {"count", spec.count},
                         {"rings", K},
                         {"window", detail::window_json(spec.window)}}}};
  const TimeWindow window = spec.window;
  auto model = std::make_shared<detail::ConeModel>(std::move(spec), coords, std::move(masses));
  return FlowSpace(SpaceKind::cone, 2, std::move(coords), window, 0.0, 1e-9, std::move(model),
                   std::move(js));
}

inline FlowSpace build_suspension(const FlowSpace& base, SuspensionSpec spec) {
  if (!base.is_static()) throw Error(ErrorKind::invalid_spec, "suspension base must be static");
  if (!(spec.N >= 1.0)) throw Error(ErrorKind::invalid_spec, "suspension exponent N must be >= 1");
  if (spec.polar_count < 4) throw Error(ErrorKind::invalid_spec, "polar count must be >= 4");
  const double bt = base.window().lo;
  const std::size_t nb = base.size();
  double diam = 0.0;
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t j = i + 1; j < nb; ++j) diam = std::max(diam, base.distance(bt, i, j));
  if (diam > std::numbers::pi + base.metric_tol())
    throw Error(ErrorKind::invalid_spec, "suspension base diameter exceeds pi");

  const int K = spec.polar_count;
  const double ds = std::numbers::pi / K;
  auto sin_integral = [&](double lo, double hi) {
    // composite Simpson; the integrand is smooth
    const int m = 64;
    const double h = (hi - lo) / m;
    double acc = 0.0;
    for (int k = 0; k <= m; ++k) {
      const double w = (k == 0 || k == m) ? 1.0 : (k % 2 ? 4.0 : 2.0);
      acc += w * std::pow(std::sin(lo + k * h), spec.N);
    }
    return acc * h / 3.0;
  };
  double base_total = 0.0;
  for (std::size_t i = 0; i < nb; ++i) base_total += base.mass(bt, i);

  const std::size_t bd = base.chart_dim();
  std::vector<double> coords;
  std::vector<std::size_t> base_index;
  std::vector<double> polar, masses;
  auto push = [&](std::size_t b, double s, double m) {
    auto p = base.point(b);
    coords.insert(coords.end(), p.begin(), p.end());
    coords.push_back(s);
    base_index.push_back(b);
    polar.push_back(s);
    masses.push_back(m);
  };
  push(0, 0.0, base_total * sin_integral(0.0, 0.5 * ds));
  for (int k = 1; k < K; ++k) {
    const double s = k * ds;
    const double w = sin_integral(s - 0.5 * ds, s + 0.5 * ds);
    for (std::size_t b = 0; b < nb; ++b) push(b, s, base.mass(bt, b) * w);
  }
  push(0, std::numbers::pi, base_total * sin_integral(std::numbers::pi - 0.5 * ds, std::numbers::pi));

  TimeWindow window = spec.window.value_or(
      spec.time_scaling ? TimeWindow{0.0, 0.4 / spec.N} : TimeWindow{0.0, 1.0});
  if (spec.time_scaling && window.hi >= 0.5 / spec.N)
    throw Error(ErrorKind::invalid_spec, "suspension window must end before 1/(2N)");
  const double L = spec.time_scaling ? spec.N / (1.0 - 2.0 * spec.N * window.hi) : 0.0;

  bool unit_base = false;
  if (base.kind() == SpaceKind::sphere) {
    const auto& lam = base.spec()["params"]["lambda"];
    unit_base = lam.is_array() && lam.size() == 1 && lam[0].get<double>() == 1.0;
  }
  nlohmann::json js = {{"kind", "suspension"},
                       {"params",
                        {{"base", base.spec()},
                         {"N", spec.N},
                         {"polar_count", spec.polar_count},
                         {"time_scaling", spec.time_scaling},
                         {"window", detail::window_json(window)}}}};
  auto model = std::make_shared<detail::SuspensionModel>(base, spec, std::move(base_index),
                                                         std::move(polar), std::move(masses), bt);
  model->set_unit_base(unit_base);
  return FlowSpace(SpaceKind::suspension, bd + 1, std::move(coords), window, L, 1e-9,
                   std::move(model), std::move(js));
}

// Cartesian product with d = (d_a^2 + d_b^2)^{1/2} and product masses; tagged custom.
// With `sample` set, a seeded subset of that many grid pairs is kept (sorted by grid index).
inline FlowSpace build_product(const FlowSpace& a, const FlowSpace& b,
                               std::optional<std::size_t> sample = std::nullopt,
                               std::uint64_t seed = 0) {
  const std::size_t full = a.size() * b.size();
  std::vector<std::size_t> grid(full);
  for (std::size_t k = 0; k < full; ++k) grid[k] = k;
  if (sample && *sample < full) {
    if (*sample < 2) throw Error(ErrorKind::invalid_spec, "product sample needs at least two points");
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < *sample; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, full - 1);
      std::swap(grid[k], grid[pick(rng)]);
    }
    grid.resize(*sample);
    std::sort(grid.begin(), grid.end());
  }
  std::vector<std::size_t> ia, ib;
  std::vector<double> coords;
  coords.reserve(grid.size() * (a.chart_dim() + b.chart_dim()));
  for (std::size_t g : grid) {
    ia.push_back(g / b.size());
    ib.push_back(g % b.size());
    auto p = a.point(ia.back()), q = b.point(ib.back());
    coords.insert(coords.end(), p.begin(), p.end());
    coords.insert(coords.end(), q.begin(), q.end());
  }
  TimeWindow w{std::max(a.window().lo, b.window().lo), std::min(a.window().hi, b.window().hi)};
  nlohmann::json js = {{"kind", "product"}, {"factors", {a.spec(), b.spec()}}};
  if (sample) js["sample"] = *sample, js["seed"] = seed;
  auto model = std::make_shared<detail::ProductModel>(a, b, std::move(ia), std::move(ib));
  return FlowSpace(SpaceKind::custom, a.chart_dim() + b.chart_dim(), std::move(coords), w,
                   std::max(a.log_lipschitz(), b.log_lipschitz()),
                   std::max(a.metric_tol(), b.metric_tol()), std::move(model), std::move(js));
}

// Tabulated space: per-time distance matrices and masses, validated against the metric axioms
// at every tabulated time (tolerance 1e-6).
inline FlowSpace build_tabulated(std::vector<double> coords, std::size_t chart_dim,
                                 std::vector<double> times, std::vector<Eigen::MatrixXd> dist,
                                 std::vector<Eigen::VectorXd> mass, double log_lipschitz,
                                 int dimension, nlohmann::json spec) {
  if (times.empty()) throw Error(ErrorKind::schema, "times must be non-empty");
  if (dist.size() != times.size() || mass.size() != times.size())
    throw Error(ErrorKind::schema, "dist and mass need one entry per time");
  for (std::size_t k = 1; k < times.size(); ++k)
    if (!(times[k] > times[k - 1])) throw Error(ErrorKind::schema, "times must be increasing");
  const std::size_t n = dist.front().rows();
  for (std::size_t k = 0; k < times.size(); ++k) {
    if (static_cast<std::size_t>(dist[k].rows()) != n || static_cast<std::size_t>(dist[k].cols()) != n ||
        static_cast<std::size_t>(mass[k].size()) != n)
      throw Error(ErrorKind::schema, "inconsistent matrix sizes at time index " + std::to_string(k));
  }
  if (chart_dim == 0 || coords.size() != n * chart_dim)
    throw Error(ErrorKind::schema, "points do not match the distance matrix size");
  TimeWindow window{times.front(), times.back()};
  auto model = std::make_shared<detail::TabulatedModel>(times, dist, mass, dimension);
  FlowSpace space(SpaceKind::custom, chart_dim, std::move(coords), window, log_lipschitz, 1e-6,
                  std::move(model), std::move(spec));
  for (double t : times) {
    MetricCheck mc = check_metric_axioms(space, t, 400, 100000, 0);
    if (!mc.ok)
      throw Error(ErrorKind::metric_axiom,
                  mc.message + " at t = " + std::to_string(t) + " for triple (" +
                      std::to_string(mc.i) + "," + std::to_string(mc.j) + "," +
                      std::to_string(mc.k) + ")");
  }
  const double L = estimate_log_lipschitz(space, times, std::min<std::size_t>(2000, n * n), 0);
  if (times.size() > 1 && L > log_lipschitz * (1.0 + 1e-9) + 1e-12)
    throw Error(ErrorKind::metric_axiom, "declared log_lipschitz " + std::to_string(log_lipschitz) +
                                             " is below the observed " + std::to_string(L));
  return space;
}

}  // namespace rfprobe

#endif  // RFPROBE_MODELS_HPP
