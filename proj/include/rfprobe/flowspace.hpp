#ifndef RFPROBE_FLOWSPACE_HPP
#define RFPROBE_FLOWSPACE_HPP

#include <Eigen/Dense>
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfprobe/error.hpp"

namespace rfprobe {

enum class SpaceKind { gaussian, sphere, cone, suspension, custom };

inline const char* to_string(SpaceKind kind) {
  switch (kind) {
    case SpaceKind::gaussian: return "gaussian";
    case SpaceKind::sphere: return "sphere";
    case SpaceKind::cone: return "cone";
    case SpaceKind::suspension: return "suspension";
    case SpaceKind::custom: return "custom";
  }
  return "custom";
}

using Coords = std::vector<double>;
using ConstPoint = std::span<const double>;

inline constexpr double kInfiniteN = std::numeric_limits<double>::infinity();

struct TimeWindow {
  double lo = 0.0;
  double hi = 1.0;
  bool contains(double t) const { return t >= lo - 1e-12 && t <= hi + 1e-12; }
};

// Bilinear data of (1/2 d/dt g + Ric_{N,f}) at a chart point, in the tangent basis `basis`
// (columns are chart-coordinate vectors). value(v) = c'Bc / c'Gc where basis*c = v.
struct TensorForm {
  Eigen::MatrixXd basis;
  Eigen::MatrixXd B;
  Eigen::MatrixXd G;
};

namespace detail {

class SpaceModel {
 public:
  virtual ~SpaceModel() = default;

  virtual double distance(double t, std::size_t i, std::size_t j) const = 0;
  virtual double mass(double t, std::size_t i) const = 0;
  virtual bool is_static() const = 0;
  virtual int intrinsic_dimension() const = 0;

  virtual bool has_chart_metric() const { return false; }
  virtual double chart_distance(double, ConstPoint, ConstPoint) const {
    throw Error(ErrorKind::unsupported, "space has no chart metric");
  }

  virtual bool has_geodesic() const { return false; }
  // nullopt when the connecting geodesic is excluded (cone apex, antipodes).
  virtual std::optional<Coords> geodesic(double, ConstPoint, ConstPoint, double) const {
    throw Error(ErrorKind::unsupported, "space has no geodesic evaluator");
  }

  virtual bool has_tensor() const { return false; }
  virtual TensorForm tensor_form(double, ConstPoint, double) const {
    throw Error(ErrorKind::unsupported, "space has no tensor evaluator");
  }

  virtual std::vector<std::size_t> distinguished_points() const { return {}; }

  // False for samples near an artificial truncation boundary; pair samplers skip those.
  virtual bool in_core(std::size_t) const { return true; }
};

}  // namespace detail

class FlowSpace {
 public:
  FlowSpace() = default;
  FlowSpace(SpaceKind kind, std::size_t chart_dim, std::vector<double> coords, TimeWindow window,
            double log_lipschitz, double metric_tol,
            std::shared_ptr<const detail::SpaceModel> model, nlohmann::json spec)
      : kind_(kind),
        chart_dim_(chart_dim),
        coords_(std::move(coords)),
        window_(window),
        log_lipschitz_(log_lipschitz),
        metric_tol_(metric_tol),
        model_(std::move(model)),
        spec_(std::move(spec)) {
    if (chart_dim_ == 0 || coords_.size() % chart_dim_ != 0)
      throw Error(ErrorKind::invalid_spec, "coordinate array does not match chart dimension");
    if (window_.hi < window_.lo) throw Error(ErrorKind::invalid_spec, "empty time window");
  }

  SpaceKind kind() const { return kind_; }
  std::size_t size() const { return chart_dim_ == 0 ? 0 : coords_.size() / chart_dim_; }
  std::size_t chart_dim() const { return chart_dim_; }
  const TimeWindow& window() const { return window_; }
  double log_lipschitz() const { return log_lipschitz_; }
  double metric_tol() const { return metric_tol_; }
  const nlohmann::json& spec() const { return spec_; }
  bool is_static() const { return model_->is_static(); }
  int intrinsic_dimension() const { return model_->intrinsic_dimension(); }

  ConstPoint point(std::size_t i) const {
    return ConstPoint(coords_.data() + i * chart_dim_, chart_dim_);
  }

  double distance(double t, std::size_t i, std::size_t j) const {
    if (i == j) return 0.0;
    return model_->distance(t, i, j);
  }
  double mass(double t, std::size_t i) const { return model_->mass(t, i); }

  Eigen::MatrixXd distance_matrix(double t) const {
    const std::size_t n = size();
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = model_->distance(t, i, j);
    return d;
  }

  Eigen::VectorXd masses(double t) const {
    Eigen::VectorXd m(size());
    for (std::size_t i = 0; i < size(); ++i) m(i) = model_->mass(t, i);
    return m;
  }

  bool has_chart_metric() const { return model_->has_chart_metric(); }
  double point_distance(double t, ConstPoint p, ConstPoint q) const {
    return model_->chart_distance(t, p, q);
  }

  bool has_geodesic() const { return model_->has_geodesic(); }
  std::optional<Coords> geodesic_between(double t, ConstPoint p, ConstPoint q, double a) const {
    return model_->geodesic(t, p, q, a);
  }
  std::optional<Coords> geodesic(double t, std::size_t i, std::size_t j, double a) const {
    return model_->geodesic(t, point(i), point(j), a);
  }

  bool has_tensor() const { return model_->has_tensor(); }
  TensorForm tensor_form(double t, ConstPoint p, double N = kInfiniteN) const {
    return model_->tensor_form(t, p, N);
  }

  std::vector<std::size_t> distinguished_points() const { return model_->distinguished_points(); }

  bool in_core(std::size_t i) const { return model_->in_core(i); }
  std::vector<std::size_t> core_points() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (model_->in_core(i)) out.push_back(i);
    return out;
  }

  // Nearest-neighbour distance of sample i at time t.
  double local_spacing(double t, std::size_t i) const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < size(); ++j)
      if (j != i) best = std::min(best, model_->distance(t, i, j));
    return best;
  }

  // Median nearest-neighbour spacing; large samples use a fixed stride subsample.
  double median_spacing(double t) const {
    const std::size_t n = size();
    if (n < 2) throw Error(ErrorKind::invalid_input, "spacing needs at least two points");
    const std::size_t stride = n > 2048 ? n / 512 : 1;
    std::vector<double> nn;
    for (std::size_t i = 0; i < n; i += stride) nn.push_back(local_spacing(t, i));
    auto mid = nn.begin() + static_cast<std::ptrdiff_t>(nn.size() / 2);
    std::nth_element(nn.begin(), mid, nn.end());
    return *mid;
  }

  // Indices within distance r of sample i (including i).
  std::vector<std::size_t> ball(double t, std::size_t i, double r) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < size(); ++j)
      if (distance(t, i, j) <= r) out.push_back(j);
    return out;
  }

 private:
  SpaceKind kind_ = SpaceKind::custom;
  std::size_t chart_dim_ = 0;
  std::vector<double> coords_;
  TimeWindow window_;
  double log_lipschitz_ = 0.0;
  double metric_tol_ = 1e-9;
  std::shared_ptr<const detail::SpaceModel> model_;
  nlohmann::json spec_;
};

// (1/2 d/dt g + Ric_{N,f})(v,v) / g(v,v) at a chart point.
inline double analytic_tensor(const FlowSpace& space, double t, ConstPoint point, ConstPoint v,
                              double N = kInfiniteN) {
  if (!space.has_tensor()) throw Error(ErrorKind::unsupported, "space has no tensor evaluator");
  TensorForm form = space.tensor_form(t, point, N);
  Eigen::Map<const Eigen::VectorXd> vv(v.data(), static_cast<Eigen::Index>(v.size()));
  if (vv.size() != form.basis.rows())
    throw Error(ErrorKind::invalid_input, "tangent vector has wrong dimension");
  Eigen::VectorXd c = form.basis.colPivHouseholderQr().solve(vv);
  const double denom = c.dot(form.G * c);
  if (!(denom > 0.0)) throw Error(ErrorKind::invalid_input, "tangent vector must be nonzero");
  return c.dot(form.B * c) / denom;
}

struct MetricCheck {
  bool ok = true;
  std::string message;
  double t = 0.0;
  std::size_t i = 0, j = 0, k = 0;
  double worst_excess = -std::numeric_limits<double>::infinity();
  std::size_t triples_checked = 0;
};

// Checks symmetry, positivity, identity of indiscernibles and the triangle inequality at
// time t: exhaustive for at most `exhaustive_limit` points, otherwise `random_triples` draws.
inline MetricCheck check_metric_axioms(const FlowSpace& space, double t,
                                       std::size_t exhaustive_limit = 300,
                                       std::size_t random_triples = 10000,
                                       std::uint64_t seed = 0) {
  MetricCheck out;
  out.t = t;
  const std::size_t n = space.size();
  const double tol = space.metric_tol();
  auto fail = [&](std::string msg, std::size_t i, std::size_t j, std::size_t k) {
    out.ok = false;
    out.message = std::move(msg);
    out.i = i;
    out.j = j;
    out.k = k;
  };

  if (n <= exhaustive_limit) {
    Eigen::MatrixXd d = space.distance_matrix(t);
    for (std::size_t i = 0; i < n && out.ok; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double a = space.distance(t, i, j), b = space.distance(t, j, i);
        if (std::abs(a - b) > tol) {
          fail("asymmetric distance", i, j, j);
          break;
        }
        if (!(a > 0.0)) {
          fail("non-positive distance between distinct points", i, j, j);
          break;
        }
      }
    for (std::size_t i = 0; i < n && out.ok; ++i)
      for (std::size_t j = 0; j < n && out.ok; ++j)
        for (std::size_t k = 0; k < n; ++k) {
          const double excess = d(i, k) - d(i, j) - d(j, k);
          ++out.triples_checked;
          out.worst_excess = std::max(out.worst_excess, excess);
          if (excess > tol) {
            fail("triangle inequality violated", i, j, k);
            break;
          }
        }
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t r = 0; r < random_triples; ++r) {
      const std::size_t i = pick(rng), j = pick(rng), k = pick(rng);
      const double dij = space.distance(t, i, j), djk = space.distance(t, j, k);
      const double dik = space.distance(t, i, k);
      if (std::abs(dij - space.distance(t, j, i)) > tol) {
        fail("asymmetric distance", i, j, j);
        break;
      }
      if (i != j && !(dij > 0.0)) {
        fail("non-positive distance between distinct points", i, j, j);
        break;
      }
      const double excess = dik - dij - djk;
      ++out.triples_checked;
      out.worst_excess = std::max(out.worst_excess, excess);
      if (excess > tol) {
        fail("triangle inequality violated", i, j, k);
        break;
      }
    }
  }
  if (out.ok) {
    for (std::size_t i = 0; i < n; ++i)
      if (!(space.mass(t, i) > 0.0)) {
        fail("non-positive mass", i, i, i);
        break;
      }
  }
  return out;
}

// Largest observed |log d_t - log d_s| / |t - s| over adjacent grid times and sampled pairs.
inline double estimate_log_lipschitz(const FlowSpace& space, const std::vector<double>& times,
                                     std::size_t pair_samples = 2000, std::uint64_t seed = 0) {
  const std::size_t n = space.size();
  if (n < 2 || times.size() < 2) return 0.0;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  while (pairs.size() < pair_samples) {
    const std::size_t i = pick(rng), j = pick(rng);
    if (i != j) pairs.emplace_back(i, j);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k + 1 < times.size(); ++k) {
    const double dt = times[k + 1] - times[k];
    if (!(dt > 0.0)) continue;
    for (auto [i, j] : pairs) {
      const double a = space.distance(times[k], i, j), b = space.distance(times[k + 1], i, j);
      worst = std::max(worst, std::abs(std::log(b) - std::log(a)) / dt);
    }
  }
  return worst;
}

}  // namespace rfprobe

#endif  // RFPROBE_FLOWSPACE_HPP
