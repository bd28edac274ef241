#ifndef RFPROBE_TRANSPORT_HPP
#define RFPROBE_TRANSPORT_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rfprobe/error.hpp"
#include "rfprobe/flowspace.hpp"
#include "rfprobe/network_simplex.hpp"

namespace rfprobe {

class DiscreteMeasure {
 public:
  DiscreteMeasure() = default;

  // Validates nonnegativity and unit total (within 1e-12).
  DiscreteMeasure(double t, Eigen::VectorXd weights) : t_(t), w_(std::move(weights)) {
    if (w_.size() == 0) throw Error(ErrorKind::invalid_input, "empty measure");
    if ((w_.array() < 0.0).any()) throw Error(ErrorKind::invalid_input, "negative measure weight");
    if (std::abs(w_.sum() - 1.0) > 1e-12)
      throw Error(ErrorKind::invalid_input, "measure weights must sum to 1");
  }

  static DiscreteMeasure dirac(double t, std::size_t n, std::size_t i) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    w(static_cast<Eigen::Index>(i)) = 1.0;
    return DiscreteMeasure(t, std::move(w));
  }

  // Clamps negatives to zero and rescales to unit total.
  static DiscreteMeasure normalized(double t, Eigen::VectorXd w) {
    w = w.cwiseMax(0.0);
    const double s = w.sum();
    if (!(s > 0.0)) throw Error(ErrorKind::invalid_input, "measure has zero total mass");
    w /= s;
    return DiscreteMeasure(t, std::move(w));
  }

  double t() const { return t_; }
  std::size_t size() const { return static_cast<std::size_t>(w_.size()); }
  const Eigen::VectorXd& weights() const { return w_; }
  double operator[](std::size_t i) const { return w_(static_cast<Eigen::Index>(i)); }

  std::vector<std::size_t> support(double threshold = 0.0) const {
    std::vector<std::size_t> s;
    for (Eigen::Index i = 0; i < w_.size(); ++i)
      if (w_(i) > threshold) s.push_back(static_cast<std::size_t>(i));
    return s;
  }

 private:
  double t_ = 0.0;
  Eigen::VectorXd w_;
};

enum class TransportMethod { exact, entropic };

struct TransportOptions {
  TransportMethod method = TransportMethod::exact;
  std::optional<double> lambda;      // entropic regularization; default 1e-3 * median cost
  std::size_t max_iterations = 100000;
  double marginal_tol = 1e-9;
  double truncation = 1e-15;         // atoms below this weight are dropped before solving
};

struct CouplingEntry {
  std::size_t i;
  std::size_t j;
  double w;
};

struct TransportPlan {
  double t = 0.0;
  std::string method = "exact";
  std::vector<CouplingEntry> coupling;  // sparse, sorted by (i, j)
  double w2 = 0.0;                      // squared distance (unhalved)
  std::vector<std::size_t> support_mu, support_nu;
  Eigen::VectorXd phi, psi;             // half-cost potentials on the supports
  double primal = 0.0;                  // half-cost primal value
  double dual = 0.0;                    // half-cost dual value
  double gap = 0.0;
  double lambda = 0.0;
  double lambda_bias_bound = 0.0;       // bound on entropic minus exact W^2
  std::size_t iterations = 0;
  double marginal_residual = 0.0;

  double w() const { return std::sqrt(std::max(0.0, w2)); }
};

namespace detail {

struct Supports {
  std::vector<std::size_t> mu, nu;
  Eigen::VectorXd a, b;
};

inline Supports reduce_supports(const DiscreteMeasure& mu, const DiscreteMeasure& nu, double cut) {
  Supports s;
  const double mu_max = mu.weights().maxCoeff(), nu_max = nu.weights().maxCoeff();
  s.mu = mu.support(cut * mu_max);
  s.nu = nu.support(cut * nu_max);
  s.a.resize(static_cast<Eigen::Index>(s.mu.size()));
  s.b.resize(static_cast<Eigen::Index>(s.nu.size()));
  for (std::size_t k = 0; k < s.mu.size(); ++k) s.a(static_cast<Eigen::Index>(k)) = mu[s.mu[k]];
  for (std::size_t k = 0; k < s.nu.size(); ++k) s.b(static_cast<Eigen::Index>(k)) = nu[s.nu[k]];
  s.a /= s.a.sum();
  s.b /= s.b.sum();
  return s;
}

inline Eigen::MatrixXd half_cost(const FlowSpace& space, double t, const Supports& s) {
  Eigen::MatrixXd C(s.a.size(), s.b.size());
  for (std::size_t i = 0; i < s.mu.size(); ++i)
    for (std::size_t j = 0; j < s.nu.size(); ++j) {
      const double d = space.distance(t, s.mu[i], s.nu[j]);
      C(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 0.5 * d * d;
    }
  return C;
}

// Double c-transform: makes (phi, psi) exactly feasible without lowering the dual value,
// then fixes phi(first support point) = 0.
inline void tighten_potentials(const Eigen::MatrixXd& C, Eigen::VectorXd& phi, Eigen::VectorXd& psi) {
  for (Eigen::Index j = 0; j < C.cols(); ++j) psi(j) = (C.col(j) - phi).minCoeff();
  for (Eigen::Index i = 0; i < C.rows(); ++i)
    phi(i) = (C.row(i).transpose() - psi).minCoeff();
  const double shift = phi(0);
  phi.array() -= shift;
  psi.array() += shift;
}

inline double median_of(std::vector<double> v) {
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

// Log-domain Sinkhorn with regularization annealing, followed by a rounding step that
// projects the iterate onto the exact transport polytope.
inline Eigen::MatrixXd sinkhorn_plan(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                                     const Eigen::MatrixXd& C, double lambda,
                                     std::size_t max_iter, double tol, std::size_t& iterations,
                                     double& residual) {
  const Eigen::Index n1 = C.rows(), n2 = C.cols();
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n1), g = Eigen::VectorXd::Zero(n2);
  const Eigen::VectorXd la = a.array().log(), lb = b.array().log();
  double eps = std::max(lambda, C.maxCoeff());
  // intermediate stages must resolve the smallest marginal atom, or later stages start with
  // underflowed entries
  const double stage_tol = std::max(tol, 1e-3 * std::min(a.minCoeff(), b.minCoeff()));
  iterations = 0;
  residual = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd P(n1, n2);
  auto plan = [&](double e) {
    for (Eigen::Index i = 0; i < n1; ++i)
      for (Eigen::Index j = 0; j < n2; ++j) P(i, j) = std::exp((f(i) + g(j) - C(i, j)) / e);
  };
  Eigen::VectorXd tmp1(n2), tmp2(n1);
  auto column_update = [&](double e) {
    for (Eigen::Index j = 0; j < n2; ++j) {
      tmp2 = (f - C.col(j)) / e;
      g(j) = e * (lb(j) - log_sum_exp(tmp2));
    }
  };
  auto row_sums = [&](double e) {
    Eigen::VectorXd r(n1);
    for (Eigen::Index i = 0; i < n1; ++i) {
      tmp1 = (g - C.row(i).transpose()).array() / e + f(i) / e;
      r(i) = std::exp(log_sum_exp(tmp1));
    }
    return r;
  };
  // Newton steps on the semi-dual in f (columns kept exact). Used once plain sweeps stall on
  // nearly degenerate plans.
  auto newton = [&](std::size_t cap) {
    for (std::size_t it = 0; it < cap && iterations < max_iter; ++it, ++iterations) {
      column_update(lambda);
      plan(lambda);
      const Eigen::VectorXd r = P.rowwise().sum();
      residual = (r - a).cwiseAbs().sum();
      if (residual <= tol) return;
      Eigen::MatrixXd H = -P * b.cwiseInverse().asDiagonal() * P.transpose();
      H.diagonal() += r;
      H.diagonal().array() += 1e-13 * r.maxCoeff();
      const Eigen::VectorXd step = H.ldlt().solve(lambda * (a - r));
      if (!step.allFinite()) return;
      const Eigen::VectorXd f0 = f, g0 = g;
      double alpha = 1.0;
      bool improved = false;
      for (int k = 0; k < 40; ++k, alpha *= 0.5) {
        f = f0 + alpha * step;
        column_update(lambda);
        if ((row_sums(lambda) - a).cwiseAbs().sum() < residual) {
          improved = true;
          break;
        }
      }
      if (!improved) {
        f = f0;
        g = g0;
        return;
      }
    }
  };
  while (true) {
    const bool final_stage = eps <= lambda;
    const std::size_t stage_cap = final_stage ? std::min<std::size_t>(max_iter, 2000) : 2000;
    for (std::size_t it = 0; it < stage_cap && iterations < max_iter; ++it, ++iterations) {
      for (Eigen::Index i = 0; i < n1; ++i) {
        tmp1 = (g - C.row(i).transpose()) / eps;
        f(i) = eps * (la(i) - log_sum_exp(tmp1));
      }
      for (Eigen::Index j = 0; j < n2; ++j) {
        tmp2 = (f - C.col(j)) / eps;
        g(j) = eps * (lb(j) - log_sum_exp(tmp2));
      }
      if (it % 10 == 9 || final_stage) {
        // columns are exact after the g update; measure the row residual
        double r = 0.0;
        for (Eigen::Index i = 0; i < n1; ++i) {
          tmp1 = (g - C.row(i).transpose()).array() / eps + f(i) / eps;
          r += std::abs(std::exp(log_sum_exp(tmp1)) - a(i));
        }
        residual = r;
        if (r <= (final_stage ? tol : stage_tol)) break;
      }
    }
    if (final_stage || iterations >= max_iter) break;
    eps = std::max(lambda, 0.5 * eps);
  }
  if (residual > tol && iterations < max_iter) newton(100);
  // plain sweeps for whatever budget remains
  while (residual > tol && iterations < max_iter) {
    for (Eigen::Index i = 0; i < n1; ++i) {
      tmp1 = (g - C.row(i).transpose()) / lambda;
      f(i) = lambda * (la(i) - log_sum_exp(tmp1));
    }
    column_update(lambda);
    ++iterations;
    residual = (row_sums(lambda) - a).cwiseAbs().sum();
  }
  if (residual > tol)
    throw Error(ErrorKind::convergence_failure,
                "Sinkhorn did not converge: marginal residual " + std::to_string(residual));
  plan(lambda);
  // rounding onto the polytope (rows then columns, then rank-one correction)
  Eigen::VectorXd rs = P.rowwise().sum();
  for (Eigen::Index i = 0; i < n1; ++i)
    if (rs(i) > a(i)) P.row(i) *= a(i) / rs(i);
  Eigen::VectorXd cs = P.colwise().sum();
  for (Eigen::Index j = 0; j < n2; ++j)
    if (cs(j) > b(j)) P.col(j) *= b(j) / cs(j);
  const Eigen::VectorXd ea = a - P.rowwise().sum();
  const Eigen::VectorXd eb = b - P.colwise().sum().transpose();
  const double mass = ea.sum();
  if (mass > 0.0) P += ea * eb.transpose() / mass;
  return P;
}

}  // namespace detail

// W_t^2(mu, nu) with cost d_t^2/2 internally. The exact method uses the network simplex; the
// entropic method returns the (rounded) Sinkhorn coupling, an upper bound on the exact cost.
inline TransportPlan w2(const FlowSpace& space, double t, const DiscreteMeasure& mu,
                        const DiscreteMeasure& nu, const TransportOptions& opts = {}) {
  if (mu.size() != space.size() || nu.size() != space.size())
    throw Error(ErrorKind::invalid_input, "measure size does not match the space");
  if (std::abs(mu.weights().sum() - nu.weights().sum()) > 1e-9)
    throw Error(ErrorKind::invalid_input, "mass mismatch between marginals");
  detail::Supports s = detail::reduce_supports(mu, nu, opts.truncation);
  const Eigen::MatrixXd C = detail::half_cost(space, t, s);

  TransportPlan plan;
  plan.t = t;
  plan.support_mu = s.mu;
  plan.support_nu = s.nu;

  if (opts.method == TransportMethod::exact) {
    detail::TransportSimplex solver(s.a, s.b, C);
    detail::SimplexResult r = solver.solve();
    plan.iterations = r.pivots;
    plan.phi = r.u;
    plan.psi = r.v;
    for (auto [i, j, x] : r.flows) plan.coupling.push_back({s.mu[i], s.nu[j], x});
    plan.primal = r.cost;
  } else {
    std::vector<double> costs(C.data(), C.data() + C.size());
    const double lambda = opts.lambda.value_or(1e-3 * std::max(detail::median_of(costs), 1e-300));
    double residual = 0.0;
    Eigen::MatrixXd P = detail::sinkhorn_plan(s.a, s.b, C, lambda, opts.max_iterations,
                                              opts.marginal_tol, plan.iterations, residual);
    plan.method = "entropic";
    plan.lambda = lambda;
    plan.lambda_bias_bound =
        2.0 * lambda * std::log(static_cast<double>(s.a.size()) * static_cast<double>(s.b.size()));
    const double keep = 1e-300;
    plan.primal = 0.0;
    for (Eigen::Index i = 0; i < P.rows(); ++i)
      for (Eigen::Index j = 0; j < P.cols(); ++j) {
        if (P(i, j) <= keep) continue;
        plan.coupling.push_back({s.mu[i], s.nu[j], P(i, j)});
        plan.primal += P(i, j) * C(i, j);
      }
    // dual certificate from the exact solver's structure is not available; use c-transforms
    plan.phi = Eigen::VectorXd::Zero(s.a.size());
    plan.psi = Eigen::VectorXd::Zero(s.b.size());
  }
  detail::tighten_potentials(C, plan.phi, plan.psi);
  plan.dual = s.a.dot(plan.phi) + s.b.dot(plan.psi);
  plan.gap = plan.primal - plan.dual;
  plan.w2 = 2.0 * plan.primal;

  Eigen::VectorXd rows = Eigen::VectorXd::Zero(s.a.size()), cols = Eigen::VectorXd::Zero(s.b.size());
  std::vector<std::size_t> mu_pos(space.size(), 0), nu_pos(space.size(), 0);
  for (std::size_t k = 0; k < s.mu.size(); ++k) mu_pos[s.mu[k]] = k;
  for (std::size_t k = 0; k < s.nu.size(); ++k) nu_pos[s.nu[k]] = k;
  for (const auto& e : plan.coupling) {
    rows(static_cast<Eigen::Index>(mu_pos[e.i])) += e.w;
    cols(static_cast<Eigen::Index>(nu_pos[e.j])) += e.w;
  }
  plan.marginal_residual = std::max((rows - s.a).cwiseAbs().maxCoeff(), (cols - s.b).cwiseAbs().maxCoeff());
  return plan;
}

// Sum_i mu(i) log(mu(i)/m_t(i)) with 0 log 0 = 0.
inline double entropy(const FlowSpace& space, double t, const DiscreteMeasure& mu) {
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double w = mu[i];
    if (w > 0.0) acc += w * std::log(w / space.mass(t, i));
  }
  return acc;
}

// Indices of the two samples nearest to a chart point (second may equal first for N = 1).
inline std::pair<std::size_t, std::size_t> two_nearest(const FlowSpace& space, double t,
                                                       ConstPoint p, double& d1, double& d2) {
  d1 = d2 = std::numeric_limits<double>::infinity();
  std::size_t i1 = 0, i2 = 0;
  for (std::size_t k = 0; k < space.size(); ++k) {
    const double d = space.point_distance(t, p, space.point(k));
    if (d < d1) {
      d2 = d1;
      i2 = i1;
      d1 = d;
      i1 = k;
    } else if (d < d2) {
      d2 = d;
      i2 = k;
    }
  }
  return {i1, i2};
}

// mu^a: each coupling atom is moved to geodesic(t, i, j, a) and split between the two nearest
// samples with inverse-distance weights.
inline DiscreteMeasure displacement_interpolate(const FlowSpace& space, double t,
                                                const TransportPlan& plan, double a) {
  if (!space.has_geodesic() || !space.has_chart_metric())
    throw Error(ErrorKind::unsupported, "displacement interpolation needs a geodesic evaluator");
  if (a < 0.0 || a > 1.0) throw Error(ErrorKind::invalid_input, "interpolation parameter outside [0,1]");
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(space.size()));
  std::string excluded;
  for (const auto& e : plan.coupling) {
    if (a == 0.0) { w(static_cast<Eigen::Index>(e.i)) += e.w; continue; }
    if (a == 1.0) { w(static_cast<Eigen::Index>(e.j)) += e.w; continue; }
    auto g = space.geodesic(t, e.i, e.j, a);
    if (!g) {
      excluded += " (" + std::to_string(e.i) + "," + std::to_string(e.j) + ")";
      continue;
    }
    double d1 = 0, d2 = 0;
    auto [i1, i2] = two_nearest(space, t, *g, d1, d2);
    if (d1 == 0.0 || i1 == i2) {
      w(static_cast<Eigen::Index>(i1)) += e.w;
    } else {
      const double w1 = 1.0 / d1, w2v = 1.0 / d2;
      w(static_cast<Eigen::Index>(i1)) += e.w * w1 / (w1 + w2v);
      w(static_cast<Eigen::Index>(i2)) += e.w * w2v / (w1 + w2v);
    }
  }
  if (!excluded.empty())
    throw Error(ErrorKind::excluded_pair, "geodesic through excluded locus for atoms" + excluded);
  return DiscreteMeasure::normalized(t, std::move(w));
}

struct LeftDerivative {
  std::vector<double> h;
  std::vector<double> quotients;  // (W_t^2 - W_{t-h}^2)/h
  double w2_t = 0.0;
  double extrapolant = 0.0;
  bool non_monotone = false;
};

// Upper left time derivative of W^2 for frozen weight vectors: the measures are re-costed
// at earlier times, not flowed. Richardson extrapolation assumes an O(h) error.
inline LeftDerivative dt_w2_left(const FlowSpace& space, double t, const DiscreteMeasure& mu,
                                 const DiscreteMeasure& nu, const std::vector<double>& h_seq,
                                 const TransportOptions& opts = {}) {
  if (h_seq.empty()) throw Error(ErrorKind::invalid_input, "empty step sequence");
  LeftDerivative out;
  out.h = h_seq;
  for (double h : h_seq)
    if (!(h > 0.0) || t - h < space.window().lo - 1e-12)
      throw Error(ErrorKind::invalid_input, "step leaves the time window");
  out.w2_t = w2(space, t, mu, nu, opts).w2;
  for (double h : h_seq) out.quotients.push_back((out.w2_t - w2(space, t - h, mu, nu, opts).w2) / h);
  const std::size_t n = out.quotients.size();
  if (n == 1) {
    out.extrapolant = out.quotients[0];
  } else {
    const double r = out.h[n - 2] / out.h[n - 1];
    out.extrapolant = (r * out.quotients[n - 1] - out.quotients[n - 2]) / (r - 1.0);
  }
  if (n >= 3) {
    const double noise = 1e-8 * (1.0 + std::abs(out.extrapolant));
    int sign = 0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      const double d = out.quotients[k + 1] - out.quotients[k];
      if (std::abs(d) <= noise) continue;
      const int s = d > 0 ? 1 : -1;
      if (sign != 0 && s != sign) out.non_monotone = true;
      sign = s;
    }
  }
  return out;
}

inline nlohmann::json plan_to_json(const TransportPlan& plan) {
  nlohmann::json coupling = nlohmann::json::array();
  for (const auto& e : plan.coupling) coupling.push_back({e.i, e.j, e.w});
  return {{"t", plan.t},
          {"method", plan.method},
          {"w2", plan.w2},
          {"primal_half_cost", plan.primal},
          {"dual_half_cost", plan.dual},
          {"duality_gap", plan.gap},
          {"support_mu", plan.support_mu},
          {"support_nu", plan.support_nu},
          {"phi", std::vector<double>(plan.phi.data(), plan.phi.data() + plan.phi.size())},
          {"psi", std::vector<double>(plan.psi.data(), plan.psi.data() + plan.psi.size())},
          {"lambda", plan.lambda},
          {"lambda_bias_bound", plan.lambda_bias_bound},
          {"iterations", plan.iterations},
          {"marginal_residual", plan.marginal_residual},
          {"coupling", coupling}};
}

}  // namespace rfprobe

#endif  // RFPROBE_TRANSPORT_HPP
