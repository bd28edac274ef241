#ifndef RFPROBE_HEAT_HPP
#define RFPROBE_HEAT_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rfprobe/error.hpp"
#include "rfprobe/flowspace.hpp"
#include "rfprobe/transport.hpp"

namespace rfprobe {

struct Generator {
  double t = 0.0;
  double bandwidth = 0.0;
  Eigen::MatrixXd Q;       // rate matrix, rows sum to zero
  Eigen::VectorXd masses;  // m_t
};

// Kernel graph Laplacian with symmetric degree normalization:
//   Q(i,j) = (4/eps^2) K(i,j) m(j) / sqrt(D(i) D(j)),  K = exp(-d^2/eps^2),  D = K m.
// The normalization removes the density factor so the limit operator is Delta - grad f . grad
// for m = e^{-f} vol; Q is m-symmetric and its rows sum to zero.
inline Generator build_generator(const FlowSpace& space, double t, double bandwidth,
                                 const Eigen::MatrixXd* distances = nullptr) {
  const double spacing = space.median_spacing(t);
  if (!(bandwidth >= 2.0 * spacing * (1.0 - 1e-12)))
    throw Error(ErrorKind::ill_conditioned,
                "bandwidth " + std::to_string(bandwidth) + " is below resolution; minimum " +
                    std::to_string(2.0 * spacing));
  const Eigen::Index n = static_cast<Eigen::Index>(space.size());
  Generator g;
  g.t = t;
  g.bandwidth = bandwidth;
  g.masses = space.masses(t);
  Eigen::MatrixXd K = distances ? *distances : space.distance_matrix(t);
  const double inv = 1.0 / (bandwidth * bandwidth);
  K = (-K.array().square() * inv).exp().matrix();
  const Eigen::VectorXd D = K * g.masses;
  const Eigen::VectorXd s = D.cwiseSqrt().cwiseInverse();
  g.Q = (4.0 * inv) * (s.asDiagonal() * K * (g.masses.cwiseProduct(s)).asDiagonal());
  g.Q.diagonal().setZero();
  const Eigen::VectorXd rows = g.Q.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) g.Q(i, i) = -rows(i);
  return g;
}

struct StepControl {
  double rtol = 1e-8;
  double atol = 1e-12;
  int node_level = 10;          // cached generator nodes at multiples of 2^-node_level
  std::size_t max_steps = 2'000'000;
  double min_step = 1e-14;
};

struct HeatOptions {
  std::optional<double> bandwidth;  // default 3 x median nearest-neighbour spacing at t
  StepControl step;
};

struct PropagatorKernel {
  double s = 0.0;
  double t = 0.0;
  Eigen::MatrixXd p;               // rows: start point at t, columns: target at s
  double min_entry_before_clamp = 0.0;
  double max_row_sum_deviation = 0.0;
  std::size_t steps = 0;
  std::size_t rejected = 0;
};

// Generators on a dyadic time grid with linear interpolation in between. A fill is exclusive
// per key; concurrent readers wait for the filling thread.
class GeneratorCache {
 public:
  using Ptr = std::shared_ptr<const Generator>;

  GeneratorCache(const FlowSpace& space, int level) : space_(&space), level_(level) {}

  Ptr node(long long k, double bandwidth) {
    const double t = space_->is_static() ? space_->window().lo : std::ldexp(static_cast<double>(k), -level_);
    const auto key = std::make_pair(space_->is_static() ? 0LL : k, bandwidth);
    std::shared_future<Ptr> fut;
    std::promise<Ptr> promise;
    bool fill = false;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = entries_.find(key);
      if (it == entries_.end()) {
        if (entries_.size() > 64) entries_.clear();
        fut = promise.get_future().share();
        entries_.emplace(key, fut);
        fill = true;
      } else {
        fut = it->second;
      }
    }
    if (fill) {
      try {
        promise.set_value(std::make_shared<Generator>(build_generator(*space_, t, bandwidth)));
      } catch (...) {
        {
          std::lock_guard<std::mutex> lock(mu_);
          entries_.erase(key);
        }
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

  // Q at time r (interpolated between the bracketing grid nodes).
  Eigen::MatrixXd at(double r, double bandwidth, double* norm_bound) {
    if (space_->is_static()) {
      Ptr g = node(0, bandwidth);
      if (norm_bound) *norm_bound = 2.0 * g->Q.diagonal().cwiseAbs().maxCoeff();
      return g->Q;
    }
    const double scaled = std::ldexp(r, level_);
    const long long k = static_cast<long long>(std::floor(scaled));
    const double w = scaled - static_cast<double>(k);
    Ptr g0 = node(k, bandwidth);
    if (w <= 0.0) {
      if (norm_bound) *norm_bound = 2.0 * g0->Q.diagonal().cwiseAbs().maxCoeff();
      return g0->Q;
    }
    Ptr g1 = node(k + 1, bandwidth);
    if (norm_bound)
      *norm_bound = 2.0 * std::max(g0->Q.diagonal().cwiseAbs().maxCoeff(),
                                   g1->Q.diagonal().cwiseAbs().maxCoeff());
    return (1.0 - w) * g0->Q + w * g1->Q;
  }

  bool is_static() const { return space_->is_static(); }

 private:
  const FlowSpace* space_;
  int level_;
  std::mutex mu_;
  std::map<std::pair<long long, double>, std::shared_future<Ptr>> entries_;
};

struct IntegrationStats {
  std::size_t steps = 0;
  std::size_t rejected = 0;
};

// Heat flow on a FlowSpace. Rows of the propagator p_{t,s} solve d/dsigma M = M Q_{t-sigma}
// for sigma = t - s in [0, t - s], starting from the rows of interest at sigma = 0.
class HeatFlow {
 public:
  explicit HeatFlow(const FlowSpace& space, HeatOptions opts = {})
      : space_(&space), opts_(opts), cache_(std::make_shared<GeneratorCache>(space, opts.step.node_level)) {}

  const FlowSpace& space() const { return *space_; }
  const HeatOptions& options() const { return opts_; }

  double bandwidth(double t) const {
    if (opts_.bandwidth) return *opts_.bandwidth;
    std::lock_guard<std::mutex> lock(*bw_mu_);
    auto it = bw_cache_->find(t);
    if (it != bw_cache_->end()) return it->second;
    const double tb = space_->is_static() ? space_->window().lo : t;
    const double bw = 3.0 * space_->median_spacing(tb);
    bw_cache_->emplace(t, bw);
    return bw;
  }

  Generator generator(double t) const { return build_generator(*space_, t, bandwidth(t)); }

  // Rows propagated backward from t; returns the state at each requested s (descending order
  // of s is not required; results follow the input order).
  std::vector<Eigen::MatrixXd> propagate(double t, const Eigen::MatrixXd& rows,
                                         const std::vector<double>& s_values,
                                         IntegrationStats* stats = nullptr) const {
    for (double s : s_values) {
      if (s > t + 1e-15) throw Error(ErrorKind::invalid_input, "propagation requires s <= t");
      if (s < space_->window().lo - 1e-12 || t > space_->window().hi + 1e-12)
        throw Error(ErrorKind::invalid_input, "propagation leaves the time window");
    }
    const double bw = bandwidth(t);
    std::vector<std::size_t> order(s_values.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return s_values[a] > s_values[b];
    });
    std::vector<Eigen::MatrixXd> out(s_values.size());
    Eigen::MatrixXd M = rows;
    double sigma = 0.0;
    double h = 0.0;
    IntegrationStats local;
    for (std::size_t idx : order) {
      const double target = t - s_values[idx];
      integrate(t, bw, M, sigma, target, h, local);
      out[idx] = M;
    }
    if (stats) *stats = local;
    return out;
  }

  PropagatorKernel kernel(double t, double s) const {
    if (!(s <= t)) throw Error(ErrorKind::invalid_input, "kernel requires s <= t");
    const Eigen::Index n = static_cast<Eigen::Index>(space_->size());
    PropagatorKernel k;
    k.s = s;
    k.t = t;
    IntegrationStats st;
    k.p = propagate(t, Eigen::MatrixXd::Identity(n, n), {s}, &st)[0];
    k.steps = st.steps;
    k.rejected = st.rejected;
    k.min_entry_before_clamp = std::min(0.0, k.p.minCoeff());
    k.p = k.p.cwiseMax(0.0);
    k.max_row_sum_deviation = (k.p.rowwise().sum().array() - 1.0).abs().maxCoeff();
    return k;
  }

  DiscreteMeasure dual_flow(double t, double s, const DiscreteMeasure& mu) const {
    return dual_flow_path(t, {s}, mu)[0];
  }

  // Dual heat flow of mu evaluated at several earlier times in one integration.
  std::vector<DiscreteMeasure> dual_flow_path(double t, const std::vector<double>& s_values,
                                              const DiscreteMeasure& mu) const {
    auto states = propagate(t, mu.weights().transpose(), s_values);
    std::vector<DiscreteMeasure> out;
    for (std::size_t k = 0; k < states.size(); ++k)
      out.push_back(DiscreteMeasure::normalized(s_values[k], states[k].row(0).transpose()));
    return out;
  }

 private:
  void integrate(double t, double bw, Eigen::MatrixXd& M, double& sigma, double target,
                 double& h, IntegrationStats& stats) const {
    // Dormand-Prince 5(4)
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                            e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
    const StepControl& sc = opts_.step;
    const double span = target - sigma;
    if (span <= 0.0) return;
    auto rhs = [&](double sg, const Eigen::MatrixXd& X, double* bound) -> Eigen::MatrixXd {
      Eigen::MatrixXd Q = cache_->at(t - sg, bw, bound);
      return X * Q;
    };
    double bound = 0.0;
    Eigen::MatrixXd k1 = rhs(sigma, M, &bound);
    const double cap = bound > 0.0 ? 2.0 / bound : span;
    if (h <= 0.0) h = std::min(cap, span);
    std::size_t guard = 0;
    while (sigma < target) {
      if (++guard > sc.max_steps)
        throw Error(ErrorKind::integration_failure, "step budget exhausted at sigma = " + std::to_string(sigma));
      double step = std::min({h, cap, target - sigma});
      const bool last = step >= target - sigma;
      Eigen::MatrixXd k2 = rhs(sigma + c2 * step, M + step * (a21 * k1), nullptr);
      Eigen::MatrixXd k3 = rhs(sigma + c3 * step, M + step * (a31 * k1 + a32 * k2), nullptr);
      Eigen::MatrixXd k4 = rhs(sigma + c4 * step, M + step * (a41 * k1 + a42 * k2 + a43 * k3), nullptr);
      Eigen::MatrixXd k5 =
          rhs(sigma + c5 * step, M + step * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), nullptr);
      Eigen::MatrixXd k6 = rhs(sigma + step,
                               M + step * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), nullptr);
      Eigen::MatrixXd y = M + step * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
      double next_bound = 0.0;
      Eigen::MatrixXd k7 = rhs(sigma + step, y, &next_bound);
      Eigen::MatrixXd err = step * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
      const Eigen::ArrayXXd scale =
          sc.atol + sc.rtol * M.array().abs().max(y.array().abs());
      const double en = (err.array().abs() / scale).maxCoeff();
      if (en <= 1.0) {
        sigma = last ? target : sigma + step;
        M = std::move(y);
        k1 = std::move(k7);
        ++stats.steps;
        const double fac = en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
        if (!last) h = step * fac;
        else h = std::max(h, step * fac);
      } else {
        ++stats.rejected;
        h = step * std::clamp(0.9 * std::pow(en, -0.2), 0.1, 0.5);
        if (h < sc.min_step)
          throw Error(ErrorKind::integration_failure,
                      "error estimate " + std::to_string(en) + " not reducible at sigma = " +
                          std::to_string(sigma) + " (step " + std::to_string(h) + ")");
      }
    }
  }

  const FlowSpace* space_;
  HeatOptions opts_;
  std::shared_ptr<GeneratorCache> cache_;
  std::shared_ptr<std::mutex> bw_mu_ = std::make_shared<std::mutex>();
  std::shared_ptr<std::map<double, double>> bw_cache_ = std::make_shared<std::map<double, double>>();
};

inline PropagatorKernel kernel(const FlowSpace& space, double t, double s, HeatOptions opts = {}) {
  return HeatFlow(space, opts).kernel(t, s);
}

inline DiscreteMeasure dual_flow(const FlowSpace& space, double t, double s,
                                 const DiscreteMeasure& mu, HeatOptions opts = {}) {
  return HeatFlow(space, opts).dual_flow(t, s, mu);
}

// Max-norm of p_{t,r} - p_{t,s} p_{s,r}. The bandwidth is fixed across the three kernels.
inline double check_chapman_kolmogorov(const FlowSpace& space, double r, double s, double t,
                                       HeatOptions opts = {}) {
  if (!(r <= s && s <= t)) throw Error(ErrorKind::invalid_input, "need r <= s <= t");
  if (!opts.bandwidth) opts.bandwidth = HeatFlow(space).bandwidth(t);
  HeatFlow flow(space, opts);
  const Eigen::MatrixXd ptr = flow.kernel(t, r).p;
  const Eigen::MatrixXd pts = flow.kernel(t, s).p;
  const Eigen::MatrixXd psr = flow.kernel(s, r).p;
  return (ptr - pts * psr).cwiseAbs().maxCoeff();
}

// Binary layout: "RFPK", u32 version = 1, u64 N, f64 s, f64 t, then N*N f64 row-major.
inline void write_kernel_binary(const PropagatorKernel& k, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  auto put = [&](const void* p, std::size_t n) {
    unsigned char buf[8];
    std::memcpy(buf, p, n);
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + n);
    out.write(reinterpret_cast<const char*>(buf), static_cast<std::streamsize>(n));
  };
  out.write("RFPK", 4);
  const std::uint32_t version = 1;
  const std::uint64_t n = static_cast<std::uint64_t>(k.p.rows());
  put(&version, 4);
  put(&n, 8);
  put(&k.s, 8);
  put(&k.t, 8);
  for (Eigen::Index i = 0; i < k.p.rows(); ++i)
    for (Eigen::Index j = 0; j < k.p.cols(); ++j) {
      const double v = k.p(i, j);
      put(&v, 8);
    }
}

inline PropagatorKernel read_kernel_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path);
  auto get = [&](void* p, std::size_t n) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(n));
    if (!in) throw Error(ErrorKind::io, "truncated kernel file " + path);
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + n);
    std::memcpy(p, buf, n);
  };
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RFPK", 4) != 0) throw Error(ErrorKind::io, "bad kernel magic in " + path);
  std::uint32_t version = 0;
  std::uint64_t n = 0;
  PropagatorKernel k;
  get(&version, 4);
  if (version != 1) throw Error(ErrorKind::io, "unsupported kernel version");
  get(&n, 8);
  get(&k.s, 8);
  get(&k.t, 8);
  k.p.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < k.p.rows(); ++i)
    for (Eigen::Index j = 0; j < k.p.cols(); ++j) get(&k.p(i, j), 8);
  return k;
}

inline nlohmann::json kernel_to_json(const PropagatorKernel& k) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < k.p.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(k.p.cols()));
    for (Eigen::Index j = 0; j < k.p.cols(); ++j) r[static_cast<std::size_t>(j)] = k.p(i, j);
    rows.push_back(r);
  }
  return {{"s", k.s},
          {"t", k.t},
          {"n", k.p.rows()},
          {"min_entry_before_clamp", k.min_entry_before_clamp},
          {"max_row_sum_deviation", k.max_row_sum_deviation},
          {"rows", rows}};
}

}  // namespace rfprobe

#endif  // RFPROBE_HEAT_HPP
