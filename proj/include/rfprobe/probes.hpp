#ifndef RFPROBE_PROBES_HPP
#define RFPROBE_PROBES_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rfprobe/error.hpp"
#include "rfprobe/flowspace.hpp"
#include "rfprobe/heat.hpp"
#include "rfprobe/parallel.hpp"
#include "rfprobe/transport.hpp"

namespace rfprobe {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Steps h_k = h0 * 2^-k, k = 0..K.
struct Schedule {
  double h0 = 0.02;
  int K = 4;

  std::vector<double> steps() const {
    if (!(h0 > 0.0) || K < 0) throw Error(ErrorKind::invalid_input, "schedule needs h0 > 0 and K >= 0");
    std::vector<double> h;
    for (int k = 0; k <= K; ++k) h.push_back(std::ldexp(h0, -k));
    return h;
  }
};

struct ThetaOptions {
  Schedule schedule;
  double ceiling = 10.0;       // divergence needs quotients above this
  double floor_factor = 2.0;   // step h is usable when sqrt(h) >= floor_factor * local spacing
  TransportOptions transport;
};

struct ThetaEstimate {
  std::string variant;  // "+", "-", "flat", "star"
  double t = 0.0;
  std::size_t x = 0, y = 0;
  double value = kNaN;
  double reference = 0.0;  // d_t(x, y), or W_t of the initial pair
  std::vector<double> steps, s_values, quotients;
  std::vector<bool> usable;
  std::optional<double> extrapolant;
  bool converged = false;
  bool divergent = false;
  bool floor_hit = false;
  std::size_t steps_used = 0;
  double floor_step = 0.0;  // smallest usable h
  // Multi-scale variants: radius or support scale and the value reached there.
  std::vector<double> scales, scale_values;
  std::vector<std::pair<std::size_t, std::size_t>> scale_pairs;
  std::vector<std::string> scale_candidates;
};

namespace detail {

struct QuotientSeries {
  std::vector<double> h, s, q;
  std::vector<bool> usable;
  double reference = 0.0;
};

inline void check_steps(const FlowSpace& space, double t, const std::vector<double>& h) {
  if (!space.window().contains(t)) throw Error(ErrorKind::invalid_input, "t outside the time window");
  for (double hk : h)
    if (t - hk < space.window().lo - 1e-12)
      throw Error(ErrorKind::invalid_input,
                  "schedule step " + std::to_string(hk) + " leaves the time window below t");
}

inline double measure_distance(const FlowSpace& space, double s, const Eigen::VectorXd& a,
                               const Eigen::VectorXd& b, const TransportOptions& opts = {}) {
  const DiscreteMeasure mu = DiscreteMeasure::normalized(s, a);
  const DiscreteMeasure nu = DiscreteMeasure::normalized(s, b);
  return w2(space, s, mu, nu, opts).w();
}

// Quotients -log(W_s / reference)/h for the pair of rows (ra, rb) of the propagated states.
inline QuotientSeries quotients_for(const FlowSpace& space, double t, const std::vector<double>& h,
                                    const std::vector<Eigen::MatrixXd>& states, Eigen::Index ra,
                                    Eigen::Index rb, double reference, double min_usable_step,
                                    const TransportOptions& opts = {}) {
  QuotientSeries out;
  out.h = h;
  out.reference = reference;
  for (std::size_t k = 0; k < h.size(); ++k) {
    const double s = t - h[k];
    const double w =
        measure_distance(space, s, states[k].row(ra).transpose(), states[k].row(rb).transpose(), opts);
    if (!(w > 1e-14 * reference))
      throw Error(ErrorKind::degenerate_collision,
                  "transported measures coincide at s = " + std::to_string(s));
    out.s.push_back(s);
    out.q.push_back(-std::log(w / reference) / h[k]);
    out.usable.push_back(h[k] >= min_usable_step * (1.0 - 1e-12));
  }
  return out;
}

// Tail surrogates over the last usable steps plus Richardson extrapolation when the
// sequence is Cauchy (successive differences shrink by a factor >= 2).
inline void summarize(const QuotientSeries& qs, const ThetaOptions& opts, double min_step,
                      ThetaEstimate& plus, ThetaEstimate& minus) {
  std::vector<double> u;
  for (std::size_t k = 0; k < qs.q.size(); ++k)
    if (qs.usable[k]) u.push_back(qs.q[k]);
  for (ThetaEstimate* e : {&plus, &minus}) {
    e->steps = qs.h;
    e->s_values = qs.s;
    e->quotients = qs.q;
    e->usable = qs.usable;
    e->reference = qs.reference;
    e->steps_used = u.size();
    e->floor_hit = u.size() < qs.q.size();
    e->floor_step = min_step;
  }
  if (u.empty())
    throw Error(ErrorKind::resolution, "no schedule step above the heat-resolution floor h >= " +
                                           std::to_string(min_step));
  const std::size_t n = u.size();
  const std::size_t tail = std::min<std::size_t>(3, n);
  const auto first = u.end() - static_cast<std::ptrdiff_t>(tail);
  const double hi = *std::max_element(first, u.end());
  const double lo = *std::min_element(first, u.end());
  bool cauchy = false, divergent = false;
  double R = kNaN;
  if (n >= 3) {
    const double d1 = u[n - 2] - u[n - 3], d2 = u[n - 1] - u[n - 2];
    cauchy = std::abs(d2) <= 0.5 * std::abs(d1);
    R = 2.0 * u[n - 1] - u[n - 2];
    divergent = u[n - 3] > opts.ceiling && u[n - 2] > u[n - 3] && u[n - 1] > u[n - 2];
  }
  const bool converged = cauchy && !divergent;
  plus.divergent = minus.divergent = divergent;
  plus.converged = minus.converged = converged;
  if (converged) plus.extrapolant = minus.extrapolant = R;
  plus.value = converged ? R : hi;
  minus.value = converged ? R : lo;
}

inline double spacing_floor(const FlowSpace& space, double t, std::initializer_list<std::size_t> pts,
                            double factor) {
  double sp = 0.0;
  for (std::size_t p : pts) sp = std::max(sp, space.local_spacing(t, p));
  return (factor * sp) * (factor * sp);
}

inline Eigen::MatrixXd dirac_rows(std::size_t n, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < idx.size(); ++k)
    rows(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(idx[k])) = 1.0;
  return rows;
}

inline std::vector<double> stops(double t, const std::vector<double>& h) {
  std::vector<double> s;
  for (double hk : h) s.push_back(t - hk);
  return s;
}

}  // namespace detail

// Expansion rates of the dual heat flows of two Diracs. First is the upper (tail max)
// surrogate, second the lower (tail min) one; both equal the extrapolant when converged.
inline std::pair<ThetaEstimate, ThetaEstimate> theta_pair(const HeatFlow& flow, double t, std::size_t x,
                                                          std::size_t y, const ThetaOptions& opts = {}) {
  const FlowSpace& space = flow.space();
  if (x == y) throw Error(ErrorKind::invalid_input, "theta needs two distinct points");
  const std::vector<double> h = opts.schedule.steps();
  detail::check_steps(space, t, h);
  const double floor = detail::spacing_floor(space, t, {x, y}, opts.floor_factor);
  const auto states = flow.propagate(t, detail::dirac_rows(space.size(), {x, y}), detail::stops(t, h));
  const auto qs = detail::quotients_for(space, t, h, states, 0, 1, space.distance(t, x, y), floor, opts.transport);
  ThetaEstimate plus, minus;
  plus.variant = "+";
  minus.variant = "-";
  plus.t = minus.t = t;
  plus.x = minus.x = x;
  plus.y = minus.y = y;
  detail::summarize(qs, opts, floor, plus, minus);
  return {plus, minus};
}

inline std::pair<ThetaEstimate, ThetaEstimate> theta_pair(const FlowSpace& space, double t, std::size_t x,
                                                          std::size_t y, const ThetaOptions& opts = {}) {
  return theta_pair(HeatFlow(space), t, x, y, opts);
}

struct ThetaStarOptions {
  ThetaOptions theta;
  std::size_t center_pairs = 8;   // cap on pairs (x, z)
  std::size_t random_pairs = 8;   // additional pairs (y, z) inside the ball
  double min_separation = 2.0;    // pairs closer than this many local spacings are skipped
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::pair<std::size_t, std::size_t>> ball_pairs(
    const FlowSpace& space, double t, std::size_t x, const std::vector<std::size_t>& ball,
    std::size_t center_quota, std::size_t random_quota, double min_sep_factor, std::mt19937_64& rng,
    double min_distance = 0.0, double max_distance = std::numeric_limits<double>::infinity()) {
  auto sep = [&](std::size_t a, std::size_t b) {
    return min_sep_factor * std::max(space.local_spacing(t, a), space.local_spacing(t, b));
  };
  auto admissible = [&](std::size_t a, std::size_t b) {
    const double d = space.distance(t, a, b);
    return d >= sep(a, b) && d >= min_distance && d <= max_distance;
  };
  std::vector<std::size_t> eligible;
  for (std::size_t z : ball)
    if (z != x && admissible(x, z)) eligible.push_back(z);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::shuffle(eligible.begin(), eligible.end(), rng);
  if (eligible.size() > center_quota) eligible.resize(center_quota);
  std::sort(eligible.begin(), eligible.end());
  for (std::size_t z : eligible) pairs.emplace_back(x, z);
  if (ball.size() >= 2) {
    std::uniform_int_distribution<std::size_t> pick(0, ball.size() - 1);
    std::size_t added = 0;
    for (std::size_t attempt = 0; attempt < 50 * random_quota && added < random_quota; ++attempt) {
      std::size_t a = ball[pick(rng)], b = ball[pick(rng)];
      if (a == b) continue;
      if (a > b) std::swap(a, b);
      if (!admissible(a, b)) continue;
      if (std::find(pairs.begin(), pairs.end(), std::make_pair(a, b)) != pairs.end()) continue;
      pairs.emplace_back(a, b);
      ++added;
    }
  }
  return pairs;
}

}  // namespace detail

// Localized upper rate at x: for each radius, the max upper surrogate over pairs in B_t(x, r).
inline ThetaEstimate theta_star(const HeatFlow& flow, double t, std::size_t x,
                                const std::vector<double>& radii, const ThetaStarOptions& opts = {}) {
  const FlowSpace& space = flow.space();
  if (radii.empty()) throw Error(ErrorKind::invalid_input, "theta_star needs at least one radius");
  for (std::size_t k = 1; k < radii.size(); ++k)
    if (!(radii[k] < radii[k - 1])) throw Error(ErrorKind::invalid_input, "radii must decrease");
  const std::vector<double> h = opts.theta.schedule.steps();
  detail::check_steps(space, t, h);
  std::mt19937_64 rng(opts.seed);

  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> pairs(radii.size());
  std::vector<std::size_t> involved;
  for (std::size_t r = 0; r < radii.size(); ++r) {
    const auto ball = space.ball(t, x, radii[r]);
    if (ball.size() < 3)
      throw Error(ErrorKind::resolution, "ball of radius " + std::to_string(radii[r]) +
                                             " holds fewer than two samples besides the center");
    pairs[r] = detail::ball_pairs(space, t, x, ball, opts.center_pairs, opts.random_pairs,
                                  opts.min_separation, rng);
    if (pairs[r].empty())
      throw Error(ErrorKind::resolution, "no admissible pair in the ball of radius " + std::to_string(radii[r]));
    for (auto [a, b] : pairs[r]) {
      involved.push_back(a);
      involved.push_back(b);
    }
  }
  std::sort(involved.begin(), involved.end());
  involved.erase(std::unique(involved.begin(), involved.end()), involved.end());
  std::vector<Eigen::Index> row_of(space.size(), -1);
  for (std::size_t k = 0; k < involved.size(); ++k) row_of[involved[k]] = static_cast<Eigen::Index>(k);
  const auto states = flow.propagate(t, detail::dirac_rows(space.size(), involved), detail::stops(t, h));

  ThetaEstimate star;
  star.variant = "star";
  star.t = t;
  star.x = star.y = x;
  bool any_divergent = false;
  for (std::size_t r = 0; r < radii.size(); ++r) {
    std::vector<ThetaEstimate> est(pairs[r].size());
    parallel_for(pairs[r].size(), [&](std::size_t p) {
      auto [a, b] = pairs[r][p];
      const double floor = detail::spacing_floor(space, t, {a, b}, opts.theta.floor_factor);
      const auto qs = detail::quotients_for(space, t, h, states, row_of[a], row_of[b], space.distance(t, a, b), floor,
                                          opts.theta.transport);
      ThetaEstimate plus, minus;
      detail::summarize(qs, opts.theta, floor, plus, minus);
      plus.x = a;
      plus.y = b;
      est[p] = plus;
    });
    std::size_t best = 0;
    for (std::size_t p = 0; p < est.size(); ++p) {
      any_divergent = any_divergent || est[p].divergent;
      if (est[p].value > est[best].value) best = p;
    }
    star.scales.push_back(radii[r]);
    star.scale_values.push_back(est[best].value);
    star.scale_pairs.emplace_back(est[best].x, est[best].y);
    if (r + 1 == radii.size()) {
      const ThetaEstimate& b = est[best];
      star.steps = b.steps;
      star.s_values = b.s_values;
      star.quotients = b.quotients;
      star.usable = b.usable;
      star.reference = b.reference;
      star.extrapolant = b.extrapolant;
      star.steps_used = b.steps_used;
      star.floor_hit = b.floor_hit;
      star.floor_step = b.floor_step;
      star.converged = b.converged;
      star.value = b.value;
    }
  }
  bool rising = star.scale_values.size() >= 2;
  for (std::size_t r = 0; r < star.scale_values.size(); ++r) {
    if (!(star.scale_values[r] > opts.theta.ceiling)) rising = false;
    if (r > 0 && !(star.scale_values[r] > star.scale_values[r - 1])) rising = false;
  }
  star.divergent = any_divergent || rising;
  if (star.divergent) star.converged = false;
  return star;
}

inline ThetaEstimate theta_star(const FlowSpace& space, double t, std::size_t x,
                                const std::vector<double>& radii, const ThetaStarOptions& opts = {}) {
  return theta_star(HeatFlow(space), t, x, radii, opts);
}

namespace detail {

// Mass-weighted measure on B_t(c, eps) with radial profile (1 - (d/eps)^2)^power (power 0:
// uniform on the closed ball).
inline Eigen::VectorXd ball_measure(const FlowSpace& space, double t, std::size_t c, double eps, int power) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(space.size()));
  for (std::size_t i = 0; i < space.size(); ++i) {
    const double d = space.distance(t, c, i);
    if (power == 0) {
      if (d <= eps) w(static_cast<Eigen::Index>(i)) = space.mass(t, i);
    } else if (d < eps) {
      const double u = 1.0 - (d / eps) * (d / eps);
      w(static_cast<Eigen::Index>(i)) = space.mass(t, i) * std::pow(u, power);
    }
  }
  const double s = w.sum();
  if (s > 0.0) w /= s;
  return w;
}

inline std::size_t atom_count(const Eigen::VectorXd& w) {
  return static_cast<std::size_t>((w.array() > 0.0).count());
}

}  // namespace detail

// Lower rate with Diracs relaxed to small-support measures: per support scale, the minimum
// lower surrogate over the candidate pairs (Diracs, uniform balls, matched two-point
// measures); the value is the one reached at the last (smallest) scale.
inline ThetaEstimate theta_flat(const HeatFlow& flow, double t, std::size_t x, std::size_t y,
                                const std::vector<double>& eps_seq, const ThetaOptions& opts = {}) {
  const FlowSpace& space = flow.space();
  if (x == y) throw Error(ErrorKind::invalid_input, "theta needs two distinct points");
  if (eps_seq.empty()) throw Error(ErrorKind::invalid_input, "theta_flat needs at least one scale");
  const std::vector<double> h = opts.schedule.steps();
  detail::check_steps(space, t, h);
  const double floor = detail::spacing_floor(space, t, {x, y}, opts.floor_factor);
  const Eigen::Index n = static_cast<Eigen::Index>(space.size());

  struct Candidate {
    std::string name;
    double scale;
    Eigen::VectorXd mu, nu;
  };
  std::vector<Candidate> cands;
  auto unit = [&](std::size_t i) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    v(static_cast<Eigen::Index>(i)) = 1.0;
    return v;
  };
  for (double eps : eps_seq) {
    if (!(eps > 0.0)) throw Error(ErrorKind::invalid_input, "support scale must be positive");
    cands.push_back({"dirac", eps, unit(x), unit(y)});
    Eigen::VectorXd bx = detail::ball_measure(space, t, x, eps, 0);
    Eigen::VectorXd by = detail::ball_measure(space, t, y, eps, 0);
    if (detail::atom_count(bx) < 2 || detail::atom_count(by) < 2)
      throw Error(ErrorKind::resolution,
                  "support scale " + std::to_string(eps) + " admits fewer than two atoms");
    cands.push_back({"uniform", eps, bx, by});
    // two-point: x with its nearest neighbour, y with the partner closest to the same offset
    std::size_t xn = x;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < space.size(); ++i) {
      const double d = space.distance(t, x, i);
      if (i != x && d <= eps && d < best) {
        best = d;
        xn = i;
      }
    }
    std::size_t yn = y;
    double fit = std::numeric_limits<double>::infinity();
    const double dxy = space.distance(t, x, y);
    for (std::size_t i = 0; i < space.size(); ++i) {
      if (i == y || space.distance(t, y, i) > eps) continue;
      const double mismatch = std::abs(space.distance(t, y, i) - best) +
                              std::abs(space.distance(t, xn, i) - dxy);
      if (mismatch < fit) {
        fit = mismatch;
        yn = i;
      }
    }
    if (xn != x && yn != y) {
      Eigen::VectorXd a = 0.5 * (unit(x) + unit(xn)), b = 0.5 * (unit(y) + unit(yn));
      cands.push_back({"two_point", eps, a, b});
    }
  }
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(2 * cands.size()), n);
  for (std::size_t c = 0; c < cands.size(); ++c) {
    rows.row(static_cast<Eigen::Index>(2 * c)) = cands[c].mu.transpose();
    rows.row(static_cast<Eigen::Index>(2 * c + 1)) = cands[c].nu.transpose();
  }
  const auto states = flow.propagate(t, rows, detail::stops(t, h));
  std::vector<ThetaEstimate> est(cands.size());
  parallel_for(cands.size(), [&](std::size_t c) {
    const double ref =
        w2(space, t, DiscreteMeasure(t, cands[c].mu), DiscreteMeasure(t, cands[c].nu), opts.transport).w();
    const auto qs = detail::quotients_for(space, t, h, states, static_cast<Eigen::Index>(2 * c),
                                          static_cast<Eigen::Index>(2 * c + 1), ref, floor, opts.transport);
    ThetaEstimate plus, minus;
    detail::summarize(qs, opts, floor, plus, minus);
    est[c] = minus;
  });

  ThetaEstimate out;
  out.variant = "flat";
  out.t = t;
  out.x = x;
  out.y = y;
  std::size_t c = 0;
  for (double eps : eps_seq) {
    std::size_t best = c;
    for (; c < cands.size() && cands[c].scale == eps; ++c)
      if (est[c].value < est[best].value) best = c;
    out.scales.push_back(eps);
    out.scale_values.push_back(est[best].value);
    out.scale_candidates.push_back(cands[best].name);
    const ThetaEstimate& b = est[best];
    out.steps = b.steps;
    out.s_values = b.s_values;
    out.quotients = b.quotients;
    out.usable = b.usable;
    out.reference = b.reference;
    out.extrapolant = b.extrapolant;
    out.steps_used = b.steps_used;
    out.floor_hit = b.floor_hit;
    out.floor_step = b.floor_step;
    out.converged = b.converged;
    out.divergent = b.divergent;
    out.value = b.value;
  }
  return out;
}

inline ThetaEstimate theta_flat(const FlowSpace& space, double t, std::size_t x, std::size_t y,
                                const std::vector<double>& eps_seq, const ThetaOptions& opts = {}) {
  return theta_flat(HeatFlow(space), t, x, y, eps_seq, opts);
}

// ---------------------------------------------------------------------------------------
// Entropy convexity along displacement interpolations

struct EtaOptions {
  double delta_a = 1.0 / 64.0;
  // Candidate endpoint profiles: "bump" (power 2), "bump3" (power 3), "uniform".
  std::vector<std::string> shapes{"bump", "bump3"};
  double density_bandwidth = 2.0;   // reference-density kernel width, in median spacings
  double min_eps_spacings = 3.0;    // precondition eps >= this x local spacing
  std::vector<double> time_steps{1e-3, 5e-4, 2.5e-4};
  double residual_tol = 0.25;       // fit residual (relative to W^2) flagged as low confidence
  std::optional<double> spacing;    // median spacing, computed when absent
  TransportOptions transport;
};

struct EtaCandidate {
  std::string shape;
  std::size_t atoms_mu = 0, atoms_nu = 0;
  double slope0 = 0.0, slope1 = 0.0;
  double half_dt_w2 = 0.0;
  double w2 = 0.0;
  double fit_residual = 0.0;
  double value = kNaN;
  bool low_confidence = false;
};

struct EtaEstimate {
  std::string variant;  // "pair" or "star"
  double t = 0.0;
  std::size_t x = 0, y = 0;
  double eps = 0.0;
  double value = kNaN;
  double slope0 = 0.0, slope1 = 0.0, half_dt_w2 = 0.0, w2 = 0.0;
  double fit_residual = 0.0;
  bool low_confidence = false;
  std::string shape;
  std::vector<EtaCandidate> candidates;
  double delta_a = 0.0;
  double density_bandwidth = 0.0;  // length units
  std::vector<double> scales, scale_values;
  std::vector<std::pair<std::size_t, std::size_t>> scale_pairs;

  double recomputed() const { return (slope1 - slope0 + half_dt_w2) / w2; }
};

namespace detail {

// Sum of the logs of the top-k eigenvalues of the weighted covariance of a point cloud given
// by its pairwise distances (weighted classical scaling).
inline double log_det_cov(const Eigen::MatrixXd& D, const Eigen::VectorXd& w, int k) {
  const Eigen::Index n = w.size();
  Eigen::MatrixXd J = Eigen::MatrixXd::Identity(n, n) - Eigen::VectorXd::Ones(n) * w.transpose();
  const Eigen::MatrixXd B = -0.5 * J * D.array().square().matrix() * J.transpose();
  const Eigen::VectorXd s = w.cwiseSqrt();
  const Eigen::MatrixXd M = s.asDiagonal() * B * s.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd ev = es.eigenvalues();
  double acc = 0.0;
  for (int j = 0; j < k && j < n; ++j) acc += std::log(std::max(ev(n - 1 - j), 1e-300));
  return acc;
}

// Weighted geodesic mean of chart points by successive folding.
inline std::optional<Coords> fold_mean(const FlowSpace& space, double t,
                                       const std::vector<std::pair<std::size_t, double>>& targets) {
  Coords mean(space.point(targets.front().first).begin(), space.point(targets.front().first).end());
  double acc = targets.front().second;
  for (std::size_t k = 1; k < targets.size(); ++k) {
    const double w = targets[k].second;
    auto g = space.geodesic_between(t, mean, space.point(targets[k].first), w / (acc + w));
    if (!g) return std::nullopt;
    mean = std::move(*g);
    acc += w;
  }
  return mean;
}

struct PathSample {
  std::vector<Coords> src, dst;
  Eigen::VectorXd w;
};

// Barycentric projection of the optimal plan: each source atom moves to the weighted mean of
// its targets.
inline PathSample barycentric_path(const FlowSpace& space, double t, const TransportPlan& plan,
                                   const DiscreteMeasure& mu) {
  std::map<std::size_t, std::vector<std::pair<std::size_t, double>>> by_source;
  for (const auto& e : plan.coupling) by_source[e.i].emplace_back(e.j, e.w);
  PathSample p;
  std::vector<double> w;
  std::string excluded;
  for (auto& [i, targets] : by_source) {
    auto m = fold_mean(space, t, targets);
    if (!m) {
      excluded += " " + std::to_string(i);
      continue;
    }
    double mass = 0.0;
    for (auto& tw : targets) mass += tw.second;
    p.src.emplace_back(space.point(i).begin(), space.point(i).end());
    p.dst.push_back(std::move(*m));
    w.push_back(mass);
  }
  (void)mu;
  if (!excluded.empty())
    throw Error(ErrorKind::excluded_pair, "geodesic through excluded locus from sources" + excluded);
  p.w = Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  p.w /= p.w.sum();
  return p;
}

inline int profile_power(const std::string& shape) {
  if (shape == "bump") return 2;
  if (shape == "bump3") return 3;
  if (shape == "uniform") return 0;
  throw Error(ErrorKind::invalid_input, "unknown candidate profile " + shape);
}

}  // namespace detail

// Normalized entropy convexity defect between measures of support radius eps around x and y.
// Entropy along the path is estimated as -1/2 log det(covariance) of the moved atoms minus the
// mean log reference density (kernel estimate of m_t); slopes come from 3-node end fits.
inline EtaEstimate eta_eps(const FlowSpace& space, double t, std::size_t x, std::size_t y, double eps,
                           const EtaOptions& opts = {}) {
  if (!space.has_geodesic() || !space.has_chart_metric())
    throw Error(ErrorKind::unsupported, "eta needs a geodesic evaluator");
  if (x == y) throw Error(ErrorKind::invalid_input, "eta needs two distinct points");
  if (!space.window().contains(t)) throw Error(ErrorKind::invalid_input, "t outside the time window");
  const double local = std::max(space.local_spacing(t, x), space.local_spacing(t, y));
  if (eps < opts.min_eps_spacings * local * (1.0 - 1e-12))
    throw Error(ErrorKind::invalid_input, "support radius " + std::to_string(eps) + " below " +
                                              std::to_string(opts.min_eps_spacings) +
                                              " local spacings (" + std::to_string(local) + ")");
  const int n_nodes = static_cast<int>(std::lround(1.0 / opts.delta_a));
  if (n_nodes < 4 || std::abs(n_nodes * opts.delta_a - 1.0) > 1e-12)
    throw Error(ErrorKind::invalid_input, "delta_a must be 1/n with n >= 4");
  const double spacing = opts.spacing ? *opts.spacing : space.median_spacing(t);
  const double bm = opts.density_bandwidth * spacing;
  const int dim = space.intrinsic_dimension();
  const double dxy = space.distance(t, x, y);

  // reference samples near the path
  std::vector<std::size_t> local_pts;
  for (std::size_t i = 0; i < space.size(); ++i)
    if (space.distance(t, x, i) + space.distance(t, y, i) <= dxy + 2.0 * eps + 8.0 * bm) local_pts.push_back(i);
  const double norm = std::pow(std::numbers::pi * bm * bm, 0.5 * dim);

  std::vector<double> h_seq;
  if (!space.is_static()) {
    const double room = t - space.window().lo;
    for (double h : opts.time_steps)
      if (h <= room + 1e-15) h_seq.push_back(h);
    if (h_seq.empty()) {
      if (!(room > 0.0))
        throw Error(ErrorKind::invalid_input, "no room below t for the left time derivative");
      for (double h : opts.time_steps) h_seq.push_back(h * room / opts.time_steps.front());
    }
  }

  EtaEstimate out;
  out.variant = "pair";
  out.t = t;
  out.x = x;
  out.y = y;
  out.eps = eps;
  out.delta_a = opts.delta_a;
  out.density_bandwidth = bm;
  for (const std::string& shape : opts.shapes) {
    const int power = detail::profile_power(shape);
    Eigen::VectorXd a = detail::ball_measure(space, t, x, eps, power);
    Eigen::VectorXd b = detail::ball_measure(space, t, y, eps, power);
    EtaCandidate c;
    c.shape = shape;
    c.atoms_mu = detail::atom_count(a);
    c.atoms_nu = detail::atom_count(b);
    if (c.atoms_mu < 2 || c.atoms_nu < 2) continue;
    const DiscreteMeasure mu(t, a), nu(t, b);
    const TransportPlan plan = w2(space, t, mu, nu, opts.transport);
    c.w2 = plan.w2;
    const detail::PathSample path = detail::barycentric_path(space, t, plan, mu);
    const std::size_t m = path.src.size();
    std::vector<double> E(static_cast<std::size_t>(n_nodes) + 1);
    for (int k = 0; k <= n_nodes; ++k) {
      const double s = k * opts.delta_a;
      std::vector<Coords> pts(m);
      for (std::size_t i = 0; i < m; ++i) {
        auto g = space.geodesic_between(t, path.src[i], path.dst[i], s);
        if (!g) throw Error(ErrorKind::excluded_pair, "interpolating geodesic through excluded locus");
        pts[i] = std::move(*g);
      }
      Eigen::MatrixXd D = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j)
          D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              D(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) =
                  space.point_distance(t, pts[i], pts[j]);
      double ref = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        double rho = 0.0;
        for (std::size_t q : local_pts) {
          const double d = space.point_distance(t, pts[i], space.point(q));
          rho += space.mass(t, q) * std::exp(-(d * d) / (bm * bm));
        }
        ref += path.w(static_cast<Eigen::Index>(i)) * std::log(std::max(rho / norm, 1e-300));
      }
      E[static_cast<std::size_t>(k)] = -0.5 * detail::log_det_cov(D, path.w, dim) - ref;
    }
    const double da = opts.delta_a;
    const std::size_t L = E.size() - 1;
    c.slope0 = (E[2] - E[0]) / (2.0 * da);
    c.slope1 = (E[L] - E[L - 2]) / (2.0 * da);
    // residual of the 3-node linear fits, in slope units
    const double r0 = std::abs(E[0] - 2.0 * E[1] + E[2]) / (std::sqrt(6.0) * da);
    const double r1 = std::abs(E[L - 2] - 2.0 * E[L - 1] + E[L]) / (std::sqrt(6.0) * da);
    c.fit_residual = std::max(r0, r1);
    if (!h_seq.empty()) c.half_dt_w2 = 0.5 * dt_w2_left(space, t, mu, nu, h_seq, opts.transport).extrapolant;
    c.value = (c.slope1 - c.slope0 + c.half_dt_w2) / c.w2;
    c.low_confidence = c.fit_residual > opts.residual_tol * c.w2;
    out.candidates.push_back(c);
  }
  if (out.candidates.empty())
    throw Error(ErrorKind::resolution, "no candidate support with at least two atoms at radius " + std::to_string(eps));
  std::size_t best = 0;
  for (std::size_t k = 1; k < out.candidates.size(); ++k)
    if (out.candidates[k].value < out.candidates[best].value) best = k;
  const EtaCandidate& b = out.candidates[best];
  out.shape = b.shape;
  out.slope0 = b.slope0;
  out.slope1 = b.slope1;
  out.half_dt_w2 = b.half_dt_w2;
  out.w2 = b.w2;
  out.fit_residual = b.fit_residual;
  out.low_confidence = b.low_confidence;
  out.value = out.recomputed();
  return out;
}

// Support radius tied to the pair distance.
struct EpsRule {
  double fraction = 0.1;
  double min_spacings = 7.0;
  double operator()(double d, double spacing) const { return std::max(fraction * d, min_spacings * spacing); }
};

struct EtaStarOptions {
  EtaOptions eta;
  EpsRule eps_rule;
  std::size_t center_pairs = 4;
  std::size_t random_pairs = 4;
  double min_separation = 2.0;
  double min_distance = 0.0;  // optional band on pair distances
  double max_distance = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
};

inline EtaEstimate eta_star(const FlowSpace& space, double t, std::size_t x, const std::vector<double>& radii,
                            const EtaStarOptions& opts = {}) {
  if (!space.has_geodesic()) throw Error(ErrorKind::unsupported, "eta needs a geodesic evaluator");
  if (radii.empty()) throw Error(ErrorKind::invalid_input, "eta_star needs at least one radius");
  for (std::size_t k = 1; k < radii.size(); ++k)
    if (!(radii[k] < radii[k - 1])) throw Error(ErrorKind::invalid_input, "radii must decrease");
  EtaOptions eo = opts.eta;
  if (!eo.spacing) eo.spacing = space.median_spacing(t);
  std::mt19937_64 rng(opts.seed);
  EtaEstimate star;
  star.variant = "star";
  star.t = t;
  star.x = star.y = x;
  for (std::size_t r = 0; r < radii.size(); ++r) {
    const auto ball = space.ball(t, x, radii[r]);
    if (ball.size() < 3)
      throw Error(ErrorKind::resolution, "ball of radius " + std::to_string(radii[r]) +
                                             " holds fewer than two samples besides the center");
    const auto pairs = detail::ball_pairs(space, t, x, ball, opts.center_pairs, opts.random_pairs,
                                          opts.min_separation, rng, opts.min_distance, opts.max_distance);
    if (pairs.empty())
      throw Error(ErrorKind::resolution, "no admissible pair in the ball of radius " + std::to_string(radii[r]));
    std::vector<EtaEstimate> est(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t p) {
      auto [a, b] = pairs[p];
      const double local = std::max(space.local_spacing(t, a), space.local_spacing(t, b));
      const double eps = opts.eps_rule(space.distance(t, a, b), local);
      est[p] = eta_eps(space, t, a, b, eps, eo);
    });
    std::size_t best = 0;
    for (std::size_t p = 1; p < est.size(); ++p)
      if (est[p].value > est[best].value) best = p;
    star.scales.push_back(radii[r]);
    star.scale_values.push_back(est[best].value);
    star.scale_pairs.emplace_back(est[best].x, est[best].y);
    if (r + 1 == radii.size()) {
      const EtaEstimate& b = est[best];
      star.eps = b.eps;
      star.slope0 = b.slope0;
      star.slope1 = b.slope1;
      star.half_dt_w2 = b.half_dt_w2;
      star.w2 = b.w2;
      star.fit_residual = b.fit_residual;
      star.low_confidence = b.low_confidence;
      star.shape = b.shape;
      star.candidates = b.candidates;
      star.delta_a = b.delta_a;
      star.density_bandwidth = b.density_bandwidth;
      star.value = star.recomputed();
    }
  }
  return star;
}

// ---------------------------------------------------------------------------------------
// Analytic tensor probes

// Geodesic average of the normalized tensor (composite midpoint rule).
inline double rfex(const FlowSpace& space, double t, std::size_t x, std::size_t y, double N = kInfiniteN,
                   int nodes = 64) {
  if (!space.has_geodesic() || !space.has_tensor())
    throw Error(ErrorKind::unsupported, "RFex needs geodesic and tensor evaluators");
  if (x == y) throw Error(ErrorKind::invalid_input, "RFex needs two distinct points");
  if (nodes < 32) throw Error(ErrorKind::invalid_input, "RFex uses at least 32 nodes");
  const double delta = 0.25 / nodes;
  double acc = 0.0;
  for (int k = 0; k < nodes; ++k) {
    const double a = (k + 0.5) / nodes;
    auto p = space.geodesic(t, x, y, a);
    auto pl = space.geodesic(t, x, y, a - delta);
    auto pr = space.geodesic(t, x, y, a + delta);
    if (!p || !pl || !pr)
      throw Error(ErrorKind::excluded_pair, "pair (" + std::to_string(x) + "," + std::to_string(y) +
                                                ") is joined through an excluded locus");
    Coords v(p->size());
    for (std::size_t c = 0; c < v.size(); ++c) v[c] = ((*pr)[c] - (*pl)[c]) / (2.0 * delta);
    acc += analytic_tensor(space, t, *p, v, N);
  }
  return acc / nodes;
}

struct TensorEigen {
  double sigma_max = 0.0;
  double sigma_min = 0.0;
};

inline TensorEigen tensor_eigen(const FlowSpace& space, double t, std::size_t x, double N = kInfiniteN) {
  if (!space.has_tensor()) throw Error(ErrorKind::unsupported, "space has no tensor evaluator");
  const TensorForm form = space.tensor_form(t, space.point(x), N);
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(form.B, form.G);
  if (es.info() != Eigen::Success) throw Error(ErrorKind::invalid_input, "tensor metric is not positive definite");
  return {es.eigenvalues().maxCoeff(), es.eigenvalues().minCoeff()};
}

// ---------------------------------------------------------------------------------------
// Rough N-super deficit

struct DeficitEstimate {
  double value = 0.0;
  double w2_t = 0.0, w2_s = 0.0;
  double integral = 0.0;         // refined trapezoid
  double integral_coarse = 0.0;  // base trapezoid
  double N = kInfiniteN;
  std::size_t snapshots = 0;     // interior snapshots of the refined grid
  bool low_confidence = false;
};

inline DeficitEstimate nsuper_deficit(const HeatFlow& flow, double t, double s, const DiscreteMeasure& mu,
                                      const DiscreteMeasure& nu, double N = kInfiniteN,
                                      std::size_t snapshots = 16) {
  const FlowSpace& space = flow.space();
  if (s > t) throw Error(ErrorKind::invalid_input, "deficit needs s <= t");
  if (!(N > 0.0)) throw Error(ErrorKind::invalid_input, "N must be positive");
  if (snapshots < 16) throw Error(ErrorKind::invalid_input, "at least 16 interior snapshots are required");
  DeficitEstimate out;
  out.N = N;
  out.w2_t = w2(space, t, mu, nu).w2;
  if (s == t) {
    out.w2_s = out.w2_t;
    return out;
  }
  const std::size_t coarse = snapshots + 1;  // intervals
  const std::size_t fine = 2 * coarse;
  out.snapshots = fine - 1;
  std::vector<double> r(fine + 1);
  for (std::size_t k = 0; k <= fine; ++k) r[k] = s + (t - s) * static_cast<double>(k) / static_cast<double>(fine);
  r.back() = t;
  Eigen::MatrixXd rows(2, static_cast<Eigen::Index>(space.size()));
  rows.row(0) = mu.weights().transpose();
  rows.row(1) = nu.weights().transpose();
  const auto states = flow.propagate(t, rows, r);
  std::vector<double> f(fine + 1);
  for (std::size_t k = 0; k <= fine; ++k) {
    const auto a = DiscreteMeasure::normalized(r[k], states[k].row(0).transpose());
    const auto b = DiscreteMeasure::normalized(r[k], states[k].row(1).transpose());
    const double diff = entropy(space, r[k], a) - entropy(space, r[k], b);
    f[k] = diff * diff;
    if (k == 0) out.w2_s = w2(space, s, a, b).w2;
  }
  const double hf = (t - s) / static_cast<double>(fine);
  for (std::size_t k = 0; k < fine; ++k) out.integral += 0.5 * hf * (f[k] + f[k + 1]);
  for (std::size_t k = 0; k < fine; k += 2) out.integral_coarse += 0.5 * (2.0 * hf) * (f[k] + f[k + 2]);
  const double coupling = std::isfinite(N) ? 2.0 / N : 0.0;
  out.value = out.w2_t - out.w2_s - coupling * out.integral;
  const double scale = std::max(std::abs(out.integral), 1e-12);
  out.low_confidence = std::isfinite(N) && std::abs(out.integral - out.integral_coarse) > 0.05 * scale;
  return out;
}

inline DeficitEstimate nsuper_deficit(const FlowSpace& space, double t, double s, const DiscreteMeasure& mu,
                                      const DiscreteMeasure& nu, double N = kInfiniteN,
                                      std::size_t snapshots = 16) {
  return nsuper_deficit(HeatFlow(space), t, s, mu, nu, N, snapshots);
}

// ---------------------------------------------------------------------------------------
// Rigidity defect

// Sum_ij cos(d(i,j)) m(i) m(j) / m(X)^2. Terms are accumulated in a canonical point order so
// the result does not depend on the sample numbering.
inline double rigidity_defect(const FlowSpace& space, double t = kNaN) {
  if (!space.is_static()) throw Error(ErrorKind::invalid_input, "rigidity defect needs a static space");
  if (std::isnan(t)) t = space.window().lo;
  const std::size_t n = space.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    auto pa = space.point(a), pb = space.point(b);
    if (std::lexicographical_compare(pa.begin(), pa.end(), pb.begin(), pb.end())) return true;
    if (std::lexicographical_compare(pb.begin(), pb.end(), pa.begin(), pa.end())) return false;
    return space.mass(t, a) < space.mass(t, b);
  });
  std::vector<double> m(n);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    m[k] = space.mass(t, order[k]);
    total += m[k];
  }
  for (double& v : m) v /= total;
  const double limit = std::numbers::pi + space.metric_tol();
  std::vector<double> rows(n);
  std::vector<std::string> bad(n);
  parallel_for(n, [&](std::size_t i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = space.distance(t, order[i], order[j]);
      if (d > limit && bad[i].empty())
        bad[i] = "(" + std::to_string(order[i]) + "," + std::to_string(order[j]) + ")";
      acc += std::cos(d) * m[j];
    }
    rows[i] = acc * m[i];
  });
  for (const auto& b : bad)
    if (!b.empty()) throw Error(ErrorKind::invalid_input, "diameter exceeds pi at pair " + b);
  double sum = 0.0;
  for (double v : rows) sum += v;
  return sum;
}

// ---------------------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const ThetaEstimate& e) {
  nlohmann::json pairs = nlohmann::json::array();
  for (auto [a, b] : e.scale_pairs) pairs.push_back({a, b});
  std::vector<int> usable;
  for (bool u : e.usable) usable.push_back(u ? 1 : 0);
  nlohmann::json j = {{"variant", e.variant},
                      {"t", e.t},
                      {"x", e.x},
                      {"y", e.y},
                      {"value", e.value},
                      {"reference", e.reference},
                      {"steps", e.steps},
                      {"s_values", e.s_values},
                      {"quotients", e.quotients},
                      {"usable", usable},
                      {"extrapolant", e.extrapolant ? nlohmann::json(*e.extrapolant) : nlohmann::json(nullptr)},
                      {"converged", e.converged},
                      {"divergent", e.divergent},
                      {"floor_hit", e.floor_hit},
                      {"floor_step", e.floor_step},
                      {"steps_used", e.steps_used}};
  if (!e.scales.empty()) {
    j["scales"] = e.scales;
    j["scale_values"] = e.scale_values;
    if (!e.scale_pairs.empty()) j["scale_pairs"] = pairs;
    if (!e.scale_candidates.empty()) j["scale_candidates"] = e.scale_candidates;
  }
  return j;
}

inline nlohmann::json to_json(const EtaEstimate& e) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : e.candidates)
    cands.push_back({{"shape", c.shape},
                     {"atoms_mu", c.atoms_mu},
                     {"atoms_nu", c.atoms_nu},
                     {"slope0", c.slope0},
                     {"slope1", c.slope1},
                     {"half_dt_w2", c.half_dt_w2},
                     {"w2", c.w2},
                     {"fit_residual", c.fit_residual},
                     {"value", c.value},
                     {"low_confidence", c.low_confidence}});
  nlohmann::json j = {{"variant", e.variant},
                      {"t", e.t},
                      {"x", e.x},
                      {"y", e.y},
                      {"eps", e.eps},
                      {"value", e.value},
                      {"slope0", e.slope0},
                      {"slope1", e.slope1},
                      {"half_dt_w2", e.half_dt_w2},
                      {"w2", e.w2},
                      {"fit_residual", e.fit_residual},
                      {"low_confidence", e.low_confidence},
                      {"shape", e.shape},
                      {"delta_a", e.delta_a},
                      {"density_bandwidth", e.density_bandwidth},
                      {"candidates", cands}};
  if (!e.scales.empty()) {
    nlohmann::json pairs = nlohmann::json::array();
    for (auto [a, b] : e.scale_pairs) pairs.push_back({a, b});
    j["scales"] = e.scales;
    j["scale_values"] = e.scale_values;
    j["scale_pairs"] = pairs;
  }
  return j;
}

inline nlohmann::json to_json(const TensorEigen& e) { return {{"sigma_max", e.sigma_max}, {"sigma_min", e.sigma_min}}; }

inline nlohmann::json to_json(const DeficitEstimate& d) {
  return {{"value", d.value},         {"w2_t", d.w2_t},
          {"w2_s", d.w2_s},           {"integral", d.integral},
          {"integral_coarse", d.integral_coarse},
          {"N", std::isfinite(d.N) ? nlohmann::json(d.N) : nlohmann::json("inf")},
          {"snapshots", d.snapshots}, {"low_confidence", d.low_confidence}};
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* csv_header() { return "kind,t,x_index,y_index,value,flag,steps_used,floor_hit"; }

inline std::string csv_row(const std::string& kind, double t, std::size_t x, std::size_t y, double value,
                           const std::string& flag, std::size_t steps_used, bool floor_hit) {
  return kind + "," + format_double(t) + "," + std::to_string(x) + "," + std::to_string(y) + "," +
         format_double(value) + "," + flag + "," + std::to_string(steps_used) + "," +
         (floor_hit ? "1" : "0");
}

inline std::string theta_flag(const ThetaEstimate& e) {
  if (e.divergent) return "divergent";
  if (e.converged) return "converged";
  return "tail";
}

inline std::string csv_row(const ThetaEstimate& e) {
  const std::string kind = e.variant == "+" ? "theta_plus" : e.variant == "-" ? "theta_minus"
                         : e.variant == "flat" ? "theta_flat" : "theta_star";
  return csv_row(kind, e.t, e.x, e.y, e.value, theta_flag(e), e.steps_used, e.floor_hit);
}

inline std::string csv_row(const EtaEstimate& e) {
  return csv_row(e.variant == "star" ? "eta_star" : "eta_eps", e.t, e.x, e.y, e.value,
                 e.low_confidence ? "low_confidence" : "ok", 0, false);
}

}  // namespace rfprobe

#endif  // RFPROBE_PROBES_HPP
