#ifndef RFPROBE_CLASSIFY_HPP
#define RFPROBE_CLASSIFY_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfprobe/error.hpp"
#include "rfprobe/flowspace.hpp"
#include "rfprobe/heat.hpp"
#include "rfprobe/parallel.hpp"
#include "rfprobe/probes.hpp"
#include "rfprobe/transport.hpp"

namespace rfprobe {

enum class Status { holds, fails, inconclusive };

inline const char* to_string(Status s) {
  switch (s) {
    case Status::holds: return "holds";
    case Status::fails: return "fails";
    case Status::inconclusive: return "inconclusive";
  }
  return "?";
}

// Margins are signed so that larger is worse; a check fails when a margin exceeds its tolerance.
struct Witness {
  std::string check;
  double t = 0.0;
  std::size_t x = 0, y = 0;
  double s = kNaN;    // rough checks
  double eps = kNaN;  // weak checks
  double margin = 0.0;
  bool divergent = false;
};

struct CheckVerdict {
  std::string name;
  Status status = Status::holds;
  double tol = 0.0;
  double worst_margin = -std::numeric_limits<double>::infinity();
  std::optional<Witness> worst;
  std::vector<Witness> witnesses;  // margins beyond tolerance, worst first
  std::size_t evaluated = 0;
  std::size_t truncated = 0;  // samples dropped because no step cleared the resolution floor
  bool divergent = false;
};

struct TimeVerdict {
  double t = 0.0;
  std::vector<CheckVerdict> checks;
};

struct FlowVerdict {
  std::string mode;  // "rough" or "weak"
  std::vector<TimeVerdict> times;
  nlohmann::json config;
  std::uint64_t seed = 0;

  // Aggregate over t: fails beats inconclusive beats holds.
  Status status(const std::string& check) const {
    Status out = Status::holds;
    bool seen = false;
    for (const auto& tv : times)
      for (const auto& c : tv.checks) {
        if (c.name != check) continue;
        seen = true;
        if (c.status == Status::fails) return Status::fails;
        if (c.status == Status::inconclusive) out = Status::inconclusive;
      }
    if (!seen) throw Error(ErrorKind::invalid_input, "verdict has no check named " + check);
    return out;
  }

  std::vector<std::string> check_names() const {
    std::vector<std::string> names;
    for (const auto& tv : times)
      for (const auto& c : tv.checks)
        if (std::find(names.begin(), names.end(), c.name) == names.end()) names.push_back(c.name);
    return names;
  }

  bool any(Status s) const {
    for (const auto& n : check_names())
      if (status(n) == s) return true;
    return false;
  }
};

struct RoughOptions {
  std::vector<double> t_set;  // empty: 5 evenly spaced interior times
  std::size_t pair_quota = 10;
  ThetaOptions theta;
  double tol = 0.1;
  double max_pair_distance = 0.5;  // super pairs are drawn with d_t in [separation, this]
  double min_separation = 2.0;     // in local spacings
  double cover_radius = 5.0;       // cover balls for the sub check, in local spacings
  std::optional<double> N;         // also run the N-super deficit check
  double n_super_tol = 1e-3;
  std::size_t deficit_snapshots = 16;
  HeatOptions heat;
  std::uint64_t seed = 0;
};

struct WeakOptions {
  std::vector<double> t_set;
  std::size_t pair_quota = 10;
  std::size_t point_quota = 3;  // sampled points for the sub check
  EtaOptions eta;
  EpsRule eps_rule;
  double tol = 0.2;
  double min_distance = 0.4;  // pair distance band
  double max_distance = 0.6;
  std::size_t star_center_pairs = 2;
  std::size_t star_random_pairs = 1;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<double> default_t_set(const TimeWindow& w, double room) {
  const double a = w.lo + room;
  if (!(w.hi > a)) {
    if (w.hi == w.lo) return {w.lo};
    throw Error(ErrorKind::invalid_input, "time window is too short for the schedule");
  }
  std::vector<double> ts;
  for (int k = 1; k <= 5; ++k) ts.push_back(a + (w.hi - a) * k / 6.0);
  return ts;
}

inline std::vector<std::size_t> core_or_all(const FlowSpace& space) {
  auto core = space.core_points();
  if (core.size() < 2) {
    core.resize(space.size());
    std::iota(core.begin(), core.end(), std::size_t{0});
  }
  return core;
}

// Random pairs from the core with distance in [max(separation, lo), hi].
inline std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(
    const FlowSpace& space, double t, std::size_t quota, double min_sep_factor, double lo, double hi,
    std::mt19937_64& rng) {
  const auto core = core_or_all(space);
  std::uniform_int_distribution<std::size_t> pick(0, core.size() - 1);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  const std::size_t attempts = 2000 * std::max<std::size_t>(quota, 1);
  for (std::size_t k = 0; k < attempts && pairs.size() < quota; ++k) {
    std::size_t a = core[pick(rng)], b = core[pick(rng)];
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    const double d = space.distance(t, a, b);
    const double sep = min_sep_factor * std::max(space.local_spacing(t, a), space.local_spacing(t, b));
    if (d < sep || d < lo || d > hi) continue;
    if (std::find(pairs.begin(), pairs.end(), std::make_pair(a, b)) != pairs.end()) continue;
    pairs.emplace_back(a, b);
  }
  if (pairs.size() < quota)
    throw Error(ErrorKind::resolution, "found only " + std::to_string(pairs.size()) + " of " +
                                           std::to_string(quota) + " admissible pairs at t = " +
                                           std::to_string(t));
  return pairs;
}

// Local pairs (center, z) with z in a cover ball around the center. Distinguished points are
// used as centers first.
inline std::vector<std::pair<std::size_t, std::size_t>> cover_pairs(const FlowSpace& space, double t,
                                                                    std::size_t quota, double radius_factor,
                                                                    double min_sep_factor, std::mt19937_64& rng) {
  const auto core = core_or_all(space);
  std::vector<std::size_t> centers = space.distinguished_points();
  std::uniform_int_distribution<std::size_t> pick(0, core.size() - 1);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::size_t next = 0;
  const std::size_t attempts = 200 * std::max<std::size_t>(quota, 1);
  for (std::size_t k = 0; k < attempts && pairs.size() < quota; ++k) {
    const std::size_t c = next < centers.size() ? centers[next++] : core[pick(rng)];
    const double radius = radius_factor * space.local_spacing(t, c);
    std::vector<std::size_t> ball;
    for (std::size_t z : space.ball(t, c, radius)) {
      const double sep = min_sep_factor * std::max(space.local_spacing(t, c), space.local_spacing(t, z));
      if (z != c && space.distance(t, c, z) >= sep) ball.push_back(z);
    }
    if (ball.empty()) continue;
    std::uniform_int_distribution<std::size_t> in(0, ball.size() - 1);
    auto p = std::make_pair(c, ball[in(rng)]);
    if (std::find(pairs.begin(), pairs.end(), p) != pairs.end()) continue;
    pairs.push_back(p);
  }
  if (pairs.empty()) throw Error(ErrorKind::resolution, "no local pair inside the cover balls");
  return pairs;
}

inline void finish(CheckVerdict& v, std::vector<Witness>& all) {
  std::stable_sort(all.begin(), all.end(), [](const Witness& a, const Witness& b) { return a.margin > b.margin; });
  for (const auto& w : all) {
    v.divergent = v.divergent || w.divergent;
    if (w.margin > v.worst_margin) {
      v.worst_margin = w.margin;
      v.worst = w;
    }
    if (w.margin > v.tol) v.witnesses.push_back(w);
  }
  v.evaluated = all.size();
  if (!v.witnesses.empty())
    v.status = Status::fails;
  else if (v.evaluated == 0)
    v.status = Status::inconclusive;
  else
    v.status = Status::holds;
}

inline double super_margin(double w, double d) { return w / d - 1.0; }
inline double sub_margin(double w, double d, double h) { return (1.0 - (w * w) / (d * d)) / h; }

// Small-support measure around a point for the deficit check.
inline DiscreteMeasure blob(const FlowSpace& space, double t, std::size_t c) {
  const double r = 2.0 * space.local_spacing(t, c);
  return DiscreteMeasure::normalized(t, ball_measure(space, t, c, r, 0));
}

}  // namespace detail

// Margins of one rough-check sample, recomputed from scratch; used for witnesses and their
// re-evaluation alike.
inline std::vector<Witness> rough_pair_margins(const HeatFlow& flow, double t, std::size_t x, std::size_t y,
                                               const ThetaOptions& theta, bool sub) {
  const auto [plus, minus] = theta_pair(flow, t, x, y, theta);
  (void)minus;
  std::vector<Witness> out;
  std::size_t finest = plus.steps.size();
  for (std::size_t k = 0; k < plus.steps.size(); ++k) {
    if (!plus.usable[k]) continue;
    finest = k;
    if (!sub) {
      const double w = plus.reference * std::exp(-plus.quotients[k] * plus.steps[k]);
      out.push_back({"rough_super", t, x, y, plus.s_values[k], kNaN, detail::super_margin(w, plus.reference),
                     plus.divergent});
    }
  }
  if (sub && finest < plus.steps.size()) {
    const double h = plus.steps[finest];
    const double w = plus.reference * std::exp(-plus.quotients[finest] * h);
    out.push_back({"rough_sub", t, x, y, plus.s_values[finest], kNaN, detail::sub_margin(w, plus.reference, h),
                   plus.divergent});
  }
  return out;
}

inline FlowVerdict classify_rough(const FlowSpace& space, const RoughOptions& opts = {}) {
  if (opts.pair_quota < 10) throw Error(ErrorKind::invalid_input, "rough classification needs at least 10 pairs per t");
  if (!(opts.tol >= 0.0)) throw Error(ErrorKind::invalid_input, "tolerance must be non-negative");
  const auto steps = opts.theta.schedule.steps();
  const std::vector<double> t_set =
      opts.t_set.empty() ? detail::default_t_set(space.window(), steps.front()) : opts.t_set;
  HeatFlow flow(space, opts.heat);
  std::mt19937_64 rng(opts.seed);

  FlowVerdict verdict;
  verdict.mode = "rough";
  verdict.seed = opts.seed;
  for (double t : t_set) {
    detail::check_steps(space, t, steps);
    const auto super_pairs =
        detail::sample_pairs(space, t, opts.pair_quota, opts.min_separation, 0.0, opts.max_pair_distance, rng);
    const auto sub_pairs =
        detail::cover_pairs(space, t, opts.pair_quota, opts.cover_radius, opts.min_separation, rng);

    TimeVerdict tv;
    tv.t = t;
    for (int which = 0; which < 2; ++which) {
      const bool sub = which == 1;
      const auto& pairs = sub ? sub_pairs : super_pairs;
      std::vector<std::vector<Witness>> per(pairs.size());
      std::vector<char> truncated(pairs.size(), 0);
      parallel_for(pairs.size(), [&](std::size_t p) {
        try {
          per[p] = rough_pair_margins(flow, t, pairs[p].first, pairs[p].second, opts.theta, sub);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::resolution) throw;
          truncated[p] = 1;
        }
      });
      CheckVerdict cv;
      cv.name = sub ? "rough_sub" : "rough_super";
      cv.tol = opts.tol;
      std::vector<Witness> all;
      for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
      for (char c : truncated) cv.truncated += c;
      detail::finish(cv, all);
      tv.checks.push_back(std::move(cv));
    }
    if (opts.N) {
      CheckVerdict cv;
      cv.name = "n_super";
      cv.tol = opts.n_super_tol;
      const double s = t - steps.front();
      std::vector<Witness> all(super_pairs.size());
      parallel_for(super_pairs.size(), [&](std::size_t p) {
        auto [x, y] = super_pairs[p];
        const auto d = nsuper_deficit(flow, t, s, detail::blob(space, t, x), detail::blob(space, t, y), *opts.N,
                                      opts.deficit_snapshots);
        all[p] = {"n_super", t, x, y, s, kNaN, -d.value / d.w2_t, false};
      });
      detail::finish(cv, all);
      tv.checks.push_back(std::move(cv));
    }
    verdict.times.push_back(std::move(tv));
  }
  nlohmann::json cfg = {{"t_set", t_set},
                        {"pair_quota", opts.pair_quota},
                        {"h0", opts.theta.schedule.h0},
                        {"K", opts.theta.schedule.K},
                        {"ceiling", opts.theta.ceiling},
                        {"floor_factor", opts.theta.floor_factor},
                        {"tol", opts.tol},
                        {"max_pair_distance", opts.max_pair_distance},
                        {"min_separation", opts.min_separation},
                        {"cover_radius", opts.cover_radius},
                        {"seed", opts.seed}};
  if (opts.N) {
    cfg["N"] = std::isfinite(*opts.N) ? nlohmann::json(*opts.N) : nlohmann::json("inf");
    cfg["n_super_tol"] = opts.n_super_tol;
    cfg["deficit_snapshots"] = opts.deficit_snapshots;
  }
  verdict.config = std::move(cfg);
  return verdict;
}

inline FlowVerdict classify_weak(const FlowSpace& space, const WeakOptions& opts = {}) {
  if (!space.has_geodesic()) throw Error(ErrorKind::unsupported, "weak classification needs a geodesic evaluator");
  if (opts.pair_quota == 0 || opts.point_quota == 0) throw Error(ErrorKind::invalid_input, "quotas must be positive");
  if (!(opts.tol >= 0.0)) throw Error(ErrorKind::invalid_input, "tolerance must be non-negative");
  const double room = space.is_static() ? 0.0 : opts.eta.time_steps.front();
  const std::vector<double> t_set = opts.t_set.empty() ? detail::default_t_set(space.window(), room) : opts.t_set;
  std::mt19937_64 rng(opts.seed);

  FlowVerdict verdict;
  verdict.mode = "weak";
  verdict.seed = opts.seed;
  for (double t : t_set) {
    if (!space.window().contains(t)) throw Error(ErrorKind::invalid_input, "t outside the time window");
    EtaOptions eo = opts.eta;
    if (!eo.spacing) eo.spacing = space.median_spacing(t);
    TimeVerdict tv;
    tv.t = t;

    const auto pairs = detail::sample_pairs(space, t, opts.pair_quota, 2.0, opts.min_distance, opts.max_distance, rng);
    std::vector<std::optional<Witness>> sup(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t p) {
      auto [x, y] = pairs[p];
      const double local = std::max(space.local_spacing(t, x), space.local_spacing(t, y));
      const double eps = opts.eps_rule(space.distance(t, x, y), local);
      try {
        const auto e = eta_eps(space, t, x, y, eps, eo);
        sup[p] = Witness{"weak_super", t, x, y, kNaN, eps, -e.value, false};
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::resolution && err.kind() != ErrorKind::excluded_pair) throw;
      }
    });
    CheckVerdict super;
    super.name = "weak_super";
    super.tol = opts.tol;
    std::vector<Witness> all;
    for (auto& w : sup) {
      if (w) all.push_back(*w);
      else ++super.truncated;
    }
    detail::finish(super, all);
    tv.checks.push_back(std::move(super));

    // sub: eta* surrogate at sampled points, max over band pairs in the ball of radius max_distance
    const auto core = detail::core_or_all(space);
    std::vector<std::size_t> points;
    for (std::size_t p : space.distinguished_points())
      if (points.size() < opts.point_quota) points.push_back(p);
    std::uniform_int_distribution<std::size_t> pick(0, core.size() - 1);
    for (std::size_t k = 0; points.size() < opts.point_quota && k < 100 * opts.point_quota; ++k) {
      const std::size_t c = core[pick(rng)];
      if (std::find(points.begin(), points.end(), c) == points.end()) points.push_back(c);
    }
    std::vector<std::uint64_t> seeds;
    for (std::size_t k = 0; k < points.size(); ++k) seeds.push_back(rng());
    std::vector<std::optional<Witness>> sub(points.size());
    parallel_for(points.size(), [&](std::size_t p) {
      EtaStarOptions so;
      so.eta = eo;
      so.eps_rule = opts.eps_rule;
      so.center_pairs = opts.star_center_pairs;
      so.random_pairs = opts.star_random_pairs;
      so.min_distance = opts.min_distance;
      so.max_distance = opts.max_distance;
      so.seed = seeds[p];
      try {
        const auto e = eta_star(space, t, points[p], {opts.max_distance}, so);
        sub[p] = Witness{"weak_sub", t, e.scale_pairs.back().first, e.scale_pairs.back().second, kNaN, e.eps, e.value,
                         false};
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::resolution && err.kind() != ErrorKind::excluded_pair) throw;
      }
    });
    CheckVerdict subv;
    subv.name = "weak_sub";
    subv.tol = opts.tol;
    all.clear();
    for (auto& w : sub) {
      if (w) all.push_back(*w);
      else ++subv.truncated;
    }
    detail::finish(subv, all);
    tv.checks.push_back(std::move(subv));
    verdict.times.push_back(std::move(tv));
  }
  verdict.config = {{"t_set", t_set},
                    {"pair_quota", opts.pair_quota},
                    {"point_quota", opts.point_quota},
                    {"tol", opts.tol},
                    {"eps_fraction", opts.eps_rule.fraction},
                    {"eps_min_spacings", opts.eps_rule.min_spacings},
                    {"delta_a", opts.eta.delta_a},
                    {"shapes", opts.eta.shapes},
                    {"density_bandwidth", opts.eta.density_bandwidth},
                    {"min_distance", opts.min_distance},
                    {"max_distance", opts.max_distance},
                    {"seed", opts.seed}};
  return verdict;
}

// Recomputes the margin of a stored witness from its input tuple.
inline double reevaluate(const FlowSpace& space, const Witness& w, const RoughOptions& opts) {
  HeatFlow flow(space, opts.heat);
  if (w.check == "rough_super" || w.check == "rough_sub") {
    for (const auto& m : rough_pair_margins(flow, w.t, w.x, w.y, opts.theta, w.check == "rough_sub"))
      if (m.s == w.s) return m.margin;
    throw Error(ErrorKind::invalid_input, "witness step is not part of the schedule");
  }
  if (w.check == "n_super") {
    if (!opts.N) throw Error(ErrorKind::invalid_input, "n_super witness needs N");
    const auto d = nsuper_deficit(flow, w.t, w.s, detail::blob(space, w.t, w.x), detail::blob(space, w.t, w.y),
                                  *opts.N, opts.deficit_snapshots);
    return -d.value / d.w2_t;
  }
  throw Error(ErrorKind::invalid_input, "not a rough witness: " + w.check);
}

inline double reevaluate(const FlowSpace& space, const Witness& w, const WeakOptions& opts) {
  if (w.check != "weak_super" && w.check != "weak_sub") throw Error(ErrorKind::invalid_input, "not a weak witness: " + w.check);
  EtaOptions eo = opts.eta;
  if (!eo.spacing) eo.spacing = space.median_spacing(w.t);
  const double v = eta_eps(space, w.t, w.x, w.y, w.eps, eo).value;
  return w.check == "weak_super" ? -v : v;
}

// ---------------------------------------------------------------------------------------
// Cross-checks

struct ContractionResult {
  double worst_ratio = 1.0;
  std::size_t evaluated = 0;
  std::vector<std::size_t> worst_mu, worst_nu;  // atom indices of the worst pair
  std::vector<double> ratios;
};

// Worst ratio W_s(P mu, P nu) / W_t(mu, nu) over random mixtures of 1 to 5 atoms.
inline ContractionResult check_contraction(const HeatFlow& flow, double t, double s, std::size_t measure_quota,
                                           std::uint64_t seed = 0) {
  const FlowSpace& space = flow.space();
  if (s > t) throw Error(ErrorKind::invalid_input, "contraction check needs s <= t");
  if (measure_quota == 0) throw Error(ErrorKind::invalid_input, "measure quota must be positive");
  ContractionResult out;
  if (s == t) {
    out.ratios.assign(measure_quota, 1.0);
    out.evaluated = measure_quota;
    return out;
  }
  const auto core = detail::core_or_all(space);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, core.size() - 1), atoms(1, 5);
  std::uniform_real_distribution<double> weight(0.1, 1.0);
  const Eigen::Index n = static_cast<Eigen::Index>(space.size());
  std::vector<std::vector<std::size_t>> idx(2 * measure_quota);
  Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(2 * measure_quota), n);
  for (std::size_t r = 0; r < 2 * measure_quota; ++r) {
    const std::size_t k = atoms(rng);
    for (std::size_t a = 0; a < k; ++a) {
      const std::size_t i = core[pick(rng)];
      idx[r].push_back(i);
      rows(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) += weight(rng);
    }
    rows.row(static_cast<Eigen::Index>(r)) /= rows.row(static_cast<Eigen::Index>(r)).sum();
  }
  const auto states = flow.propagate(t, rows, {s});
  out.ratios.assign(measure_quota, kNaN);
  parallel_for(measure_quota, [&](std::size_t p) {
    const auto r0 = static_cast<Eigen::Index>(2 * p), r1 = r0 + 1;
    const DiscreteMeasure mu(t, rows.row(r0).transpose()), nu(t, rows.row(r1).transpose());
    const double wt = w2(space, t, mu, nu).w();
    if (!(wt > 0.0)) return;
    const double ws = detail::measure_distance(space, s, states[0].row(r0).transpose(), states[0].row(r1).transpose());
    out.ratios[p] = ws / wt;
  });
  out.worst_ratio = -std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < measure_quota; ++p) {
    if (std::isnan(out.ratios[p])) continue;
    ++out.evaluated;
    if (out.ratios[p] > out.worst_ratio) {
      out.worst_ratio = out.ratios[p];
      out.worst_mu = idx[2 * p];
      out.worst_nu = idx[2 * p + 1];
    }
  }
  if (out.evaluated == 0) throw Error(ErrorKind::invalid_input, "all sampled measure pairs coincide");
  return out;
}

inline ContractionResult check_contraction(const FlowSpace& space, double t, double s, std::size_t measure_quota,
                                           std::uint64_t seed = 0) {
  return check_contraction(HeatFlow(space), t, s, measure_quota, seed);
}

struct EtaThetaRecord {
  double t = 0.0;
  std::size_t x = 0, y = 0;
  double eta = kNaN;
  double theta_flat = kNaN;
  double excess = kNaN;  // eta - theta_flat
};

struct EtaThetaReport {
  std::vector<EtaThetaRecord> records;
  std::vector<EtaThetaRecord> violations;
  std::size_t skipped = 0;
};

struct EtaThetaOptions {
  ThetaOptions theta;
  std::vector<double> flat_scales{2.0, 1.2};  // theta_flat support scales, in local spacings
  EtaOptions eta;
  EpsRule eps_rule;
  double min_distance = 0.4;
  double max_distance = 0.6;
  HeatOptions heat;
  std::uint64_t seed = 0;
};

inline EtaThetaReport check_eta_leq_theta_flat(const FlowSpace& space, const std::vector<double>& t_set,
                                               std::size_t pair_quota, double tol,
                                               const EtaThetaOptions& opts = {}) {
  if (!space.has_geodesic()) throw Error(ErrorKind::unsupported, "eta needs a geodesic evaluator");
  HeatFlow flow(space, opts.heat);
  std::mt19937_64 rng(opts.seed);
  EtaThetaReport report;
  for (double t : t_set) {
    EtaOptions eo = opts.eta;
    if (!eo.spacing) eo.spacing = space.median_spacing(t);
    const auto pairs = detail::sample_pairs(space, t, pair_quota, 2.0, opts.min_distance, opts.max_distance, rng);
    std::vector<std::optional<EtaThetaRecord>> recs(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t p) {
      auto [x, y] = pairs[p];
      const double local = std::max(space.local_spacing(t, x), space.local_spacing(t, y));
      std::vector<double> scales;
      for (double f : opts.flat_scales) scales.push_back(f * local);
      try {
        EtaThetaRecord r{t, x, y};
        r.eta = eta_eps(space, t, x, y, opts.eps_rule(space.distance(t, x, y), local), eo).value;
        r.theta_flat = theta_flat(flow, t, x, y, scales, opts.theta).value;
        r.excess = r.eta - r.theta_flat;
        recs[p] = r;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::resolution && e.kind() != ErrorKind::excluded_pair) throw;
      }
    });
    for (auto& r : recs) {
      if (!r) {
        ++report.skipped;
        continue;
      }
      report.records.push_back(*r);
      if (r->excess > tol) report.violations.push_back(*r);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const Witness& w) {
  nlohmann::json j = {{"check", w.check}, {"t", w.t}, {"x", w.x}, {"y", w.y}, {"margin", w.margin}};
  if (!std::isnan(w.s)) j["s"] = w.s;
  if (!std::isnan(w.eps)) j["eps"] = w.eps;
  j["divergent"] = w.divergent;
  return j;
}

inline nlohmann::json to_json(const FlowVerdict& v) {
  nlohmann::json times = nlohmann::json::array();
  for (const auto& tv : v.times) {
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& c : tv.checks) {
      nlohmann::json wit = nlohmann::json::array();
      for (const auto& w : c.witnesses) wit.push_back(to_json(w));
      checks.push_back({{"name", c.name},
                        {"status", to_string(c.status)},
                        {"tol", c.tol},
                        {"worst_margin", c.evaluated ? nlohmann::json(c.worst_margin) : nlohmann::json(nullptr)},
                        {"worst", c.worst ? to_json(*c.worst) : nlohmann::json(nullptr)},
                        {"witnesses", wit},
                        {"evaluated", c.evaluated},
                        {"truncated", c.truncated},
                        {"divergent", c.divergent}});
    }
    times.push_back({{"t", tv.t}, {"checks", checks}});
  }
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& n : v.check_names()) summary[n] = to_string(v.status(n));
  return {{"mode", v.mode}, {"seed", v.seed}, {"config", v.config}, {"summary", summary}, {"times", times}};
}

inline nlohmann::json to_json(const ContractionResult& c) {
  return {{"worst_ratio", c.worst_ratio}, {"evaluated", c.evaluated}, {"worst_mu", c.worst_mu},
          {"worst_nu", c.worst_nu},       {"ratios", c.ratios}};
}

inline nlohmann::json to_json(const EtaThetaReport& r) {
  auto rec = [](const EtaThetaRecord& e) {
    return nlohmann::json{{"t", e.t}, {"x", e.x}, {"y", e.y}, {"eta", e.eta}, {"theta_flat", e.theta_flat},
                          {"excess", e.excess}};
  };
  nlohmann::json a = nlohmann::json::array(), b = nlohmann::json::array();
  for (const auto& e : r.records) a.push_back(rec(e));
  for (const auto& e : r.violations) b.push_back(rec(e));
  return {{"records", a}, {"violations", b}, {"skipped", r.skipped}};
}

inline std::string summary_text(const FlowVerdict& v) {
  std::ostringstream os;
  os << "mode: " << v.mode << "  seed: " << v.seed << "\n";
  for (const auto& n : v.check_names()) os << "  " << n << ": " << to_string(v.status(n)) << "\n";
  for (const auto& tv : v.times) {
    os << "t = " << format_double(tv.t) << "\n";
    for (const auto& c : tv.checks) {
      os << "  " << c.name << ": " << to_string(c.status) << " (evaluated " << c.evaluated << ", truncated "
         << c.truncated << ", worst margin "
         << (c.evaluated ? format_double(c.worst_margin) : std::string("n/a")) << ", tol " << format_double(c.tol)
         << (c.divergent ? ", divergent" : "") << ")\n";
      for (const auto& w : c.witnesses) {
        os << "    witness x=" << w.x << " y=" << w.y;
        if (!std::isnan(w.s)) os << " s=" << format_double(w.s);
        if (!std::isnan(w.eps)) os << " eps=" << format_double(w.eps);
        os << " margin=" << format_double(w.margin) << "\n";
      }
    }
  }
  return os.str();
}

}  // namespace rfprobe

#endif  // RFPROBE_CLASSIFY_HPP
