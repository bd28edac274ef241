#ifndef RFPROBE_SUITE_HPP
#define RFPROBE_SUITE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfprobe/classify.hpp"
#include "rfprobe/flowspace.hpp"
#include "rfprobe/heat.hpp"
#include "rfprobe/probes.hpp"
#include "rfprobe/transport.hpp"

namespace rfprobe {

struct PropertyResult {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
  std::string detail;
};

struct SuiteOptions {
  std::optional<double> t;           // default: three quarters into the window
  std::size_t kernel_rows = 64;      // rows checked for row sums and Chapman-Kolmogorov
  std::size_t measure_pairs = 20;    // duality gap and entropic comparisons
  std::size_t triples = 100;
  std::size_t contraction_pairs = 20;
  double contraction_step = 0.01;
  double contraction_bound = 1.02;
  HeatOptions heat;
  std::uint64_t seed = 0;
};

namespace detail {

inline DiscreteMeasure random_atoms(const FlowSpace& space, double t, const std::vector<std::size_t>& core,
                                    std::size_t max_atoms, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, core.size() - 1), count(1, max_atoms);
  std::uniform_real_distribution<double> weight(0.1, 1.0);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(space.size()));
  const std::size_t k = count(rng);
  for (std::size_t a = 0; a < k; ++a) w(static_cast<Eigen::Index>(core[pick(rng)])) += weight(rng);
  return DiscreteMeasure::normalized(t, w);
}

inline std::vector<std::size_t> row_subset(std::size_t n, std::size_t rows) {
  std::vector<std::size_t> idx;
  if (rows >= n) {
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t k = 0; k < rows; ++k) idx.push_back(k * n / rows);
  return idx;
}

}  // namespace detail

// Always-on property checks: metric axioms, Markov rows, Chapman-Kolmogorov, transport
// duality, entropic-vs-exact ordering, Wasserstein triangle inequality and heat contraction.
inline std::vector<PropertyResult> run_core_suite(const FlowSpace& space, const SuiteOptions& opts = {}) {
  const TimeWindow w = space.window();
  const double t = opts.t ? *opts.t : w.lo + 0.75 * (w.hi - w.lo);
  if (!w.contains(t)) throw Error(ErrorKind::invalid_input, "suite time outside the window");
  std::vector<PropertyResult> out;
  std::mt19937_64 rng(opts.seed);
  const auto core = detail::core_or_all(space);

  {
    PropertyResult r{"metric_axioms", 0.0, 0.0, true, ""};
    for (double tk : {w.lo, 0.5 * (w.lo + w.hi), w.hi}) {
      const MetricCheck mc = check_metric_axioms(space, tk, 300, 10000, opts.seed);
      if (!mc.ok) {
        r.pass = false;
        r.detail = mc.message + " at t = " + format_double(tk) + " triple (" + std::to_string(mc.i) + "," +
                   std::to_string(mc.j) + "," + std::to_string(mc.k) + ")";
        break;
      }
      r.value = std::max(r.value, std::max(0.0, mc.worst_excess));
    }
    r.threshold = space.metric_tol();
    out.push_back(r);
  }

  // The bandwidth is pinned so the kernels compose.
  HeatOptions heat = opts.heat;
  if (!heat.bandwidth) heat.bandwidth = HeatFlow(space, opts.heat).bandwidth(t);
  HeatFlow flow(space, heat);
  const double span = std::min(0.05, (t - w.lo) / 3.0);
  const auto rows_idx = detail::row_subset(space.size(), opts.kernel_rows);
  const Eigen::MatrixXd rows = detail::dirac_rows(space.size(), rows_idx);
  if (span > 0.0) {
    const double s = t - span, r0 = t - 2.0 * span;
    const auto direct = flow.propagate(t, rows, {s, r0});
    const double dev = std::max((direct[0].rowwise().sum().array() - 1.0).abs().maxCoeff(),
                                (direct[1].rowwise().sum().array() - 1.0).abs().maxCoeff());
    out.push_back({"markov_row_sums", dev, 1e-9, dev <= 1e-9,
                   std::to_string(rows_idx.size()) + " rows, s = " + format_double(s)});
    const auto composed = flow.propagate(s, direct[0], {r0});
    const double ck = (direct[1] - composed[0]).cwiseAbs().maxCoeff();
    out.push_back({"chapman_kolmogorov", ck, 1e-6, ck <= 1e-6,
                   "r = " + format_double(r0) + ", s = " + format_double(s) + ", t = " + format_double(t)});
  } else {
    out.push_back({"markov_row_sums", 0.0, 1e-9, true, "static window: propagator is the identity"});
    out.push_back({"chapman_kolmogorov", 0.0, 1e-6, true, "static window: propagator is the identity"});
  }

  {
    double worst_gap = 0.0, worst_order = -std::numeric_limits<double>::infinity();
    TransportOptions ent;
    ent.method = TransportMethod::entropic;
    for (std::size_t p = 0; p < opts.measure_pairs; ++p) {
      const auto mu = detail::random_atoms(space, t, core, 10, rng);
      const auto nu = detail::random_atoms(space, t, core, 10, rng);
      const TransportPlan exact = w2(space, t, mu, nu);
      const double scale = std::max(std::abs(exact.primal), 1e-300);
      worst_gap = std::max(worst_gap, std::abs(exact.gap) / scale);
      const TransportPlan e = w2(space, t, mu, nu, ent);
      worst_order = std::max(worst_order, exact.w2 - e.w2);
    }
    out.push_back({"ot_duality_gap", worst_gap, 1e-8, worst_gap <= 1e-8,
                   std::to_string(opts.measure_pairs) + " random pairs, relative"});
    out.push_back({"entropic_above_exact", worst_order, 1e-9, worst_order <= 1e-9,
                   "max of exact minus entropic W^2"});
  }

  {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < opts.triples; ++k) {
      const auto a = detail::random_atoms(space, t, core, 3, rng);
      const auto b = detail::random_atoms(space, t, core, 3, rng);
      const auto c = detail::random_atoms(space, t, core, 3, rng);
      const double ab = w2(space, t, a, b).w(), bc = w2(space, t, b, c).w(), ac = w2(space, t, a, c).w();
      worst = std::max(worst, ac - ab - bc);
    }
    out.push_back({"wasserstein_triangle", worst, 1e-9, worst <= 1e-9,
                   std::to_string(opts.triples) + " random triples"});
  }

  {
    const double h = std::min(opts.contraction_step, t - w.lo);
    const ContractionResult c = check_contraction(flow, t, t - h, opts.contraction_pairs, rng());
    out.push_back({"heat_contraction", c.worst_ratio, opts.contraction_bound, c.worst_ratio <= opts.contraction_bound,
                   std::to_string(c.evaluated) + " measure pairs, s = t - " + format_double(h)});
  }
  return out;
}

inline bool all_pass(const std::vector<PropertyResult>& r) {
  return std::all_of(r.begin(), r.end(), [](const PropertyResult& p) { return p.pass; });
}

inline nlohmann::json to_json(const std::vector<PropertyResult>& results) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : results)
    a.push_back({{"name", r.name}, {"value", r.value}, {"threshold", r.threshold}, {"pass", r.pass}, {"detail", r.detail}});
  return a;
}

inline std::string suite_table(const std::vector<PropertyResult>& results) {
  std::ostringstream os;
  os << "property                 value                    threshold  result\n";
  for (const auto& r : results) {
    std::string name = r.name;
    name.resize(24, ' ');
    std::string value = format_double(r.value);
    value.resize(24, ' ');
    os << name << " " << value << " " << format_double(r.threshold) << "  " << (r.pass ? "PASS" : "FAIL");
    if (!r.detail.empty()) os << "  (" << r.detail << ")";
    os << "\n";
  }
  return os.str();
}

}  // namespace rfprobe

#endif  // RFPROBE_SUITE_HPP
