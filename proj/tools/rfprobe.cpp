#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rfprobe/classify.hpp"
#include "rfprobe/error.hpp"
#include "rfprobe/flowspace.hpp"
#include "rfprobe/heat.hpp"
#include "rfprobe/parallel.hpp"
#include "rfprobe/probes.hpp"
#include "rfprobe/report.hpp"
#include "rfprobe/space_io.hpp"
#include "rfprobe/suite.hpp"
#include "rfprobe/transport.hpp"

using nlohmann::json;
using namespace rfprobe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitFails = 3;
constexpr int kExitInconclusive = 4;

struct RunConfig {
  std::string space;
  std::string params;
  int refine = 0;
  std::optional<double> t;
  std::vector<double> t_set;
  std::size_t pairs = 10;
  double h0 = 0.02;
  int k = 4;
  std::vector<double> eps;
  std::optional<double> tol;
  std::string method = "exact";
  std::optional<double> bandwidth;
  std::uint64_t seed = 0;
  std::string out;
  std::string report;
  std::string dump_kernel;
  std::string dump_plan;
  // subcommand specific
  std::string variant;
  std::string mode = "rough";
  std::string kind = "rigidity";
  std::string suite = "core";
  std::optional<double> N;
  std::optional<double> s;
  std::vector<double> radii;
  std::optional<double> min_distance;
  std::optional<double> max_distance;
};

json config_json(const RunConfig& c, const std::string& command) {
  json j = {{"command", command}, {"space", c.space},     {"params", c.params}, {"refine", c.refine},
            {"pairs", c.pairs},   {"h0", c.h0},           {"k", c.k},           {"method", c.method},
            {"seed", c.seed},     {"t_set", c.t_set},     {"eps", c.eps}};
  j["t"] = c.t ? json(*c.t) : json(nullptr);
  j["tol"] = c.tol ? json(*c.tol) : json(nullptr);
  j["bandwidth"] = c.bandwidth ? json(*c.bandwidth) : json(nullptr);
  if (!c.variant.empty()) j["variant"] = c.variant;
  return j;
}

void refine_spec(json& spec, int level) {
  if (level <= 0) return;
  if (!spec.contains("params")) throw Error(ErrorKind::unsupported, "--refine applies to model spaces only");
  json& p = spec["params"];
  const long factor = 1L << level;
  const std::string kind = spec.value("kind", "");
  const long fallback = kind == "gaussian" ? 200 : kind == "sphere" ? 400 : kind == "cone" ? 300 : 0;
  const char* key = kind == "gaussian" ? "resolution" : kind == "suspension" ? "polar_count" : "count";
  if (kind == "cone" && p.contains("rings") && p["rings"].get<long>() > 0) key = "rings";
  if (fallback > 0 || p.contains(key)) p[key] = (p.contains(key) ? p[key].get<long>() : fallback) * factor;
  if (p.contains("base")) refine_spec(p["base"], level);
}

json read_spec(const RunConfig& c) {
  if (c.space.empty()) throw Error(ErrorKind::schema, "--space is required");
  if (std::filesystem::is_regular_file(c.space)) {
    std::ifstream in(c.space);
    try {
      return json::parse(in);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::schema, c.space + ": " + e.what());
    }
  }
  if (c.space.find('/') != std::string::npos || c.space.find(".json") != std::string::npos)
    throw Error(ErrorKind::io, "cannot open " + c.space);
  return {{"kind", c.space}, {"params", parse_inline_params(c.params)}};
}

FlowSpace load(const RunConfig& c, int level) {
  json spec = read_spec(c);
  if (level > 0) {
    if (spec.value("kind", "") == "custom") throw Error(ErrorKind::unsupported, "--refine needs a model space");
    refine_spec(spec, level);
  }
  return space_from_json(spec);
}

HeatOptions heat_options(const RunConfig& c) {
  HeatOptions h;
  if (c.bandwidth) {
    if (!(*c.bandwidth > 0.0)) throw Error(ErrorKind::invalid_input, "--bandwidth must be positive");
    h.bandwidth = *c.bandwidth;
  }
  return h;
}

TransportOptions transport_options(const RunConfig& c) {
  TransportOptions t;
  t.method = c.method == "entropic" ? TransportMethod::entropic : TransportMethod::exact;
  return t;
}

ThetaOptions theta_options(const RunConfig& c) {
  if (!(c.h0 > 0.0)) throw Error(ErrorKind::invalid_input, "--h0 must be positive");
  if (c.k < 1) throw Error(ErrorKind::invalid_input, "--k must be at least 1");
  ThetaOptions o;
  o.schedule.h0 = c.h0;
  o.schedule.K = c.k;
  o.transport = transport_options(c);
  return o;
}

double pick_t(const RunConfig& c, const FlowSpace& space) {
  const TimeWindow w = space.window();
  const double t = c.t ? *c.t : 0.5 * (w.lo + w.hi);
  if (!w.contains(t)) throw Error(ErrorKind::invalid_input, "--t outside the time window");
  return t;
}

std::string report_text_path(const std::string& path) {
  std::filesystem::path p(path);
  if (p.extension() == ".json") return p.replace_extension(".txt").string();
  return path + ".txt";
}

void emit_csv(const RunConfig& c, const std::vector<std::string>& rows) {
  std::string text = std::string(csv_header()) + "\n";
  for (const auto& r : rows) text += r + "\n";
  if (c.out.empty())
    std::cout << text;
  else
    write_text(c.out, text);
}

void emit_report(const RunConfig& c, const json& j) {
  if (!c.report.empty()) write_text(c.report, dump_json(j));
}

std::string nan_row(const std::string& kind, double t, std::size_t x, std::size_t y, const Error& e) {
  return csv_row(kind, t, x, y, kNaN, to_string(e.kind()), 0, e.kind() == ErrorKind::resolution);
}

// Per-sample failures: resolution limits are recorded and turn the exit code to 4, anything else aborts.
bool recoverable(const Error& e) { return e.kind() == ErrorKind::resolution; }

int cmd_build(const RunConfig& c) {
  const FlowSpace space = load(c, c.refine);
  const TimeWindow w = space.window();
  std::vector<double> times;
  const int slices = space.is_static() ? 1 : 8;
  for (int k = 0; k <= slices; ++k) times.push_back(w.lo + (w.hi - w.lo) * k / slices);
  json metric = json::array();
  bool ok = true;
  std::string failure;
  for (double t : {w.lo, 0.5 * (w.lo + w.hi), w.hi}) {
    const MetricCheck mc = check_metric_axioms(space, t, 300, 20000, c.seed);
    metric.push_back({{"t", t}, {"ok", mc.ok}, {"worst_excess", mc.worst_excess}});
    if (!mc.ok && ok) {
      ok = false;
      failure = mc.message + " at t = " + format_double(t) + ", triple (" + std::to_string(mc.i) + ", " +
                std::to_string(mc.j) + ", " + std::to_string(mc.k) + ")";
    }
    if (space.is_static()) break;
  }
  const double lip = space.is_static() ? 0.0 : estimate_log_lipschitz(space, times, 2000, c.seed);
  std::cout << "space: " << to_string(space.kind()) << "\n"
            << "points: " << space.size() << "\n"
            << "window: [" << format_double(w.lo) << ", " << format_double(w.hi) << "]\n"
            << "static: " << (space.is_static() ? "yes" : "no") << "\n"
            << "median spacing: " << format_double(space.median_spacing(w.lo)) << "\n"
            << "metric: " << (ok ? "OK" : "FAIL (" + failure + ")") << "\n"
            << "log-Lipschitz: declared " << format_double(space.log_lipschitz()) << ", estimated "
            << format_double(lip) << "\n";
  emit_report(c, {{"config", config_json(c, "build")},
                  {"points", space.size()},
                  {"window", {w.lo, w.hi}},
                  {"metric", metric},
                  {"metric_ok", ok},
                  {"log_lipschitz_declared", space.log_lipschitz()},
                  {"log_lipschitz_estimate", lip}});
  if (!ok) {
    std::cerr << "error: metric-axiom: " << failure << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

int cmd_theta(const RunConfig& c) {
  const FlowSpace space = load(c, c.refine);
  const double t = pick_t(c, space);
  const ThetaOptions topts = theta_options(c);
  const HeatFlow flow(space, heat_options(c));
  const std::string variant = c.variant.empty() ? "plus" : c.variant;
  std::mt19937_64 rng(c.seed);
  std::vector<std::string> rows;
  json estimates = json::array();
  bool truncated = false;

  if (variant == "star") {
    const auto core = detail::core_or_all(space);
    std::uniform_int_distribution<std::size_t> pick(0, core.size() - 1);
    std::vector<std::size_t> centers = space.distinguished_points();
    while (centers.size() < c.pairs) centers.push_back(core[pick(rng)]);
    centers.resize(c.pairs);
    const std::vector<double> radii = c.radii.empty() ? std::vector<double>{0.45, 0.4, 0.35} : c.radii;
    std::vector<std::optional<ThetaEstimate>> est(centers.size());
    std::vector<std::optional<Error>> err(centers.size());
    parallel_for(centers.size(), [&](std::size_t p) {
      ThetaStarOptions so;
      so.theta = topts;
      so.seed = c.seed + p;
      try {
        est[p] = theta_star(flow, t, centers[p], radii, so);
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        err[p] = e;
      }
    });
    for (std::size_t p = 0; p < centers.size(); ++p) {
      if (est[p]) {
        rows.push_back(csv_row(*est[p]));
        estimates.push_back(to_json(*est[p]));
      } else {
        truncated = true;
        rows.push_back(nan_row("theta_star", t, centers[p], centers[p], *err[p]));
      }
    }
  } else {
    if (variant != "plus" && variant != "minus" && variant != "both" && variant != "flat")
      throw Error(ErrorKind::invalid_input, "--variant must be plus, minus, both, star or flat");
    // Close pairs carry a grid bias of order spacing / distance in the quotients.
    const double hi = c.max_distance.value_or(1.5), lo = c.min_distance.value_or(0.5);
    const auto pairs = detail::sample_pairs(space, t, c.pairs, 2.0, lo, hi, rng);
    using Result = std::vector<ThetaEstimate>;
    std::vector<std::optional<Result>> est(pairs.size());
    std::vector<std::optional<Error>> err(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t p) {
      auto [x, y] = pairs[p];
      try {
        if (variant == "flat") {
          std::vector<double> scales = c.eps;
          if (scales.empty()) {
            const double local = std::max(space.local_spacing(t, x), space.local_spacing(t, y));
            scales = {2.0 * local, 1.2 * local};
          }
          est[p] = Result{theta_flat(flow, t, x, y, scales, topts)};
        } else {
          auto [plus, minus] = theta_pair(flow, t, x, y, topts);
          if (variant == "plus") est[p] = Result{plus};
          else if (variant == "minus") est[p] = Result{minus};
          else est[p] = Result{plus, minus};
        }
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        err[p] = e;
      }
    });
    const std::string kind = variant == "flat" ? "theta_flat" : variant == "minus" ? "theta_minus" : "theta_plus";
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      if (est[p]) {
        for (const auto& e : *est[p]) {
          rows.push_back(csv_row(e));
          estimates.push_back(to_json(e));
        }
      } else {
        truncated = true;
        rows.push_back(nan_row(kind, t, pairs[p].first, pairs[p].second, *err[p]));
      }
    }
  }
  emit_csv(c, rows);
  emit_report(c, {{"config", config_json(c, "theta")}, {"estimates", estimates}});
  return truncated ? kExitInconclusive : kExitOk;
}

int cmd_eta(const RunConfig& c) {
  const FlowSpace space = load(c, c.refine);
  const double t = pick_t(c, space);
  EtaOptions eo;
  eo.transport = transport_options(c);
  const std::string variant = c.variant.empty() ? "pair" : c.variant;
  std::mt19937_64 rng(c.seed);
  std::vector<std::string> rows;
  json estimates = json::array();
  bool truncated = false;
  const double lo = c.min_distance.value_or(0.4), hi = c.max_distance.value_or(0.6);
  EpsRule rule;

  if (variant == "star") {
    const auto core = detail::core_or_all(space);
    std::uniform_int_distribution<std::size_t> pick(0, core.size() - 1);
    std::vector<std::size_t> centers = space.distinguished_points();
    while (centers.size() < c.pairs) centers.push_back(core[pick(rng)]);
    centers.resize(c.pairs);
    const std::vector<double> radii = c.radii.empty() ? std::vector<double>{0.7, 0.6} : c.radii;
    for (std::size_t p = 0; p < centers.size(); ++p) {
      EtaStarOptions so;
      so.eta = eo;
      so.eps_rule = rule;
      so.min_distance = lo;
      so.max_distance = hi;
      so.seed = c.seed + p;
      try {
        const EtaEstimate e = eta_star(space, t, centers[p], radii, so);
        rows.push_back(csv_row(e));
        estimates.push_back(to_json(e));
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        truncated = true;
        rows.push_back(nan_row("eta_star", t, centers[p], centers[p], e));
      }
    }
  } else {
    if (variant != "pair") throw Error(ErrorKind::invalid_input, "--variant must be pair or star");
    const auto pairs = detail::sample_pairs(space, t, c.pairs, 2.0, lo, hi, rng);
    std::vector<std::optional<EtaEstimate>> est(pairs.size());
    std::vector<std::optional<Error>> err(pairs.size());
    std::vector<double> eps_used(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      auto [x, y] = pairs[p];
      const double local = std::max(space.local_spacing(t, x), space.local_spacing(t, y));
      eps_used[p] = c.eps.empty() ? rule(space.distance(t, x, y), local) : c.eps.front();
    }
    parallel_for(pairs.size(), [&](std::size_t p) {
      try {
        est[p] = eta_eps(space, t, pairs[p].first, pairs[p].second, eps_used[p], eo);
      } catch (const Error& e) {
        if (!recoverable(e)) throw;
        err[p] = e;
      }
    });
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      if (est[p]) {
        rows.push_back(csv_row(*est[p]));
        estimates.push_back(to_json(*est[p]));
      } else {
        truncated = true;
        rows.push_back(nan_row("eta_eps", t, pairs[p].first, pairs[p].second, *err[p]));
      }
    }
    if (!c.dump_plan.empty() && !pairs.empty()) {
      auto [x, y] = pairs.front();
      const auto mu = DiscreteMeasure::normalized(t, detail::ball_measure(space, t, x, eps_used[0], 1));
      const auto nu = DiscreteMeasure::normalized(t, detail::ball_measure(space, t, y, eps_used[0], 1));
      write_text(c.dump_plan, dump_json(plan_to_json(w2(space, t, mu, nu, eo.transport))));
    }
  }
  emit_csv(c, rows);
  emit_report(c, {{"config", config_json(c, "eta")}, {"estimates", estimates}});
  return truncated ? kExitInconclusive : kExitOk;
}

std::vector<std::string> verdict_rows(const FlowVerdict& v) {
  std::vector<std::string> rows;
  for (const auto& tv : v.times)
    for (const auto& ch : tv.checks) {
      const std::size_t x = ch.worst ? ch.worst->x : 0, y = ch.worst ? ch.worst->y : 0;
      const double m = ch.worst ? ch.worst_margin : kNaN;
      rows.push_back(csv_row(ch.name, tv.t, x, y, m, to_string(ch.status), ch.evaluated, ch.truncated > 0));
    }
  return rows;
}

FlowVerdict classify_once(const RunConfig& c, const FlowSpace& space) {
  if (c.pairs < 1) throw Error(ErrorKind::invalid_input, "--pairs must be positive");
  if (c.mode == "rough") {
    RoughOptions o;
    o.t_set = c.t_set;
    o.pair_quota = c.pairs;
    o.theta = theta_options(c);
    if (c.tol) o.tol = *c.tol;
    o.N = c.N;
    o.heat = heat_options(c);
    o.seed = c.seed;
    if (c.max_distance) o.max_pair_distance = *c.max_distance;
    return classify_rough(space, o);
  }
  if (c.mode == "weak") {
    WeakOptions o;
    o.t_set = c.t_set;
    o.pair_quota = c.pairs;
    o.eta.transport = transport_options(c);
    if (c.tol) o.tol = *c.tol;
    if (c.min_distance) o.min_distance = *c.min_distance;
    if (c.max_distance) o.max_distance = *c.max_distance;
    o.seed = c.seed;
    return classify_weak(space, o);
  }
  throw Error(ErrorKind::invalid_input, "--mode must be rough or weak");
}

int verdict_exit(const FlowVerdict& v) {
  if (v.any(Status::fails)) return kExitFails;
  if (v.any(Status::inconclusive)) return kExitInconclusive;
  return kExitOk;
}

int cmd_classify(const RunConfig& c) {
  if (c.tol && !(*c.tol > 0.0)) throw Error(ErrorKind::invalid_input, "--tol must be positive");
  std::vector<FlowVerdict> levels;
  std::vector<std::size_t> sizes;
  for (int level = 0; level <= c.refine; ++level) {
    const FlowSpace space = load(c, level);
    levels.push_back(classify_once(c, space));
    levels.back().config["space_points"] = space.size();
    sizes.push_back(space.size());
  }
  const FlowVerdict& v = levels.back();
  std::string text = summary_text(v);
  if (levels.size() > 1) {
    std::ostringstream os;
    os << "refinement sweep:\n";
    for (std::size_t l = 0; l < levels.size(); ++l) {
      os << "  level " << l << " (" << sizes[l] << " points):";
      for (const auto& n : levels[l].check_names()) os << " " << n << "=" << to_string(levels[l].status(n));
      os << "\n";
    }
    text += os.str();
  }
  std::cout << text;
  emit_csv(c, verdict_rows(v));
  if (!c.report.empty()) {
    json j = to_json(v);
    j["cli"] = config_json(c, "classify");
    if (levels.size() > 1) {
      json sweep = json::array();
      for (const auto& l : levels) sweep.push_back(to_json(l));
      j["refinement"] = sweep;
    }
    write_text(c.report, dump_json(j));
    write_text(report_text_path(c.report), text);
  }
  return verdict_exit(v);
}

int cmd_defect(const RunConfig& c) {
  const FlowSpace space = load(c, c.refine);
  if (c.kind == "rigidity") {
    const double t = c.t ? *c.t : space.window().lo;
    const double value = rigidity_defect(space, t);
    std::cout << "rigidity_defect " << format_double(value) << "\n";
    if (!c.out.empty()) emit_csv(c, {csv_row("rigidity", t, 0, 0, value, "ok", 0, false)});
    emit_report(c, {{"config", config_json(c, "defect")}, {"kind", "rigidity"}, {"t", t}, {"value", value}});
    return kExitOk;
  }
  if (c.kind != "nsuper") throw Error(ErrorKind::invalid_input, "--kind must be rigidity or nsuper");
  const double t = pick_t(c, space);
  const double s = c.s ? *c.s : t - c.h0;
  if (s > t || s < space.window().lo) throw Error(ErrorKind::invalid_input, "--s must lie in [lo, t]");
  const double N = c.N.value_or(kInfiniteN);
  const double tol = c.tol.value_or(1e-3);
  std::mt19937_64 rng(c.seed);
  const auto pairs = detail::sample_pairs(space, t, c.pairs, 2.0, 0.0, c.max_distance.value_or(0.5), rng);
  const HeatFlow flow(space, heat_options(c));
  std::vector<DeficitEstimate> est(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t p) {
    est[p] = nsuper_deficit(flow, t, s, detail::blob(space, t, pairs[p].first), detail::blob(space, t, pairs[p].second), N);
  });
  std::vector<std::string> rows;
  json arr = json::array();
  bool fails = false;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const double margin = -est[p].value / std::max(est[p].w2_t, 1e-300);
    const bool bad = margin > tol;
    fails = fails || bad;
    rows.push_back(csv_row("nsuper_deficit", t, pairs[p].first, pairs[p].second, est[p].value,
                           bad ? "fails" : est[p].low_confidence ? "low_confidence" : "holds", est[p].snapshots, false));
    json j = to_json(est[p]);
    j["x"] = pairs[p].first;
    j["y"] = pairs[p].second;
    j["margin"] = margin;
    arr.push_back(j);
  }
  emit_csv(c, rows);
  emit_report(c, {{"config", config_json(c, "defect")}, {"kind", "nsuper"}, {"t", t}, {"s", s}, {"estimates", arr}});
  return fails ? kExitFails : kExitOk;
}

int cmd_check(const RunConfig& c) {
  if (c.suite != "core") throw Error(ErrorKind::invalid_input, "unknown suite '" + c.suite + "' (available: core)");
  const FlowSpace space = load(c, c.refine);
  SuiteOptions so;
  so.t = c.t;
  so.heat = heat_options(c);
  so.seed = c.seed;
  const auto results = run_core_suite(space, so);
  std::cout << suite_table(results);
  const double t = c.t ? *c.t : space.window().lo + 0.75 * (space.window().hi - space.window().lo);
  if (!c.out.empty()) {
    std::vector<std::string> rows;
    for (const auto& r : results) rows.push_back(csv_row(r.name, t, 0, 0, r.value, r.pass ? "pass" : "fail", 0, false));
    emit_csv(c, rows);
  }
  emit_report(c, {{"config", config_json(c, "check")}, {"suite", c.suite}, {"t", t}, {"results", to_json(results)}});
  return all_pass(results) ? kExitOk : kExitFails;
}

int cmd_kernel_dump(const RunConfig& c) {
  if (c.dump_kernel.empty() && c.report.empty())
    throw Error(ErrorKind::invalid_input, "kernel-dump needs --dump-kernel and/or --report");
  const FlowSpace space = load(c, c.refine);
  const double t = c.t ? *c.t : space.window().hi;
  const double s = c.s ? *c.s : space.window().lo;
  if (!space.window().contains(t) || !space.window().contains(s) || s > t)
    throw Error(ErrorKind::invalid_input, "kernel-dump needs lo <= s <= t <= hi");
  const PropagatorKernel k = kernel(space, t, s, heat_options(c));
  std::cout << "kernel: " << k.p.rows() << " x " << k.p.cols() << ", s = " << format_double(s)
            << ", t = " << format_double(t) << "\n"
            << "max row-sum deviation: " << format_double(k.max_row_sum_deviation) << "\n"
            << "min entry before clamp: " << format_double(k.min_entry_before_clamp) << "\n";
  if (!c.dump_kernel.empty()) write_kernel_binary(k, c.dump_kernel);
  if (!c.report.empty()) write_text(c.report, dump_json(kernel_to_json(k)));
  return kExitOk;
}

void add_space(CLI::App* cmd, RunConfig& c) {
  cmd->add_option("--space", c.space, "Space spec file or model kind (gaussian, sphere, cone, suspension)")->required();
  cmd->add_option("--params", c.params, "Inline model parameters, e.g. n=2,lambda=shrink,count=300");
  cmd->add_option("--refine", c.refine, "Refinement level: multiplies sample counts by 2^level")
      ->check(CLI::Range(0, 6));
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--bandwidth", c.bandwidth, "Heat-kernel bandwidth override");
  cmd->add_option("--method", c.method, "Transport solver")->check(CLI::IsMember({"exact", "entropic"}));
  cmd->add_option("--report", c.report, "JSON report path");
}

void add_out(CLI::App* cmd, RunConfig& c) { cmd->add_option("--out", c.out, "CSV output path (default stdout)"); }

void add_schedule(CLI::App* cmd, RunConfig& c) {
  cmd->add_option("--h0", c.h0, "Coarsest backward step");
  cmd->add_option("--k", c.k, "Number of halvings of the step");
}

void add_band(CLI::App* cmd, RunConfig& c) {
  cmd->add_option("--min-distance", c.min_distance, "Lower bound on sampled pair distances");
  cmd->add_option("--max-distance", c.max_distance, "Upper bound on sampled pair distances");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rfprobe: synthetic Ricci-flow probes on sampled metric measure flows"};
  app.require_subcommand(1);
  RunConfig c;
  std::function<int()> action;

  auto* build = app.add_subcommand("build", "Build a space and print a summary");
  add_space(build, c);
  build->callback([&] { action = [&] { return cmd_build(c); }; });

  auto* theta = app.add_subcommand("theta", "Upper/lower rate surrogates on sampled pairs");
  add_space(theta, c);
  add_out(theta, c);
  add_schedule(theta, c);
  add_band(theta, c);
  theta->add_option("--t", c.t, "Evaluation time");
  theta->add_option("--pairs", c.pairs, "Pairs (or centers for star)")->check(CLI::PositiveNumber);
  theta->add_option("--variant", c.variant, "plus, minus, both, star or flat")
      ->check(CLI::IsMember({"plus", "minus", "both", "star", "flat"}));
  theta->add_option("--eps", c.eps, "Scales for the flat variant")->delimiter(',');
  theta->add_option("--radii", c.radii, "Decreasing radii for the star variant")->delimiter(',');
  theta->callback([&] { action = [&] { return cmd_theta(c); }; });

  auto* eta = app.add_subcommand("eta", "Entropy convexity defect on sampled pairs");
  add_space(eta, c);
  add_out(eta, c);
  add_band(eta, c);
  eta->add_option("--t", c.t, "Evaluation time");
  eta->add_option("--pairs", c.pairs, "Pairs (or centers for star)")->check(CLI::PositiveNumber);
  eta->add_option("--eps", c.eps, "Fixed support radius (default: pair-distance rule)")->delimiter(',');
  eta->add_option("--variant", c.variant, "pair or star")->check(CLI::IsMember({"pair", "star"}));
  eta->add_option("--radii", c.radii, "Decreasing radii for the star variant")->delimiter(',');
  eta->add_option("--dump-plan", c.dump_plan, "Write the transport plan of the first pair as JSON");
  eta->callback([&] { action = [&] { return cmd_eta(c); }; });

  auto* classify = app.add_subcommand("classify", "Classify the flow as super, sub or full");
  add_space(classify, c);
  add_out(classify, c);
  add_schedule(classify, c);
  add_band(classify, c);
  classify->add_option("--mode", c.mode, "rough or weak")->check(CLI::IsMember({"rough", "weak"}));
  classify->add_option("--t-set", c.t_set, "Evaluation times")->delimiter(',');
  classify->add_option("--pairs", c.pairs, "Pairs per time")->check(CLI::PositiveNumber);
  classify->add_option("--tol", c.tol, "Margin tolerance");
  classify->add_option("--N", c.N, "Also run the N-super deficit check (rough mode)");
  classify->callback([&] { action = [&] { return cmd_classify(c); }; });

  auto* defect = app.add_subcommand("defect", "Rigidity defect or N-super deficit");
  add_space(defect, c);
  add_out(defect, c);
  add_band(defect, c);
  defect->add_option("--kind", c.kind, "rigidity or nsuper")->check(CLI::IsMember({"rigidity", "nsuper"}));
  defect->add_option("--t", c.t, "Evaluation time");
  defect->add_option("--s", c.s, "Earlier time for nsuper (default t - h0)");
  defect->add_option("--h0", c.h0, "Default gap t - s for nsuper");
  defect->add_option("--N", c.N, "Dimension parameter for nsuper");
  defect->add_option("--pairs", c.pairs, "Measure pairs for nsuper")->check(CLI::PositiveNumber);
  defect->add_option("--tol", c.tol, "Tolerance on the normalized deficit");
  defect->callback([&] { action = [&] { return cmd_defect(c); }; });

  auto* check = app.add_subcommand("check", "Run a property suite");
  add_space(check, c);
  add_out(check, c);
  check->add_option("--suite", c.suite, "Suite name")->required();
  check->add_option("--t", c.t, "Evaluation time");
  check->callback([&] { action = [&] { return cmd_check(c); }; });

  auto* kdump = app.add_subcommand("kernel-dump", "Export a heat propagator");
  add_space(kdump, c);
  kdump->add_option("--t", c.t, "Start time (default window end)");
  kdump->add_option("--s", c.s, "Target time (default window start)");
  kdump->add_option("--dump-kernel", c.dump_kernel, "Binary kernel output path");
  kdump->callback([&] { action = [&] { return cmd_kernel_dump(c); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    return action();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::resolution ? kExitInconclusive : kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}
