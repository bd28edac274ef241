// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "rfprobe/classify.hpp"
#include "rfprobe/models.hpp"
#include "rfprobe/probes.hpp"
#include "rfprobe/report.hpp"
#include "rfprobe/suite.hpp"

using namespace rfprobe;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream note;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      note << "[failed: " << what << "] ";
    }
  }
};

using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

Pairs band_pairs(const FlowSpace& space, double t, std::size_t n, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return detail::sample_pairs(space, t, n, 2.0, lo, hi, rng);
}

FlowSpace shrinker() { return build_gaussian_1d(ScalarPath({1.0, -2.0}), constant_path(1.0), 200); }

FlowSpace sphere(int count, double lambda = 1.0, int n = 2) {
  SphereSpec spec;
  spec.n = n;
  spec.count = count;
  spec.lambda = constant_path(lambda);
  return build_sphere_flow(spec);
}

std::size_t nearest(const FlowSpace& s, double x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (std::abs(s.point(i)[0] - x) < std::abs(s.point(best)[0] - x)) best = i;
  return best;
}

RoughOptions shrinker_rough() {
  RoughOptions o;
  o.t_set = {0.1};
  o.heat.bandwidth = 0.1;
  return o;
}

// 1. Shrinking Gaussian: theta near zero and both rough checks hold.
void shrinking_gaussian(Outcome& out) {
  const auto g = shrinker();
  const double t = 0.1;
  HeatOptions heat;
  heat.bandwidth = 0.1;
  const HeatFlow flow(g, heat);
  // d_t <= 0.5, kept above 0.4 where the grid bias in the quotients stays small
  const auto pairs = band_pairs(g, t, 10, 0.4, 0.5, 1);
  double worst = 0.0;
  for (auto [x, y] : pairs) {
    const auto [plus, minus] = theta_pair(flow, t, x, y);
    worst = std::max({worst, std::abs(plus.value), std::abs(minus.value)});
  }
  out.note << "max |theta| = " << worst << " over " << pairs.size() << " pairs; ";
  out.require(worst <= 0.1, "theta within [-0.1, 0.1]");
  const auto v = classify_rough(g, shrinker_rough());
  out.note << "rough_super " << to_string(v.status("rough_super")) << ", rough_sub " << to_string(v.status("rough_sub"));
  out.require(v.status("rough_super") == Status::holds, "rough_super holds");
  out.require(v.status("rough_sub") == Status::holds, "rough_sub holds");
}

// 2. Static Ornstein-Uhlenbeck flow: theta equals (a + A'/2) / A = 1.
void ornstein_uhlenbeck(Outcome& out) {
  const auto ou = build_gaussian_1d(constant_path(1.0), constant_path(1.0), 801);
  const double t = 0.2;
  const HeatFlow flow(ou);
  double worst = 0.0;
  for (auto [x, y] : band_pairs(ou, t, 5, 0.15, 0.3, 2)) {
    const auto [plus, minus] = theta_pair(flow, t, x, y);
    worst = std::max({worst, std::abs(plus.value - 1.0), std::abs(minus.value - 1.0)});
  }
  out.note << "max |theta - 1| = " << worst;
  out.require(worst <= 0.1, "within 10% of 1");
}

// 3. Static unit sphere: theta* = 1, RFex = 1, theta brackets RFex.
void sphere_eigenvalues(Outcome& out) {
  const auto s2 = sphere(400);
  const double t = 0.2;
  const HeatFlow flow(s2);
  ThetaOptions theta;
  theta.schedule.h0 = 0.16;
  theta.schedule.K = 1;
  ThetaStarOptions so;
  so.theta = theta;
  double star_dev = 0.0;
  for (std::size_t x : {0u, 80u, 160u, 240u, 320u})
    star_dev = std::max(star_dev, std::abs(theta_star(flow, t, x, {0.45, 0.40, 0.35}, so).value - 1.0));
  out.note << "max |theta* - 1| = " << star_dev << "; ";
  out.require(star_dev <= 0.15, "theta* = 1 +- 0.15");

  double rfex_dev = 0.0;
  for (auto [x, y] : band_pairs(s2, t, 10, 0.1, 3.0, 3)) rfex_dev = std::max(rfex_dev, std::abs(rfex(s2, t, x, y) - 1.0));
  out.note << "max |RFex - 1| = " << rfex_dev << "; ";
  out.require(rfex_dev <= 1e-12, "RFex = 1");

  double low = INFINITY, high = -INFINITY;
  for (auto [x, y] : band_pairs(s2, t, 5, 0.3, 0.5, 4)) {
    const double d = s2.distance(t, x, y);
    const double r = rfex(s2, t, x, y);
    const auto [plus, minus] = theta_pair(flow, t, x, y, theta);
    low = std::min(low, minus.value - (r - 0.2));
    high = std::max(high, plus.value - (r + std::pow(std::tan(d), 2) + 0.2));
  }
  out.note << "lower slack " << low << ", upper excess " << high;
  out.require(low >= 0.0, "theta- >= RFex - 0.2");
  out.require(high <= 0.0, "theta+ <= RFex + tan^2 d + 0.2");
}

// 4. A_t = 1 - t, a = 1: super holds, sub fails with a witness.
void gaussian_dichotomy(Outcome& out) {
  const auto g = build_gaussian_1d(ScalarPath({1.0, -1.0}), constant_path(1.0), 200);
  const auto opts = shrinker_rough();
  const auto v = classify_rough(g, opts);
  out.note << "rough_super " << to_string(v.status("rough_super")) << ", rough_sub " << to_string(v.status("rough_sub"));
  out.require(v.status("rough_super") == Status::holds, "rough_super holds");
  out.require(v.status("rough_sub") == Status::fails, "rough_sub fails");
  for (const auto& c : v.times.front().checks) {
    if (c.name != "rough_sub") continue;
    out.require(!c.witnesses.empty() && c.witnesses.front().margin > opts.tol, "witness margin above tol");
    if (!c.witnesses.empty()) {
      const auto& w = c.witnesses.front();
      out.note << ", witness (" << w.x << ", " << w.y << ", s = " << w.s << ") margin " << w.margin;
      out.require(std::abs(reevaluate(g, w, opts) - w.margin) <= 1e-9, "witness reproducible");
    }
  }
}

// 5. Cone of angle pi blows up at the apex; the flat cone does not.
void cone_blowup(Outcome& out) {
  ThetaOptions theta;
  theta.schedule.h0 = 0.08;
  theta.schedule.K = 2;
  const double t = 0.5;
  ConeSpec spec;
  spec.rings = 30;
  spec.radial_extent = 1.5;
  spec.beta = 0.5;
  const auto sharp = build_cone(spec);
  spec.beta = 1.0;
  const auto flat = build_cone(spec);
  const std::size_t apex = sharp.distinguished_points().at(0);
  const std::size_t flat_apex = flat.distinguished_points().at(0);

  // Same polar coordinates on both cones, at radius 0.4.
  std::vector<std::pair<std::size_t, std::size_t>> targets;
  for (std::size_t j = 0; j < sharp.size() && targets.size() < 3; ++j) {
    const auto p = sharp.point(j);
    if (std::abs(p[0] - 0.4) > 1e-9 || j % 5 != 0) continue;
    std::size_t best = 0;
    double gap = INFINITY;
    for (std::size_t k = 0; k < flat.size(); ++k) {
      const auto q = flat.point(k);
      const double e = std::abs(q[0] - p[0]) + std::abs(detail::angle_diff(q[1], p[1]));
      if (e < gap) gap = e, best = k;
    }
    targets.emplace_back(j, best);
  }
  out.require(targets.size() == 3, "three ring points at radius 0.4");

  const HeatFlow sharp_flow(sharp), flat_flow(flat);
  double worst_flat = 0.0;
  for (auto [j, k] : targets) {
    const auto [plus, minus] = theta_pair(sharp_flow, t, apex, j, theta);
    const auto& q = plus.quotients;
    const std::size_t n = q.size();
    bool rising = n >= 3 && plus.usable[n - 3] && plus.usable[n - 2] && plus.usable[n - 1];
    rising = rising && q[n - 3] > theta.ceiling && q[n - 2] > q[n - 3] && q[n - 1] > q[n - 2];
    out.note << "apex pair quotients " << q[0] << ", " << q[1] << ", " << q[2] << "; ";
    out.require(rising, "quotients above ceiling and rising");
    out.require(plus.divergent, "divergence flag");
    const auto [fplus, fminus] = theta_pair(flat_flow, t, flat_apex, k, theta);
    worst_flat = std::max({worst_flat, std::abs(fplus.value), std::abs(fminus.value)});
  }
  out.note << "flat cone max |theta| = " << worst_flat;
  out.require(worst_flat <= 0.1, "flat cone |theta| <= 0.1");
}

// 6. The shrinker violates the N-super bound for finite N; flat torus translates do not.
void nsuper_failure(Outcome& out) {
  const auto g = shrinker();
  const double t = 0.3, s = 0.25;
  const auto d = nsuper_deficit(g, t, s, detail::blob(g, t, nearest(g, 0.0)), detail::blob(g, t, nearest(g, 2.0)), 2.0);
  out.note << "shrinker deficit " << d.value << "; ";
  out.require(d.value < -1e-3, "shrinker deficit < -1e-3");

  const auto circle = sphere(50, 1.0, 1);
  const auto torus = build_product(circle, circle);
  const std::size_t nb = circle.size();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(torus.size()));
  Eigen::VectorXd v = w;
  const std::vector<std::tuple<std::size_t, std::size_t, double>> profile{{0, 0, 0.5}, {1, 0, 0.3}, {0, 2, 0.2}};
  for (auto [ia, ib, m] : profile) {
    w(static_cast<Eigen::Index>(ia * nb + ib)) = m;
    v(static_cast<Eigen::Index>(((ia + 3) % nb) * nb + ib)) = m;
  }
  const auto e = nsuper_deficit(torus, t, s, DiscreteMeasure(t, w), DiscreteMeasure(t, v), 2.0);
  out.note << "torus |deficit| / W^2 = " << std::abs(e.value) / e.w2_t;
  out.require(std::abs(e.value) <= 1e-3 * e.w2_t, "torus |deficit| <= 1e-3 W^2");
}

// 7. eta never exceeds theta_flat by more than the tolerance.
void eta_theta(Outcome& out) {
  auto run = [&](const char* name, const FlowSpace& space, double t, const EtaThetaOptions& o) {
    const auto r = check_eta_leq_theta_flat(space, {t}, 10, 0.25, o);
    out.note << name << ": " << r.records.size() << " pairs, " << r.violations.size() << " violations; ";
    out.require(r.records.size() == 10, std::string(name) + " evaluated 10 pairs");
    out.require(r.violations.empty(), std::string(name) + " no violations");
  };
  EtaThetaOptions on_sphere;
  on_sphere.theta.schedule.h0 = 0.16;
  on_sphere.theta.schedule.K = 1;
  on_sphere.eps_rule.min_spacings = 5.0;
  run("sphere", sphere(600), 0.2, on_sphere);
  run("flat", build_gaussian_1d(constant_path(1.0), constant_path(0.0), 201), 0.1, EtaThetaOptions{});
  EtaThetaOptions on_shrinker;
  on_shrinker.heat.bandwidth = 0.1;
  run("shrinker", shrinker(), 0.1, on_shrinker);
}

// Independent estimate of the mean of cos(d) on S^2(r) x S^2(r) from uniform point pairs.
double product_cos_mean(double radius, std::size_t samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  auto angle = [&] {
    Eigen::Vector3d a(normal(rng), normal(rng), normal(rng)), b(normal(rng), normal(rng), normal(rng));
    return std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0));
  };
  double acc = 0.0;
  for (std::size_t k = 0; k < samples; ++k) {
    const double a1 = angle(), a2 = angle();
    acc += std::cos(radius * std::hypot(a1, a2));
  }
  return acc / static_cast<double>(samples);
}

// 8. Rigidity defect vanishes on round spheres and not on the product.
void rigidity(Outcome& out) {
  const double s1 = rigidity_defect(sphere(400, 1.0, 1));
  const double s2 = rigidity_defect(sphere(400));
  const auto small = sphere(200, 1.0 / 3.0);
  const double prod = rigidity_defect(build_product(small, small, 400, 0));
  const double oracle = product_cos_mean(1.0 / std::sqrt(3.0), 1000000, 7);
  out.note << "S1 " << s1 << ", S2 " << s2 << ", product " << prod << ", Monte-Carlo " << oracle;
  out.require(std::abs(s1) <= 1e-2 && std::abs(s2) <= 1e-2, "sphere defects <= 1e-2");
  out.require(prod >= 0.05, "product defect >= 0.05");
  out.require(std::abs(prod - oracle) <= 0.1 * std::abs(oracle), "product within 10% of the oracle");
}

// 9. Core property suite on the shrinker.
void core_suite(Outcome& out) {
  SuiteOptions so;
  so.heat.bandwidth = 0.1;
  const auto results = run_core_suite(shrinker(), so);
  for (const auto& r : results) {
    out.note << r.name << "=" << r.value << (r.pass ? "" : "(FAIL)") << " ";
    out.require(r.pass, r.name);
  }
}

// 10. Identical config and seed give byte-identical JSON reports.
void reproducibility(Outcome& out) {
  const auto g = shrinker();
  auto report = [&] {
    auto o = shrinker_rough();
    o.seed = 42;
    const auto v = classify_rough(g, o);
    SuiteOptions so;
    so.heat.bandwidth = 0.1;
    so.seed = 42;
    nlohmann::json j = to_json(v);
    j["suite"] = to_json(run_core_suite(g, so));
    return dump_json(j);
  };
  const std::string a = report(), b = report();
  out.note << a.size() << " bytes";
  out.require(a == b, "byte-identical reports");
}

struct Criterion {
  const char* name;
  double budget_seconds;
  std::function<void(Outcome&)> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"shrinking Gaussian is a rough Ricci flow", 120, shrinking_gaussian},
      {"Ornstein-Uhlenbeck rate oracle", 60, ornstein_uhlenbeck},
      {"eigenvalue law on the unit sphere", 600, sphere_eigenvalues},
      {"Gaussian family dichotomy", 120, gaussian_dichotomy},
      {"cone blow-up at the apex", 300, cone_blowup},
      {"N-super failure on the shrinker", 180, nsuper_failure},
      {"eta below theta_flat", 900, eta_theta},
      {"rigidity defect", 120, rigidity},
      {"core property suite", 300, core_suite},
      {"reproducible reports", 600, reproducibility},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const auto& c = criteria[k];
    Outcome out;
    const auto start = std::chrono::steady_clock::now();
    try {
      c.run(out);
    } catch (const std::exception& e) {
      out.pass = false;
      out.note << "[exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > c.budget_seconds) {
      out.pass = false;
      out.note << " [over runtime budget of " << c.budget_seconds << " s]";
    }
    failed += out.pass ? 0 : 1;
    std::cout << (out.pass ? "PASS" : "FAIL") << " " << (k + 1) << " " << c.name << " (" << std::fixed
              << std::setprecision(1) << secs << " s): " << std::defaultfloat << std::setprecision(6) << out.note.str()
              << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
