#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"
#include "rfprobe/classify.hpp"
#include "rfprobe/models.hpp"
#include "rfprobe/probes.hpp"

using namespace rfprobe;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an rfprobe::Error");
  return ErrorKind::io;
}

std::size_t nearest(const FlowSpace& s, double x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (std::abs(s.point(i)[0] - x) < std::abs(s.point(best)[0] - x)) best = i;
  return best;
}

// Sample point whose distance from x is closest to d.
std::size_t at_distance(const FlowSpace& s, double t, std::size_t x, double d) {
  std::size_t best = x == 0 ? 1 : 0;
  for (std::size_t k = 0; k < s.size(); ++k)
    if (k != x && std::abs(s.distance(t, x, k) - d) < std::abs(s.distance(t, x, best) - d)) best = k;
  return best;
}

FlowSpace flat_line(int resolution = 200) {
  return build_gaussian_1d(constant_path(1.0), constant_path(0.0), resolution);
}

FlowSpace shrinker(int resolution = 200) {
  return build_gaussian_1d(ScalarPath({1.0, -2.0}), constant_path(1.0), resolution);
}

FlowSpace sphere(int count = 400, ScalarPath lambda = constant_path(1.0), int n = 2) {
  SphereSpec spec;
  spec.n = n;
  spec.count = count;
  spec.lambda = std::move(lambda);
  return build_sphere_flow(spec);
}

void check_theta_shape(const ThetaEstimate& plus, const ThetaEstimate& minus) {
  CHECK(plus.variant == "+");
  CHECK(minus.variant == "-");
  CHECK(minus.value <= plus.value);
  for (std::size_t k = 0; k < plus.quotients.size(); ++k)
    if (plus.usable[k]) CHECK(std::isfinite(plus.quotients[k]));
  if (plus.divergent) CHECK_FALSE(plus.converged);
  if (minus.divergent) CHECK_FALSE(minus.converged);
  if (plus.converged) CHECK(plus.value == minus.value);
}

}  // namespace

TEST_CASE("theta vanishes on the static flat line", "[probes][theta]") {
  const auto flat = flat_line();
  const auto [plus, minus] = theta_pair(flat, 0.1, nearest(flat, -0.25), nearest(flat, 0.25));
  check_theta_shape(plus, minus);
  CHECK_THAT(plus.reference, WithinAbs(0.5, flat.median_spacing(0.0)));
  CHECK(std::abs(plus.value) <= 0.1);
  CHECK(std::abs(minus.value) <= 0.1);
  CHECK(plus.steps.size() == 5);
}

TEST_CASE("theta vanishes on the shrinking Gaussian", "[probes][theta]") {
  // Pairs at d_t in [0.4, 0.5]: the grid bias in the quotients scales like spacing / distance.
  const auto g = shrinker();
  ThetaOptions opts;
  HeatOptions heat;
  heat.bandwidth = 0.1;
  HeatFlow flow(g, heat);
  const double t = 0.1;
  for (double x0 : {-1.0, 0.0, 0.8}) {
    const std::size_t x = nearest(g, x0);
    const std::size_t y = at_distance(g, t, x, 0.45);
    const auto [plus, minus] = theta_pair(flow, t, x, y, opts);
    INFO("pair " << x << ", " << y << ": " << plus.value << " / " << minus.value);
    check_theta_shape(plus, minus);
    CHECK(std::abs(plus.value) <= 0.1);
    CHECK(std::abs(minus.value) <= 0.1);
  }
}

TEST_CASE("theta matches the Ornstein-Uhlenbeck rate", "[probes][theta]") {
  const auto ou = build_gaussian_1d(constant_path(1.0), constant_path(1.0), 401);
  const auto [plus, minus] = theta_pair(ou, 0.2, nearest(ou, -0.1), nearest(ou, 0.15));
  check_theta_shape(plus, minus);
  CHECK_THAT(plus.value, WithinAbs(1.0, 0.1));
  CHECK_THAT(minus.value, WithinAbs(1.0, 0.1));
}

TEST_CASE("theta input validation and resolution floor", "[probes][theta][errors]") {
  const auto flat = flat_line();
  const std::size_t x = nearest(flat, 0.0), y = nearest(flat, 0.5);
  CHECK(kind_of([&] { theta_pair(flat, 0.1, x, x); }) == ErrorKind::invalid_input);
  ThetaOptions late;
  late.schedule.h0 = 0.2;
  CHECK(kind_of([&] { theta_pair(flat, 0.1, x, y, late); }) == ErrorKind::invalid_input);
  ThetaOptions fine;
  fine.schedule.h0 = 1e-4;
  fine.schedule.K = 2;
  CHECK(kind_of([&] { theta_pair(flat, 0.1, x, y, fine); }) == ErrorKind::resolution);
  ThetaOptions partial;
  partial.schedule.K = 8;
  const auto [plus, minus] = theta_pair(flat, 0.1, x, y, partial);
  CHECK(plus.floor_hit);
  CHECK(plus.steps_used < plus.steps.size());
  CHECK(plus.floor_step >= std::pow(2.0 * flat.local_spacing(0.1, x), 2) * (1.0 - 1e-12));
}

TEST_CASE("theta_star is near zero on the flat line", "[probes][theta]") {
  const auto flat = flat_line();
  const std::size_t x = nearest(flat, 0.0);
  const ThetaEstimate star = theta_star(flat, 0.1, x, {0.6, 0.5});
  CHECK(star.variant == "star");
  CHECK(star.scale_values.size() == 2);
  CHECK(std::abs(star.value) <= 0.1);
  CHECK_FALSE(star.divergent);
  CHECK(kind_of([&] { theta_star(flat, 0.1, x, {0.3, 0.5}); }) == ErrorKind::invalid_input);
  CHECK(kind_of([&] { theta_star(flat, 0.1, x, {0.01}); }) == ErrorKind::resolution);
}

TEST_CASE("theta_flat sits below theta minus", "[probes][theta]") {
  auto check = [](const FlowSpace& space, double t, std::size_t x, std::size_t y) {
    HeatFlow flow(space);
    const auto [plus, minus] = theta_pair(flow, t, x, y);
    const double sp = std::max(space.local_spacing(t, x), space.local_spacing(t, y));
    const ThetaEstimate flat = theta_flat(flow, t, x, y, {2.0 * sp, 1.2 * sp});
    INFO("theta_flat " << flat.value << ", theta minus " << minus.value);
    CHECK(flat.variant == "flat");
    CHECK(flat.value <= minus.value + 0.05);
    return flat.value;
  };
  SECTION("flat line") {
    const auto f = flat_line();
    CHECK(std::abs(check(f, 0.1, nearest(f, -0.25), nearest(f, 0.25))) <= 0.1);
  }
  SECTION("shrinking Gaussian") {
    const auto g = shrinker();
    check(g, 0.1, nearest(g, -0.2), nearest(g, 0.25));
  }
  SECTION("unit sphere") {
    const auto s2 = sphere();
    const std::size_t x = 17, y = at_distance(s2, 0.0, 17, 0.5);
    ThetaOptions opts;
    opts.schedule.h0 = 0.16;
    opts.schedule.K = 1;
    HeatFlow flow(s2);
    const auto [plus, minus] = theta_pair(flow, 0.2, x, y, opts);
    const double sp = std::max(s2.local_spacing(0.2, x), s2.local_spacing(0.2, y));
    const ThetaEstimate flat = theta_flat(flow, 0.2, x, y, {2.0 * sp, 1.2 * sp}, opts);
    CHECK(flat.value <= minus.value + 0.05);
    CHECK_THAT(flat.value, WithinAbs(1.0, 0.2));
  }
}

TEST_CASE("eta on flat, shrinking and spherical spaces", "[probes][eta]") {
  SECTION("flat line") {
    const auto f = flat_line(401);
    const EtaEstimate e = eta_eps(f, 0.1, nearest(f, -0.25), nearest(f, 0.25), 0.1);
    CHECK(e.variant == "pair");
    CHECK(std::abs(e.value) <= 0.1);
    CHECK_THAT(e.recomputed(), WithinAbs(e.value, 1e-12 * (1.0 + std::abs(e.value))));
  }
  SECTION("shrinking Gaussian") {
    const auto g = shrinker();
    const double t = 0.1;
    for (double x0 : {-0.9, -0.2, 0.6}) {
      const std::size_t x = nearest(g, x0), y = at_distance(g, t, x, 0.45);
      const double eps = 7.0 * std::max(g.local_spacing(t, x), g.local_spacing(t, y));
      const EtaEstimate e = eta_eps(g, t, x, y, eps);
      INFO("x = " << x0 << ", eta = " << e.value);
      CHECK(std::abs(e.value) <= 0.15);
      CHECK_THAT(e.recomputed(), WithinAbs(e.value, 1e-12 * (1.0 + std::abs(e.value))));
    }
  }
  SECTION("dense unit sphere") {
    // eps = 0.05 must span about five lattice spacings for the entropy fit to settle.
    const auto s2 = sphere(150000);
    const double band_hi = 1.0 + std::pow(std::tan(0.25), 2) + 0.2;
    for (std::size_t x : {1000u, 77777u}) {
      const std::size_t y = at_distance(s2, 0.0, x, 0.5);
      const EtaEstimate e = eta_eps(s2, 0.0, x, y, 0.05);
      INFO("pair " << x << ", " << y << ": eta = " << e.value);
      CHECK(e.value >= 0.8);
      CHECK(e.value <= band_hi);
    }
  }
  SECTION("errors") {
    const auto f = flat_line();
    CHECK(kind_of([&] { eta_eps(f, 0.1, 50, 50, 0.2); }) == ErrorKind::invalid_input);
    CHECK(kind_of([&] { eta_eps(f, 0.1, 50, 60, 0.05); }) == ErrorKind::invalid_input);
    std::vector<double> coords{0.0, 1.0};
    Eigen::MatrixXd d(2, 2);
    d << 0.0, 1.0, 1.0, 0.0;
    const auto custom = build_tabulated(coords, 1, {0.0}, {d}, {Eigen::VectorXd::Ones(2)}, 0.0, 1, {});
    CHECK(kind_of([&] { eta_eps(custom, 0.0, 0, 1, 1.0); }) == ErrorKind::unsupported);
  }
}

TEST_CASE("eta_star on the shrinking sphere and the flat line", "[probes][eta]") {
  SECTION("flat line") {
    const auto f = flat_line(401);
    const EtaEstimate e = eta_star(f, 0.1, nearest(f, 0.0), {0.7, 0.6});
    CHECK(e.variant == "star");
    CHECK(std::abs(e.value) <= 0.1);
  }
  SECTION("shrinking sphere") {
    const auto s2 = sphere(20000, ScalarPath({1.0, -2.0}));
    EtaStarOptions opts;
    opts.center_pairs = 2;
    opts.random_pairs = 1;
    const EtaEstimate e = eta_star(s2, 0.1, 5, {0.6, 0.5}, opts);
    CHECK(std::abs(e.value) <= 0.2);
  }
}

TEST_CASE("RFex closed forms", "[probes][rfex]") {
  const auto g = shrinker();
  CHECK_THAT(rfex(g, 0.2, 40, 160), WithinAbs(0.0, 1e-12));
  const auto ou = build_gaussian_1d(constant_path(1.0), constant_path(1.0));
  CHECK_THAT(rfex(ou, 0.0, 40, 160), WithinAbs(1.0, 1e-9));
  const auto s2 = sphere();
  std::mt19937_64 rng(4);
  for (int k = 0; k < 10; ++k) {
    const std::size_t x = rng() % s2.size(), y = rng() % s2.size();
    if (x == y || s2.distance(0.0, x, y) > 3.0) continue;
    CHECK_THAT(rfex(s2, 0.1, x, y), WithinAbs(1.0, 1e-9));
  }
  CHECK(kind_of([&] { rfex(s2, 0.1, 3, 3); }) == ErrorKind::invalid_input);
  CHECK(kind_of([&] { rfex(s2, 0.1, 3, 4, kInfiniteN, 16); }) == ErrorKind::invalid_input);

  ConeSpec spec;
  spec.beta = 2.0;
  const auto cone = build_cone(spec);
  std::size_t x = cone.size(), y = cone.size();
  for (std::size_t i = 0; i < cone.size() && y == cone.size(); ++i)
    for (std::size_t j = 0; j < cone.size(); ++j)
      if (!cone.geodesic(0.0, i, j, 0.5)) {
        x = i;
        y = j;
        break;
      }
  REQUIRE(y < cone.size());
  CHECK(kind_of([&] { rfex(cone, 0.0, x, y); }) == ErrorKind::excluded_pair);
}

TEST_CASE("tensor eigenvalues of the model flows", "[probes][tensor]") {
  const auto flat = flat_line();
  const TensorEigen f = tensor_eigen(flat, 0.1, 50);
  CHECK_THAT(f.sigma_max, WithinAbs(0.0, 1e-12));
  CHECK_THAT(f.sigma_min, WithinAbs(0.0, 1e-12));
  const TensorEigen s = tensor_eigen(sphere(), 0.0, 11);
  CHECK_THAT(s.sigma_max, WithinAbs(1.0, 1e-12));
  CHECK_THAT(s.sigma_min, WithinAbs(1.0, 1e-12));
  const auto g = build_gaussian_1d(ScalarPath({1.0, -1.0}), constant_path(1.0));
  for (double t : {0.0, 0.2}) {
    const TensorEigen e = tensor_eigen(g, t, 77);
    CHECK_THAT(e.sigma_max, WithinAbs(0.5 / (1.0 - t), 1e-12));
    CHECK(e.sigma_max >= e.sigma_min);
  }
}

TEST_CASE("RFex brackets the expansion rates on the unit sphere", "[probes][theta][rfex]") {
  const auto s2 = sphere();
  ThetaOptions opts;
  opts.schedule.h0 = 0.16;
  opts.schedule.K = 1;
  HeatFlow flow(s2);
  for (std::size_t x : {21u, 200u}) {
    const std::size_t y = at_distance(s2, 0.2, x, 0.5);
    const double d = s2.distance(0.2, x, y);
    const double r = rfex(s2, 0.2, x, y);
    const auto [plus, minus] = theta_pair(flow, 0.2, x, y, opts);
    INFO("theta " << plus.value << " / " << minus.value << ", rfex " << r);
    CHECK(minus.value >= r - 0.2);
    CHECK(plus.value <= r + std::pow(std::tan(d), 2) + 0.2);
  }
}

TEST_CASE("N-super deficit", "[probes][deficit]") {
  SECTION("s = t gives zero") {
    const auto g = shrinker();
    const auto mu = detail::blob(g, 0.2, 80), nu = detail::blob(g, 0.2, 120);
    const DeficitEstimate d = nsuper_deficit(g, 0.2, 0.2, mu, nu, 2.0);
    CHECK(d.value == 0.0);
  }
  SECTION("flat torus translates") {
    // Translation stays optimal only while the flowed measures are concentrated relative to the
    // torus, so the shift is kept at three cells.
    SphereSpec circle;
    circle.n = 1;
    circle.count = 50;
    const auto a = build_sphere_flow(circle);
    const auto torus = build_product(a, a);
    const std::size_t nb = a.size();
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(torus.size()));
    Eigen::VectorXd v = w;
    const std::vector<std::tuple<std::size_t, std::size_t, double>> profile{{0, 0, 0.5}, {1, 0, 0.3}, {0, 2, 0.2}};
    for (auto [ia, ib, m] : profile) {
      w(static_cast<Eigen::Index>(ia * nb + ib)) = m;
      v(static_cast<Eigen::Index>(((ia + 3) % nb) * nb + ib)) = m;
    }
    const DiscreteMeasure mu(0.3, w), nu(0.3, v);
    const DeficitEstimate d = nsuper_deficit(torus, 0.3, 0.25, mu, nu, 2.0);
    INFO("D = " << d.value << ", W^2 = " << d.w2_t);
    // Equal entropies make the N term vanish, so the bound holds for every N.
    CHECK(d.integral <= 1e-20);
    CHECK(std::abs(d.value) <= 1e-3 * d.w2_t);
  }
  SECTION("shrinking Gaussian with N = 2") {
    const auto g = shrinker();
    const double t = 0.3;
    const auto mu = detail::blob(g, t, nearest(g, 0.0)), nu = detail::blob(g, t, nearest(g, 2.0));
    const DeficitEstimate d = nsuper_deficit(g, t, t - 0.05, mu, nu, 2.0);
    INFO("D = " << d.value);
    CHECK(d.value < -1e-3);
    CHECK(d.snapshots >= 16);
    CHECK_FALSE(d.low_confidence);
  }
  SECTION("errors") {
    const auto g = shrinker();
    const auto mu = detail::blob(g, 0.2, 80);
    CHECK(kind_of([&] { nsuper_deficit(g, 0.2, 0.3, mu, mu); }) == ErrorKind::invalid_input);
    CHECK(kind_of([&] { nsuper_deficit(g, 0.2, 0.1, mu, mu, 0.0); }) == ErrorKind::invalid_input);
    CHECK(kind_of([&] { nsuper_deficit(g, 0.2, 0.1, mu, mu, 2.0, 8); }) == ErrorKind::invalid_input);
  }
}

TEST_CASE("rigidity defect of spheres and products", "[probes][rigidity]") {
  CHECK(std::abs(rigidity_defect(sphere(400, constant_path(1.0), 1))) <= 1e-3);
  CHECK(std::abs(rigidity_defect(sphere(400))) <= 1e-2);

  const auto small = sphere(200, constant_path(1.0 / 3.0));
  const auto product = build_product(small, small, 400, 0);
  CHECK(rigidity_defect(product) >= 0.05);

  CHECK(kind_of([] { rigidity_defect(sphere(400, ScalarPath({1.0, -2.0}))); }) == ErrorKind::invalid_input);
  Eigen::MatrixXd far(2, 2);
  far << 0.0, 4.0, 4.0, 0.0;
  const auto wide = build_tabulated({0.0, 1.0}, 1, {0.0}, {far}, {Eigen::VectorXd::Ones(2)}, 0.0, 1, {});
  CHECK(kind_of([&] { rigidity_defect(wide); }) == ErrorKind::invalid_input);
}

TEST_CASE("rigidity defect ignores sample order and mass scale", "[probes][rigidity][property]") {
  const auto s1 = sphere(120, constant_path(1.0), 1);
  const std::size_t n = s1.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(9));
  // Uneven masses so that the normalization matters.
  Eigen::VectorXd m(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) m(static_cast<Eigen::Index>(i)) = 1.0 + 0.5 * std::sin(3.0 * static_cast<double>(i));
  auto tabulate = [&](const std::vector<std::size_t>& order, double scale) {
    Eigen::MatrixXd d(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    Eigen::VectorXd mm(static_cast<Eigen::Index>(n));
    std::vector<double> coords;
    for (std::size_t i = 0; i < n; ++i) {
      auto p = s1.point(order[i]);
      coords.insert(coords.end(), p.begin(), p.end());
      mm(static_cast<Eigen::Index>(i)) = scale * m(static_cast<Eigen::Index>(order[i]));
      for (std::size_t j = 0; j < n; ++j)
        d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s1.distance(0.0, order[i], order[j]);
    }
    return build_tabulated(coords, s1.chart_dim(), {0.0}, {d}, {mm}, 0.0, 1, {});
  };
  std::vector<std::size_t> identity(n);
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  const double base = rigidity_defect(tabulate(identity, 1.0));
  CHECK(rigidity_defect(tabulate(perm, 1.0)) == base);
  CHECK(rigidity_defect(tabulate(identity, 4.0)) == base);
  CHECK_THAT(rigidity_defect(tabulate(perm, 3.7)), WithinAbs(base, 1e-15));
}

TEST_CASE("probe records serialize their raw sequences", "[probes][io]") {
  const auto flat = flat_line();
  const auto [plus, minus] = theta_pair(flat, 0.1, nearest(flat, -0.25), nearest(flat, 0.25));
  const auto js = to_json(plus);
  for (const char* key : {"variant", "t", "x", "y", "value", "steps", "quotients", "converged", "divergent"})
    CHECK(js.contains(key));
  CHECK(js.at("quotients").size() == plus.quotients.size());
  const std::string row = csv_row(plus);
  CHECK(row.rfind("theta_plus,", 0) == 0);
  CHECK(std::count(row.begin(), row.end(), ',') == 7);
  CHECK(std::string(csv_header()) == "kind,t,x_index,y_index,value,flag,steps_used,floor_hit");
}
