#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"
#include "rfprobe/models.hpp"
#include "rfprobe/transport.hpp"

using namespace rfprobe;
using Catch::Matchers::ContainsSubstring;
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

// Points 0..n-1 on a line with |i - j| * gap distances, static, given cell masses.
FlowSpace tabulated_line(const std::vector<double>& masses, double gap = 1.0) {
  const auto n = static_cast<Eigen::Index>(masses.size());
  Eigen::MatrixXd d(n, n);
  std::vector<double> coords;
  for (Eigen::Index i = 0; i < n; ++i) {
    coords.push_back(static_cast<double>(i));
    for (Eigen::Index j = 0; j < n; ++j) d(i, j) = gap * std::abs(static_cast<double>(i - j));
  }
  Eigen::VectorXd m = Eigen::Map<const Eigen::VectorXd>(masses.data(), n);
  return build_tabulated(coords, 1, {0.0}, {d}, {m}, 0.0, 1, nlohmann::json::object());
}

DiscreteMeasure measure(double t, std::vector<double> w) {
  return DiscreteMeasure(t, Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size())));
}

DiscreteMeasure random_measure(std::size_t n, double t, std::size_t atoms, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_real_distribution<double> weight(0.1, 1.0);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < atoms; ++k) w(static_cast<Eigen::Index>(pick(rng))) += weight(rng);
  return DiscreteMeasure::normalized(t, w);
}

FlowSpace shrinker() { return build_gaussian_1d(ScalarPath({1.0, -2.0}), constant_path(1.0)); }

FlowSpace sphere(ScalarPath lambda = constant_path(1.0)) {
  SphereSpec spec;
  spec.lambda = std::move(lambda);
  return build_sphere_flow(spec);
}

std::size_t nearest(const FlowSpace& s, double x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (std::abs(s.point(i)[0] - x) < std::abs(s.point(best)[0] - x)) best = i;
  return best;
}

void check_plan_certificates(const FlowSpace& space, double t, const DiscreteMeasure& mu,
                             const DiscreteMeasure& nu, const TransportPlan& plan) {
  CHECK(plan.marginal_residual <= 1e-9);
  CHECK(std::abs(plan.gap) <= 1e-8 * (1.0 + plan.w2));
  CHECK(plan.phi(0) == 0.0);
  double worst = -1.0;
  for (std::size_t a = 0; a < plan.support_mu.size(); ++a)
    for (std::size_t b = 0; b < plan.support_nu.size(); ++b) {
      const double d = space.distance(t, plan.support_mu[a], plan.support_nu[b]);
      worst = std::max(worst, plan.phi(static_cast<Eigen::Index>(a)) + plan.psi(static_cast<Eigen::Index>(b)) -
                                  0.5 * d * d);
    }
  CHECK(worst <= 1e-9);
  double cost = 0.0;
  for (const auto& e : plan.coupling) {
    const double d = space.distance(t, e.i, e.j);
    cost += e.w * d * d;
    CHECK(mu[e.i] > 0.0);
    CHECK(nu[e.j] > 0.0);
  }
  CHECK_THAT(cost, WithinAbs(plan.w2, 1e-12 * (1.0 + plan.w2)));
}

}  // namespace

TEST_CASE("two-point transport moves the mass imbalance", "[transport][w2]") {
  const auto line = tabulated_line({1.0, 1.0});
  const TransportPlan plan = w2(line, 0.0, measure(0.0, {0.7, 0.3}), measure(0.0, {0.3, 0.7}));
  CHECK_THAT(plan.w2, WithinAbs(0.4, 1e-12));
  check_plan_certificates(line, 0.0, measure(0.0, {0.7, 0.3}), measure(0.0, {0.3, 0.7}), plan);
}

TEST_CASE("Dirac and identical measures", "[transport][w2]") {
  const auto space = shrinker();
  const double t = 0.2;
  const auto dx = DiscreteMeasure::dirac(t, space.size(), 80);
  const auto dy = DiscreteMeasure::dirac(t, space.size(), 95);
  const TransportPlan plan = w2(space, t, dx, dy);
  CHECK_THAT(plan.w(), WithinRel(space.distance(t, 80, 95), 1e-12));
  REQUIRE(plan.coupling.size() == 1);
  CHECK(plan.coupling[0].i == 80);
  CHECK(plan.coupling[0].j == 95);
  CHECK(plan.coupling[0].w == 1.0);

  std::mt19937_64 rng(3);
  const auto mu = random_measure(space.size(), t, 12, rng);
  CHECK_THAT(w2(space, t, mu, mu).w2, WithinAbs(0.0, 1e-14));
}

TEST_CASE("exact plans carry feasible potentials with no duality gap", "[transport][w2][property]") {
  std::mt19937_64 rng(11);
  const auto s2 = sphere();
  const auto g = shrinker();
  for (int k = 0; k < 20; ++k) {
    const auto mu = random_measure(s2.size(), 0.0, 1 + k % 15, rng);
    const auto nu = random_measure(s2.size(), 0.0, 1 + (7 * k) % 20, rng);
    check_plan_certificates(s2, 0.0, mu, nu, w2(s2, 0.0, mu, nu));
    const auto a = random_measure(g.size(), 0.3, 1 + k % 30, rng);
    const auto b = random_measure(g.size(), 0.3, 1 + (3 * k) % 25, rng);
    check_plan_certificates(g, 0.3, a, b, w2(g, 0.3, a, b));
  }
}

TEST_CASE("Wasserstein distance satisfies the triangle inequality", "[transport][w2][property]") {
  std::mt19937_64 rng(5);
  const auto s2 = sphere();
  double worst = -1.0;
  for (int k = 0; k < 60; ++k) {
    const auto a = random_measure(s2.size(), 0.0, 4, rng);
    const auto b = random_measure(s2.size(), 0.0, 4, rng);
    const auto c = random_measure(s2.size(), 0.0, 4, rng);
    worst = std::max(worst, w2(s2, 0.0, a, c).w() - w2(s2, 0.0, a, b).w() - w2(s2, 0.0, b, c).w());
  }
  CHECK(worst <= 1e-7);
}

TEST_CASE("entropic cost bounds the exact cost from above", "[transport][entropic][property]") {
  std::mt19937_64 rng(17);
  const auto g = build_gaussian_1d(ScalarPath({1.0, -2.0}), constant_path(1.0), 120);
  TransportOptions ent;
  ent.method = TransportMethod::entropic;
  for (int k = 0; k < 10; ++k) {
    const auto mu = random_measure(g.size(), 0.1, 20, rng);
    const auto nu = random_measure(g.size(), 0.1, 20, rng);
    const TransportPlan exact = w2(g, 0.1, mu, nu);
    const TransportPlan e = w2(g, 0.1, mu, nu, ent);
    CHECK(e.method == "entropic");
    CHECK(e.w2 >= exact.w2 - 1e-9);
    CHECK(e.w2 - exact.w2 <= e.lambda_bias_bound);
    CHECK(e.marginal_residual <= 1e-9);
    CHECK(e.lambda > 0.0);
  }
}

TEST_CASE("transport input errors", "[transport][errors]") {
  const auto line = tabulated_line({1.0, 1.0, 1.0});
  const auto other = tabulated_line({1.0, 1.0});
  const auto mu = measure(0.0, {0.5, 0.5, 0.0});
  CHECK(kind_of([&] { w2(other, 0.0, mu, mu); }) == ErrorKind::invalid_input);
  CHECK(kind_of([&] { measure(0.0, {0.5, 0.6}); }) == ErrorKind::invalid_input);
  CHECK(kind_of([&] { measure(0.0, {1.5, -0.5}); }) == ErrorKind::invalid_input);

  TransportOptions starved;
  starved.method = TransportMethod::entropic;
  starved.max_iterations = 1;
  starved.lambda = 1e-4;
  std::mt19937_64 rng(2);
  const auto g = build_gaussian_1d(constant_path(1.0), constant_path(0.0), 60);
  const auto a = random_measure(g.size(), 0.0, 20, rng);
  const auto b = random_measure(g.size(), 0.0, 20, rng);
  CHECK(kind_of([&] { w2(g, 0.0, a, b, starved); }) == ErrorKind::convergence_failure);
}

TEST_CASE("relative entropy closed forms", "[transport][entropy]") {
  const auto two = tabulated_line({1.0, 1.0});
  CHECK_THAT(entropy(two, 0.0, measure(0.0, {0.25, 0.75})),
             WithinAbs(0.25 * std::log(0.25) + 0.75 * std::log(0.75), 1e-15));
  CHECK_THAT(entropy(two, 0.0, measure(0.0, {0.25, 0.75})), WithinAbs(-0.5623, 1e-4));

  const auto g = shrinker();
  const double t = 0.25;
  CHECK_THAT(entropy(g, t, DiscreteMeasure::dirac(t, g.size(), 50)), WithinAbs(-std::log(g.mass(t, 50)), 1e-12));

  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(g.size()));
  double mass_s = 0.0;
  for (std::size_t i = 60; i < 140; i += 3) {
    w(static_cast<Eigen::Index>(i)) = g.mass(t, i);
    mass_s += g.mass(t, i);
  }
  CHECK_THAT(entropy(g, t, DiscreteMeasure::normalized(t, w)), WithinAbs(-std::log(mass_s), 1e-12));
}

TEST_CASE("entropy shifts by log c when masses scale by c", "[transport][entropy][property]") {
  const std::vector<double> m{0.3, 1.2, 0.7, 2.0};
  const double c = 3.7;
  std::vector<double> cm;
  for (double v : m) cm.push_back(c * v);
  const auto base = tabulated_line(m), scaled = tabulated_line(cm);
  const auto mu = measure(0.0, {0.1, 0.4, 0.0, 0.5});
  CHECK_THAT(entropy(scaled, 0.0, mu), WithinAbs(entropy(base, 0.0, mu) - std::log(c), 1e-14));
}

TEST_CASE("displacement interpolation endpoints and midpoint", "[transport][interpolation]") {
  const auto line = build_gaussian_1d(constant_path(1.0), constant_path(0.0), 200);
  const std::size_t i0 = nearest(line, 0.0), i1 = nearest(line, 1.0);
  const TransportPlan plan = w2(line, 0.0, DiscreteMeasure::dirac(0.0, line.size(), i0),
                                DiscreteMeasure::dirac(0.0, line.size(), i1));
  CHECK(displacement_interpolate(line, 0.0, plan, 0.0).weights() ==
        DiscreteMeasure::dirac(0.0, line.size(), i0).weights());
  CHECK(displacement_interpolate(line, 0.0, plan, 1.0).weights() ==
        DiscreteMeasure::dirac(0.0, line.size(), i1).weights());

  const double mid = 0.5 * (line.point(i0)[0] + line.point(i1)[0]);
  const auto half = displacement_interpolate(line, 0.0, plan, 0.5);
  CHECK_THAT(half.weights().sum(), WithinAbs(1.0, 1e-12));
  for (std::size_t k : half.support()) CHECK(std::abs(line.point(k)[0] - mid) <= line.median_spacing(0.0));
  CHECK(half.support().size() <= 2);

  std::mt19937_64 rng(8);
  const auto s2 = sphere();
  const auto mu = random_measure(s2.size(), 0.0, 6, rng);
  const auto nu = random_measure(s2.size(), 0.0, 6, rng);
  const TransportPlan p = w2(s2, 0.0, mu, nu);
  const auto a0 = displacement_interpolate(s2, 0.0, p, 0.0);
  const auto a1 = displacement_interpolate(s2, 0.0, p, 1.0);
  CHECK((a0.weights() - mu.weights()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((a1.weights() - nu.weights()).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("displacement interpolation has constant speed", "[transport][interpolation][property]") {
  auto check = [](const FlowSpace& space, double t, const DiscreteMeasure& mu, const DiscreteMeasure& nu,
                  double binning) {
    const TransportPlan p = w2(space, t, mu, nu);
    const double W = p.w();
    for (auto [a, b] : std::vector<std::pair<double, double>>{{0.0, 0.5}, {0.25, 0.75}, {0.5, 1.0}, {0.2, 0.9}}) {
      const auto ma = displacement_interpolate(space, t, p, a);
      const auto mb = displacement_interpolate(space, t, p, b);
      INFO("a = " << a << ", b = " << b << ", W = " << W);
      CHECK_THAT(w2(space, t, ma, mb).w(), WithinAbs(std::abs(a - b) * W, binning));
    }
  };
  SECTION("flat line") {
    const auto line = build_gaussian_1d(constant_path(1.0), constant_path(0.0), 401);
    Eigen::VectorXd a = Eigen::VectorXd::Zero(401), b = Eigen::VectorXd::Zero(401);
    a(static_cast<Eigen::Index>(nearest(line, -1.0))) = 0.5;
    a(static_cast<Eigen::Index>(nearest(line, -0.4))) = 0.5;
    b(static_cast<Eigen::Index>(nearest(line, 0.6))) = 0.3;
    b(static_cast<Eigen::Index>(nearest(line, 1.5))) = 0.7;
    check(line, 0.0, DiscreteMeasure(0.0, a), DiscreteMeasure(0.0, b), line.median_spacing(0.0));
  }
  SECTION("sphere") {
    const auto s2 = sphere();
    std::mt19937_64 rng(21);
    const std::size_t x = 10;
    std::size_t y = 0;
    for (std::size_t k = 0; k < s2.size(); ++k)
      if (std::abs(s2.distance(0.0, x, k) - 1.2) < std::abs(s2.distance(0.0, x, y) - 1.2)) y = k;
    check(s2, 0.0, DiscreteMeasure::dirac(0.0, s2.size(), x), DiscreteMeasure::dirac(0.0, s2.size(), y),
          s2.median_spacing(0.0));
  }
}

TEST_CASE("interpolation refuses spaces without geodesics and apex crossings", "[transport][interpolation][errors]") {
  const auto line = tabulated_line({1.0, 1.0, 1.0});
  const TransportPlan p = w2(line, 0.0, measure(0.0, {1.0, 0.0, 0.0}), measure(0.0, {0.0, 0.0, 1.0}));
  CHECK(kind_of([&] { displacement_interpolate(line, 0.0, p, 0.5); }) == ErrorKind::unsupported);

  const auto g = shrinker();
  const TransportPlan q = w2(g, 0.0, DiscreteMeasure::dirac(0.0, g.size(), 1), DiscreteMeasure::dirac(0.0, g.size(), 2));
  CHECK(kind_of([&] { displacement_interpolate(g, 0.0, q, 1.5); }) == ErrorKind::invalid_input);

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
  const TransportPlan c = w2(cone, 0.0, DiscreteMeasure::dirac(0.0, cone.size(), x),
                             DiscreteMeasure::dirac(0.0, cone.size(), y));
  CHECK(kind_of([&] { displacement_interpolate(cone, 0.0, c, 0.5); }) == ErrorKind::excluded_pair);
}

TEST_CASE("left time derivative of W^2 for frozen measures", "[transport][derivative]") {
  const std::vector<double> hs{0.04, 0.02, 0.01};
  SECTION("static space") {
    const auto s2 = sphere();
    std::mt19937_64 rng(1);
    const auto mu = random_measure(s2.size(), 0.2, 5, rng), nu = random_measure(s2.size(), 0.2, 5, rng);
    const LeftDerivative d = dt_w2_left(s2, 0.2, mu, nu, hs);
    CHECK_THAT(d.extrapolant, WithinAbs(0.0, 1e-8));
    CHECK_FALSE(d.non_monotone);
  }
  SECTION("gaussian shrinker scales uniformly") {
    const auto g = shrinker();
    std::mt19937_64 rng(2);
    const double t = 0.2;
    const auto mu = random_measure(g.size(), t, 6, rng), nu = random_measure(g.size(), t, 6, rng);
    const LeftDerivative d = dt_w2_left(g, t, mu, nu, hs);
    const double expected = -2.0 * d.w2_t / (1.0 - 2.0 * t);
    CHECK_THAT(d.extrapolant, WithinAbs(expected, 1e-9 * (1.0 + std::abs(expected))));
    for (double q : d.quotients) CHECK_THAT(q, WithinAbs(expected, 1e-9 * (1.0 + std::abs(expected))));
  }
  SECTION("shrinking sphere Diracs") {
    const auto s2 = sphere(ScalarPath({1.0, -2.0}));
    const double d0 = s2.distance(0.0, 5, 77);
    const double t = 0.3;
    const LeftDerivative d = dt_w2_left(s2, t, DiscreteMeasure::dirac(t, s2.size(), 5),
                                        DiscreteMeasure::dirac(t, s2.size(), 77), hs);
    CHECK_THAT(d.extrapolant, WithinAbs(-2.0 * d0 * d0, 1e-8));
  }
  SECTION("zig-zag metric is flagged") {
    std::vector<Eigen::MatrixXd> dist;
    std::vector<Eigen::VectorXd> mass;
    for (double v : {1.0, 1.1, 1.0, 1.1, 1.0}) {
      Eigen::MatrixXd d(2, 2);
      d << 0.0, v, v, 0.0;
      dist.push_back(d);
      mass.push_back(Eigen::VectorXd::Ones(2));
    }
    const auto zig = build_tabulated({0.0, 1.0}, 1, {0.0, 0.05, 0.1, 0.15, 0.2}, dist, mass, 5.0, 1,
                                     nlohmann::json::object());
    const LeftDerivative d = dt_w2_left(zig, 0.2, measure(0.2, {1.0, 0.0}), measure(0.2, {0.0, 1.0}),
                                        {0.15, 0.1, 0.05});
    CHECK(d.non_monotone);
  }
  SECTION("steps must stay in the window") {
    const auto g = shrinker();
    const auto mu = DiscreteMeasure::dirac(0.05, g.size(), 3);
    CHECK(kind_of([&] { dt_w2_left(g, 0.05, mu, mu, {0.1}); }) == ErrorKind::invalid_input);
    CHECK(kind_of([&] { dt_w2_left(g, 0.05, mu, mu, {}); }) == ErrorKind::invalid_input);
  }
}

TEST_CASE("plan JSON export", "[transport][io]") {
  const auto line = tabulated_line({1.0, 1.0});
  const TransportPlan plan = w2(line, 0.0, measure(0.0, {0.7, 0.3}), measure(0.0, {0.3, 0.7}));
  const auto js = plan_to_json(plan);
  for (const char* key : {"t", "method", "w2", "duality_gap", "phi", "psi", "coupling", "support_mu", "support_nu"})
    CHECK(js.contains(key));
  double total = 0.0;
  for (const auto& e : js.at("coupling")) {
    REQUIRE(e.size() == 3);
    total += e[2].get<double>();
  }
  CHECK_THAT(total, WithinAbs(1.0, 1e-12));
  CHECK(plan_to_json(w2(line, 0.0, measure(0.0, {0.7, 0.3}), measure(0.0, {0.3, 0.7}))).dump() == js.dump());
}
