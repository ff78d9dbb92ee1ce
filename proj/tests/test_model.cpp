#include <doctest.h>

#include <random>

#include "cropnav/model.hpp"

using namespace cropnav;

namespace {

// Forward Euler with many substeps as an independent integrator.
RobotState euler(const RobotState& s, const ControlInput& u, const TractionParams& p, double dt, int n) {
  Vec3 x = s.vec();
  const double h = dt / n;
  for (int i = 0; i < n; ++i) {
    x += h * Vec3(p.mu * u.v * std::cos(x(2)), p.mu * u.v * std::sin(x(2)), p.nu * u.omega);
  }
  return RobotState::from(x);
}

}  // namespace

TEST_CASE("derivative examples") {
  Vec3 d = derivative({0, 0, 0}, {1, 0}, {1, 1, 0});
  CHECK(d.isApprox(Vec3(1, 0, 0)));
  d = derivative({3, -2, 1.3}, {1, 1}, {0, 0, 0});
  CHECK(d.norm() == 0.0);
  d = derivative({0, 0, kPi / 2}, {2, 0.5}, {0.5, 0.8, 0});
  CHECK(std::abs(d.x()) < 1e-12);
  CHECK(d.y() == doctest::Approx(1.0));
  CHECK(d.z() == doctest::Approx(0.4));
}

TEST_CASE("derivative rejects non-finite input") {
  CHECK_THROWS_AS(derivative({NAN, 0, 0}, {1, 0}, {1, 1, 0}), DomainError);
  CHECK_THROWS_AS(derivative({0, 0, 0}, {INFINITY, 0}, {1, 1, 0}), DomainError);
}

TEST_CASE("derivative scales linearly in the traction channels") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> U(-2.0, 2.0), P(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const RobotState s{U(rng), U(rng), U(rng)};
    const ControlInput u{U(rng), U(rng)};
    const double mu = P(rng), nu = P(rng);
    const Vec3 base = derivative(s, u, {1, 1, 0});
    const Vec3 d = derivative(s, u, {mu, nu, 0.3});
    CHECK(d.x() == doctest::Approx(mu * base.x()));
    CHECK(d.y() == doctest::Approx(mu * base.y()));
    CHECK(d.z() == doctest::Approx(nu * base.z()));
  }
}

TEST_CASE("step examples") {
  RobotState s = step({0, 0, 0}, {1, 0}, {1, 1, 0}, 1.0);
  CHECK(s.p_x == doctest::Approx(1.0));
  CHECK(s.p_y == doctest::Approx(0.0));
  CHECK(s.theta == doctest::Approx(0.0));

  s = step({0, 0, 0}, {0, kPi}, {1, 1, 0}, 1.0);
  CHECK(s.p_x == 0.0);
  CHECK(s.p_y == 0.0);
  CHECK(s.theta == doctest::Approx(-kPi));

  s = step({0, 0, 0}, {1, 1}, {1, 1, 0}, 0.5);
  CHECK(std::abs(s.p_x - std::sin(0.5)) < 1e-6);
  CHECK(std::abs(s.p_y - (1.0 - std::cos(0.5))) < 1e-6);
  CHECK(std::abs(s.theta - 0.5) < 1e-12);
}

TEST_CASE("step rejects non-positive dt") {
  CHECK_THROWS_AS(step({0, 0, 0}, {1, 0}, {1, 1, 0}, 0.0), DomainError);
  CHECK_THROWS_AS(step({0, 0, 0}, {1, 0}, {1, 1, 0}, -0.1), DomainError);
}

TEST_CASE("step with zero traction is the identity") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(-3.0, 3.0);
  for (int i = 0; i < 50; ++i) {
    const RobotState s{U(rng), U(rng), wrap_angle(U(rng))};
    const RobotState n = step(s, {U(rng), U(rng)}, {0, 0, 0}, 0.1);
    CHECK(n.p_x == s.p_x);
    CHECK(n.p_y == s.p_y);
    CHECK(n.theta == s.theta);
  }
}

// Exact solution of the unicycle under constant inputs.
static RobotState exact_arc(const RobotState& s, const ControlInput& u, double dt) {
  if (std::abs(u.omega) < 1e-12) {
    return {s.p_x + u.v * dt * std::cos(s.theta), s.p_y + u.v * dt * std::sin(s.theta), s.theta};
  }
  const double th = s.theta + u.omega * dt;
  const double r = u.v / u.omega;
  return {s.p_x + r * (std::sin(th) - std::sin(s.theta)), s.p_y - r * (std::cos(th) - std::cos(s.theta)),
          wrap_angle(th)};
}

TEST_CASE("RK4 agrees with the closed-form arc and a fine Euler integration") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> V(-2.0, 2.0), W(-2.0, 2.0), T(-kPi, kPi), DT(0.001, 0.1);
  for (int i = 0; i < 500; ++i) {
    const RobotState s{0.0, 0.0, T(rng)};
    const ControlInput u{V(rng), W(rng)};
    const double dt = DT(rng);
    const RobotState a = step(s, u, {1, 1, 0}, dt);
    const RobotState x = exact_arc(s, u, dt);
    CHECK(std::abs(a.p_x - x.p_x) < 1e-7);
    CHECK(std::abs(a.p_y - x.p_y) < 1e-7);
    CHECK(std::abs(wrap_angle(a.theta - x.theta)) < 1e-12);
    // Euler's own truncation error is bounded by dt h |v omega| / 2
    const RobotState e = euler(s, u, {1, 1, 0}, dt, 1000);
    const double bound = 0.5 * dt * (dt / 1000) * std::abs(u.v * u.omega) * 1.01 + 1e-12;
    CHECK((a.position() - e.position()).norm() <= bound);
  }
}

TEST_CASE("long steps are subdivided") {
  const RobotState a = step({0, 0, 0}, {1, 1}, {1, 1, 0}, 0.5);
  RobotState b{0, 0, 0};
  for (int i = 0; i < 5; ++i) b = step(b, {1, 1}, {1, 1, 0}, 0.1);
  CHECK(a.p_x == doctest::Approx(b.p_x).epsilon(1e-14));
  CHECK(a.p_y == doctest::Approx(b.p_y).epsilon(1e-14));
  const Vec3 v = integrate({0, 0, 3.0}, {0, 1}, 1, 1, 0.5);
  CHECK(v.z() == doctest::Approx(3.5));
}

TEST_CASE("step_jacobian matches finite differences") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> U(-1.5, 1.5), P(0.1, 1.0);
  for (int i = 0; i < 20; ++i) {
    const Vec3 x(U(rng), U(rng), U(rng));
    const ControlInput u{U(rng), U(rng)};
    const double mu = P(rng), nu = P(rng), dt = i % 2 == 0 ? 0.1 : 0.25;
    const StepJacobian j = step_jacobian(x, u, mu, nu, dt);
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Vec3 xp = x, xm = x;
      xp(k) += h;
      xm(k) -= h;
      const Vec3 fd = (integrate(xp, u, mu, nu, dt) - integrate(xm, u, mu, nu, dt)) / (2 * h);
      CHECK((fd - j.d_state.col(k)).norm() < 1e-7);
    }
    const Vec3 fmu = (integrate(x, u, mu + h, nu, dt) - integrate(x, u, mu - h, nu, dt)) / (2 * h);
    const Vec3 fnu = (integrate(x, u, mu, nu + h, dt) - integrate(x, u, mu, nu - h, dt)) / (2 * h);
    const Vec3 fv = (integrate(x, {u.v + h, u.omega}, mu, nu, dt) - integrate(x, {u.v - h, u.omega}, mu, nu, dt)) / (2 * h);
    CHECK((fmu - j.d_traction.col(0)).norm() < 1e-7);
    CHECK((fnu - j.d_traction.col(1)).norm() < 1e-7);
    CHECK((fv - j.d_input.col(0)).norm() < 1e-7);
  }
}

TEST_CASE("wheel_commands examples") {
  VehicleConfig cfg;
  cfg.track_width = 0.4;
  WheelMapping w = wheel_commands({1, 0}, 1.0, cfg);
  CHECK(w.wheels.v_left == doctest::Approx(1.0));
  CHECK(w.wheels.v_right == doctest::Approx(1.0));
  CHECK_FALSE(w.mu_clamped);
  w = wheel_commands({0, 1}, 1.0, cfg);
  CHECK(w.wheels.v_left == doctest::Approx(-0.2));
  CHECK(w.wheels.v_right == doctest::Approx(0.2));
  w = wheel_commands({1, 0}, 0.5, cfg);
  CHECK(w.wheels.v_left == doctest::Approx(2.0));
  CHECK(w.wheels.v_right == doctest::Approx(2.0));
}

TEST_CASE("wheel_commands floors a vanishing mu") {
  VehicleConfig cfg;
  const WheelMapping w = wheel_commands({1, 0}, 0.01, cfg);
  CHECK(w.mu_clamped);
  CHECK(w.wheels.v_left == doctest::Approx(1.0 / kMuFloor));
}

TEST_CASE("inverse_wheel examples") {
  VehicleConfig cfg;
  cfg.track_width = 0.4;
  ControlInput u = inverse_wheel({1, 1}, cfg);
  CHECK(u.v == doctest::Approx(1.0));
  CHECK(u.omega == doctest::Approx(0.0));
  u = inverse_wheel({-0.2, 0.2}, cfg);
  CHECK(u.v == doctest::Approx(0.0));
  CHECK(u.omega == doctest::Approx(1.0));
  u = inverse_wheel({0, 0}, cfg);
  CHECK(u.v == 0.0);
  CHECK(u.omega == 0.0);
}

TEST_CASE("wheel map round-trips at unit traction") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> U(-2.0, 2.0);
  VehicleConfig cfg;
  for (int i = 0; i < 1000; ++i) {
    const ControlInput u{U(rng), U(rng)};
    const ControlInput r = inverse_wheel(wheel_commands(u, 1.0, cfg).wheels, cfg);
    CHECK(std::abs(r.v - u.v) < 1e-14);
    CHECK(std::abs(r.omega - u.omega) < 1e-13);
  }
}

TEST_CASE("traction clamping and angle wrapping") {
  const TractionParams p = TractionParams{1.4, -0.2, 3 * kPi / 2}.clamped();
  CHECK(p.mu == 1.0);
  CHECK(p.nu == 0.0);
  CHECK(p.delta_theta == doctest::Approx(-kPi / 2));
  CHECK(wrap_angle(kPi) == doctest::Approx(-kPi));
  CHECK(wrap_angle(-kPi) == doctest::Approx(-kPi));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(-100, 100);
  for (int i = 0; i < 1000; ++i) {
    const double w = wrap_angle(U(rng));
    CHECK(w >= -kPi);
    CHECK(w < kPi);
  }
}

TEST_CASE("vehicle config validation") {
  VehicleConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.track_width = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
