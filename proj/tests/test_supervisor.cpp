#include <doctest.h>

#include <random>

#include "cropnav/supervisor.hpp"

using namespace cropnav;

namespace {

WaypointPlan straight_plan(double length) {
  WaypointPlan plan;
  plan.waypoints = {{{0, 0}, WaypointTag::RowEntry, 0}, {{length, 0}, WaypointTag::RowExit, 0}};
  return plan;
}

bool contains_state(const RecoveryBuffer& buf, const RobotState& x) {
  for (const BufferedState& b : buf.samples()) {
    if ((b.x.vec() - x.vec()).norm() < 1e-12) return true;
  }
  return false;
}

SupervisorInputs inputs(double t, const RobotState& pose, double mu) {
  SupervisorInputs in;
  in.t = t;
  in.estimate = pose;
  in.truth = pose.position();
  in.params = {mu, 1.0, 0.0};
  in.mhe_valid = true;
  return in;
}

int count_events(const std::vector<SupervisorEvent>& ev, const std::string& name) {
  int n = 0;
  for (const SupervisorEvent& e : ev) n += e.event == name ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("detect_failure thresholds") {
  SupervisorConfig cfg;
  CHECK(detect_failure({0.05, 1, 0}, cfg));
  CHECK_FALSE(detect_failure({0.2, 1, 0}, cfg));
  CHECK_FALSE(detect_failure({0.95, 1, 0}, cfg));
  CHECK(detect_failure({0.199, 1, 0}, cfg));
}

TEST_CASE("update_mode examples and totality") {
  CHECK(update_mode(Mode::OutRow, true, false, false) == Mode::InRow);
  CHECK(update_mode(Mode::InRow, false, false, false) == Mode::OutRow);
  CHECK(update_mode(Mode::InRow, true, true, false) == Mode::Recovery);
  CHECK(update_mode(Mode::Recovery, true, false, false) == Mode::Recovery);
  CHECK(update_mode(Mode::Recovery, true, false, true) == Mode::InRow);
  CHECK(update_mode(Mode::Recovery, false, false, true) == Mode::OutRow);
  for (Mode m : {Mode::InRow, Mode::OutRow, Mode::Recovery}) {
    for (int bits = 0; bits < 8; ++bits) {
      const bool in_row = bits & 1, failure = bits & 2, done = bits & 4;
      const Mode n = update_mode(m, in_row, failure, done);
      CHECK((n == Mode::InRow || n == Mode::OutRow || n == Mode::Recovery));
      if (failure) CHECK(n == Mode::Recovery);
    }
  }
}

TEST_CASE("waypoint reference on a straight segment") {
  SupervisorConfig cfg;
  WaypointTracker tr(straight_plan(10.0), cfg);
  tr.update({1.0, 0.3});
  CHECK(tr.progress() == 0);
  tr.update({0.2, 0.1});
  tr.update({1.0, 0.3});
  CHECK(tr.progress() == 1);
  const ReferencePath p = waypoint_reference(tr, {1.0, 0.3, 0.2});
  REQUIRE(p.size() > 10);
  CHECK(p.points.front().x.p_x == doctest::Approx(1.0));
  for (const ReferencePoint& r : p.points) {
    CHECK(r.x.p_y == doctest::Approx(0.0));
    CHECK(r.x.theta == doctest::Approx(0.0));
    CHECK(r.u.v == doctest::Approx(cfg.cruise_speed));
  }
  double len = 0.0;
  for (std::size_t k = 1; k < p.size(); ++k) len += (p.points[k].x.position() - p.points[k - 1].x.position()).norm();
  CHECK(len == doctest::Approx(cfg.waypoint_lookahead).epsilon(0.03));
  CHECK(tr.corridor_distance({4.0, 0.3}) == doctest::Approx(0.3));
  CHECK(tr.arc_length({4.0, 0.3}) == doctest::Approx(4.0));
}

TEST_CASE("waypoint reference holds at the end") {
  SupervisorConfig cfg;
  WaypointTracker tr(straight_plan(10.0), cfg);
  tr.update({0.0, 0.0});
  tr.update({10.2, 0.0});
  CHECK(tr.finished());
  const ReferencePath p = tr.reference({10.2, 0.0, 0.0});
  CHECK(p.hold);
  REQUIRE(p.size() == 1);
  CHECK(p.points[0].x.p_x == doctest::Approx(10.0));
  CHECK(p.points[0].u.v == 0.0);

  WaypointTracker near(straight_plan(10.0), cfg);
  near.update({0.0, 0.0});
  const ReferencePath q = near.reference({8.0, 0.0, 0.0});
  CHECK(q.points.back().x.p_x == doctest::Approx(10.0));
  CHECK(q.points.back().u.v == 0.0);
}

TEST_CASE("waypoint progress is monotone") {
  SupervisorConfig cfg;
  FieldConfig fc;
  fc.row_groups = {5};
  fc.row_length = 20.0;
  const FieldMap f = build_field(fc, 1);
  WaypointTracker tr(serpentine_plan(f, {0, 1, 2, 3}), cfg);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> X(-3.0, 23.0), Y(-1.0, 4.0);
  std::size_t last = 0;
  for (int i = 0; i < 5000; ++i) {
    tr.update({X(rng), Y(rng)});
    CHECK(tr.progress() >= last);
    last = tr.progress();
  }
}

TEST_CASE("lane_reference geometry") {
  SupervisorConfig cfg;
  LaneEstimate e;
  e.initialized = true;
  e.last_update = 0.0;
  e.d_lane = 0.1;
  std::optional<ReferencePath> p = lane_reference(e, 0.5, cfg);
  REQUIRE(p);
  CHECK(p->frame == Frame::Robot);
  for (const ReferencePoint& r : p->points) {
    CHECK(r.x.p_y == doctest::Approx(-0.1));
    CHECK(r.x.theta == doctest::Approx(0.0));
  }
  CHECK(p->points.back().x.p_x == doctest::Approx(cfg.lane_lookahead));

  e.d_lane = 0.0;
  e.phi = deg2rad(10.0);
  p = lane_reference(e, 0.5, cfg);
  REQUIRE(p);
  for (const ReferencePoint& r : p->points) {
    CHECK(r.x.theta == doctest::Approx(-deg2rad(10.0)));
    // on the line through the origin at -10 degrees
    CHECK(r.x.p_y == doctest::Approx(-std::tan(deg2rad(10.0)) * r.x.p_x));
  }

  e.d_lane = 0.2;
  e.phi = deg2rad(-7.0);
  p = lane_reference(e, 0.5, cfg);
  REQUIRE(p);
  // distance from the robot to the reference line equals |d_lane|
  const Vec2 a = p->points.front().x.position(), b = p->points.back().x.position();
  const Vec2 n = Vec2(-(b - a).y(), (b - a).x()).normalized();
  CHECK(std::abs(a.dot(n)) == doctest::Approx(0.2));

  CHECK_FALSE(lane_reference(e, 1.5, cfg));
  CHECK_FALSE(lane_reference(LaneEstimate{}, 0.0, cfg));
}

TEST_CASE("recovery_reference reverses the buffered forward path") {
  SupervisorConfig cfg;
  RecoveryBuffer buf(cfg.buffer_span);
  for (int k = 0; k <= 100; ++k) buf.push({0.06 * k, 0.01 * k, 0.1}, 0.1 * k);
  const RobotState pose{6.0, 1.0, 0.1};
  const ReferencePath p = recovery_reference(buf, pose, cfg);
  REQUIRE(p.size() > 2);
  CHECK(p.points.front().x.p_x == doctest::Approx(6.0));
  double prev = 1e9;
  for (const ReferencePoint& r : p.points) {
    CHECK(r.u.v <= 0.0);
    CHECK(contains_state(buf, r.x));
    CHECK(r.x.p_x < prev);
    prev = r.x.p_x;
  }
  // replays at most the recovery duration
  CHECK(p.points.back().x.p_x >= 0.06 * (100 - cfg.recovery_duration / 0.1) - 1e-9);
}

TEST_CASE("recovery_reference falls back to a short straight reverse") {
  SupervisorConfig cfg;
  RecoveryBuffer buf(cfg.buffer_span);
  const RobotState pose{2.0, 1.0, kPi / 2};
  buf.push(pose, 0.0);
  const ReferencePath p = recovery_reference(buf, pose, cfg);
  REQUIRE(p.size() >= 2);
  for (const ReferencePoint& r : p.points) CHECK(r.u.v < 0.0);
  CHECK((p.points.back().x.position() - pose.position()).norm() == doctest::Approx(cfg.fallback_reverse));
  CHECK(p.points.back().x.p_y < pose.p_y);
}

TEST_CASE("recovery buffer ignores stale samples and bounds its span") {
  RecoveryBuffer buf(2.0);
  buf.push({0, 0, 0}, 1.0);
  buf.push({1, 0, 0}, 1.0);
  buf.push({1, 0, 0}, 0.5);
  CHECK(buf.samples().size() == 1);
  for (int k = 1; k < 100; ++k) buf.push({0.1 * k, 0, 0}, 1.0 + 0.1 * k);
  CHECK(buf.span() <= 2.0 + 1e-9);
}

TEST_CASE("failure switches to recovery and three failed attempts intervene") {
  SupervisorConfig cfg;
  Supervisor sup(straight_plan(50.0), cfg);
  double t = 0.0;
  for (int k = 0; k < 100; ++k, t += 0.1) {
    const SupervisorOutput out = sup.tick(inputs(t, {0.06 * k, 0.0, 0.0}, 0.9));
    CHECK(out.mode == Mode::OutRow);
    CHECK_FALSE(out.intervention);
  }
  const RobotState stuck{6.0, 0.0, 0.0};
  SupervisorOutput out = sup.tick(inputs(t, stuck, 0.05));
  CHECK(out.mode == Mode::Recovery);
  CHECK(count_events(out.events, "recovery") == 1);
  REQUIRE_FALSE(out.path.empty());
  CHECK(out.path.points.front().u.v < 0.0);

  bool intervened = false;
  double when = 0.0;
  for (int k = 0; k < 200 && !intervened; ++k) {
    t += 0.1;
    out = sup.tick(inputs(t, stuck, 0.05));
    if (out.intervention) {
      intervened = true;
      when = t;
      CHECK(count_events(out.events, "intervention") == 1);
    }
  }
  CHECK(intervened);
  CHECK(sup.recoveries() == 3);
  CHECK(when == doctest::Approx(10.0 + 3 * cfg.recovery_window).epsilon(0.02));
}

TEST_CASE("recovery ends once mu stays restored for a window") {
  SupervisorConfig cfg;
  Supervisor sup(straight_plan(50.0), cfg);
  double t = 0.0;
  for (int k = 0; k < 60; ++k, t += 0.1) sup.tick(inputs(t, {0.06 * k, 0.0, 0.0}, 0.9));
  sup.tick(inputs(t, {3.6, 0.0, 0.0}, 0.05));
  CHECK(sup.mode() == Mode::Recovery);
  for (int k = 0; k < 45; ++k) {
    t += 0.1;
    sup.tick(inputs(t, {3.6, 0.0, 0.0}, 0.8));
  }
  CHECK(sup.mode() == Mode::OutRow);
  CHECK(sup.recoveries() == 1);
}

TEST_CASE("recovery disabled never leaves the nominal modes") {
  SupervisorConfig cfg;
  Supervisor sup(straight_plan(50.0), cfg);
  for (int k = 0; k < 100; ++k) {
    SupervisorInputs in = inputs(0.1 * k, {0.06 * k, 0.0, 0.0}, 0.05);
    in.recovery_enabled = false;
    in.in_row = k > 50;
    const SupervisorOutput out = sup.tick(in);
    CHECK(out.mode != Mode::Recovery);
  }
  CHECK(sup.mode() == Mode::InRow);
  CHECK(sup.recoveries() == 0);
}

TEST_CASE("leaving the corridor triggers an intervention") {
  SupervisorConfig cfg;
  Supervisor sup(straight_plan(50.0), cfg);
  sup.tick(inputs(0.0, {0.0, 0.0, 0.0}, 0.9));
  bool intervened = false;
  double when = 0.0;
  for (int k = 1; k < 100 && !intervened; ++k) {
    SupervisorInputs in = inputs(0.1 * k, {1.0, 0.0, 0.0}, 0.9);
    in.truth = Vec2(1.0, 2.0);
    const SupervisorOutput out = sup.tick(in);
    if (out.intervention) {
      intervened = true;
      when = in.t;
      REQUIRE(out.events.size() >= 1);
      CHECK(out.events.back().detail == "corridor");
    }
  }
  CHECK(intervened);
  CHECK(when == doctest::Approx(0.1 + cfg.corridor_time).epsilon(0.05));
}

TEST_CASE("supervisor config validation") {
  SupervisorConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.mu_failure = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(WaypointTracker(WaypointPlan{}, SupervisorConfig{}), ConfigError);
}
