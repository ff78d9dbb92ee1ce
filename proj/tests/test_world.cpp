#include <doctest.h>

#include <numeric>
#include <random>

#include "cropnav/world.hpp"

using namespace cropnav;

namespace {

FieldConfig quiet_config(int rows, double length) {
  FieldConfig cfg;
  cfg.row_groups = {rows};
  cfg.row_length = length;
  cfg.stem_jitter_along = 0.0;
  cfg.stem_jitter_lateral = 0.0;
  return cfg;
}

FieldMap translated(const FieldMap& f, const Vec2& t) {
  FieldMap out = f;
  for (Row& r : out.rows) {
    r.start += t;
    r.end += t;
    for (Stem& s : r.stems) s.center += t;
  }
  out.bounds_lo += t;
  out.bounds_hi += t;
  out.index = StemIndex(out.rows, out.bounds_lo, out.bounds_hi, 0.25);
  return out;
}

}  // namespace

TEST_CASE("build_field stem counts") {
  FieldConfig cfg;
  cfg.row_groups = {6};
  cfg.row_length = 90.0;
  cfg.gap_prob = 0.0;
  const FieldMap f = build_field(cfg, 1);
  REQUIRE(f.rows.size() == 6);
  const std::size_t expected = static_cast<std::size_t>(std::floor(90.0 / cfg.plant_spacing)) + 1;
  for (const Row& r : f.rows) CHECK(r.stems.size() == expected);
  CHECK(f.lanes.size() == 5);

  FieldConfig two = quiet_config(2, 10.0);
  two.plant_spacing = 10.0;
  const FieldMap g = build_field(two, 1);
  for (const Row& r : g.rows) CHECK(r.stems.size() == 2);
}

TEST_CASE("build_field is deterministic and seed dependent") {
  FieldConfig cfg;
  cfg.gap_prob = 0.05;
  cfg.grass.patches_per_headland = 3;
  const FieldMap a = build_field(cfg, 42);
  const FieldMap b = build_field(cfg, 42);
  const FieldMap c = build_field(cfg, 43);
  REQUIRE(a.rows.size() == b.rows.size());
  bool differs = false;
  for (std::size_t r = 0; r < a.rows.size(); ++r) {
    REQUIRE(a.rows[r].stems.size() == b.rows[r].stems.size());
    for (std::size_t k = 0; k < a.rows[r].stems.size(); ++k) {
      CHECK(a.rows[r].stems[k].center == b.rows[r].stems[k].center);
    }
    CHECK(a.rows[r].gap_mask == b.rows[r].gap_mask);
    if (a.rows[r].gap_mask != c.rows[r].gap_mask) differs = true;
  }
  CHECK(differs);
  REQUIRE(a.friction_zones.size() == b.friction_zones.size());
  for (std::size_t k = 0; k < a.friction_zones.size(); ++k) CHECK(a.friction_zones[k].mu == b.friction_zones[k].mu);
}

TEST_CASE("rows are parallel and stems stay on their rows") {
  FieldConfig cfg;
  cfg.row_groups = {4, 3};
  const FieldMap f = build_field(cfg, 9);
  const Vec2 d0 = (f.rows[0].end - f.rows[0].start).normalized();
  for (const Row& r : f.rows) {
    const Vec2 d = (r.end - r.start).normalized();
    CHECK((d - d0).norm() < 1e-9);
    for (const Stem& s : r.stems) CHECK(std::abs(s.center.y() - r.start.y()) < 6 * cfg.stem_jitter_lateral);
  }
  CHECK(f.lane_width > cfg.vehicle_width);
}

TEST_CASE("gap overrides remove stems") {
  FieldConfig cfg = quiet_config(3, 20.0);
  cfg.gaps = {{1, 5.0, 8.0}};
  const FieldMap f = build_field(cfg, 1);
  for (const Stem& s : f.rows[1].stems) CHECK_FALSE((s.center.x() >= 5.0 - 1e-9 && s.center.x() <= 8.0 + 1e-9));
  CHECK(f.rows[0].gap_mask.empty());
  CHECK_FALSE(f.rows[1].gap_mask.empty());
}

TEST_CASE("build_field rejects a lane narrower than the robot") {
  FieldConfig cfg;
  cfg.lane_width = 0.25;
  CHECK_THROWS_AS(build_field(cfg, 1), ConfigError);
}

TEST_CASE("serpentine_plan sizes and alternation") {
  FieldConfig cfg;
  cfg.row_groups = {7};
  const FieldMap f = build_field(cfg, 1);
  CHECK(serpentine_plan(f, {0, 1, 2, 3, 4, 5}).size() == 12);
  const WaypointPlan one = serpentine_plan(f, {2});
  REQUIRE(one.size() == 2);
  CHECK(one.waypoints[0].tag == WaypointTag::RowEntry);
  CHECK(one.waypoints[1].tag == WaypointTag::RowExit);
  CHECK(one.waypoints[0].point.x() == doctest::Approx(-cfg.headland_margin));
  CHECK(one.waypoints[1].point.x() == doctest::Approx(cfg.row_length + cfg.headland_margin));

  FieldConfig big;
  big.row_groups = {13, 3};
  const FieldMap g = build_field(big, 1);
  std::vector<int> lanes(14);
  std::iota(lanes.begin(), lanes.end(), 0);
  const WaypointPlan plan = serpentine_plan(g, lanes);
  CHECK(plan.size() == 28);
  for (std::size_t k = 0; k < plan.size(); ++k) {
    CHECK(plan.waypoints[k].tag == (k % 2 == 0 ? WaypointTag::RowEntry : WaypointTag::RowExit));
  }
  // odd lanes run backwards
  CHECK(plan.waypoints[2].point.x() > plan.waypoints[3].point.x());
  CHECK_THROWS_AS(serpentine_plan(g, {}), ConfigError);
  CHECK_THROWS_AS(serpentine_plan(g, {99}), ConfigError);
}

TEST_CASE("gnss_quality_at zones") {
  FieldConfig cfg;
  cfg.canopy_overhang = 0.0;
  const FieldMap f = build_field(cfg, 1);
  const GnssQuality head = gnss_quality_at(f, {-1.5, 1.0});
  CHECK_FALSE(head.degraded);
  CHECK(head.sigma == doctest::Approx(0.02));
  const GnssQuality mid = gnss_quality_at(f, {45.0, 1.14});
  CHECK(mid.degraded);
  CHECK(mid.sigma == doctest::Approx(cfg.canopy.sigma));
  CHECK(mid.bias_sigma == doctest::Approx(cfg.canopy.bias_sigma));
  CHECK(gnss_quality_at(f, {0.0, 1.0}).degraded);
  const GnssQuality far = gnss_quality_at(f, {1e4, 0.0});
  CHECK(far.clamped);
  CHECK_FALSE(far.degraded);
}

TEST_CASE("terrain_at zones and precedence") {
  FieldConfig cfg = quiet_config(3, 10.0);
  cfg.friction_zones = {{Polygon::rectangle({-3, -1}, {-1, 2}), 0.6, 0.7},
                        {Polygon::rectangle({-2, -1}, {0, 2}), 0.3, 0.4}};
  const FieldMap f = build_field(cfg, 1);
  TractionParams p = terrain_at(f, {5.0, 0.38});
  CHECK(p.mu == 1.0);
  CHECK(p.nu == 1.0);
  p = terrain_at(f, {-2.5, 0.0});
  CHECK(p.mu == 0.6);
  CHECK(p.nu == 0.7);
  p = terrain_at(f, {-1.5, 0.0});
  CHECK(p.mu == 0.6);
  p = terrain_at(f, {-0.5, 0.0});
  CHECK(p.mu == 0.3);
}

TEST_CASE("collision_query examples") {
  const FieldMap f = build_field(quiet_config(3, 20.0), 1);
  VehicleConfig v;
  const double w = f.lane_width;
  CHECK_FALSE(collision_query(f, {10.0, 0.5 * w, 0.0}, v).hit);
  const CollisionReport hit = collision_query(f, {10.0, 0.5 * w + 0.5 * w, 0.0}, v);
  CHECK(hit.hit);
  CHECK(std::abs(hit.normal.norm() - 1.0) < 1e-9);
  CHECK_FALSE(collision_query(f, {-1.5, 0.5 * w, kPi / 2}, v).hit);
  // footprint edge: the body half width plus stem radius decides contact
  CHECK(collision_query(f, {10.0, w - v.body_half_width - 0.01, 0.0}, v).hit);
  CHECK_FALSE(collision_query(f, {10.0, w - v.body_half_width - 0.03, 0.0}, v).hit);
}

TEST_CASE("collision_query is translation invariant") {
  FieldConfig cfg;
  cfg.row_groups = {4};
  cfg.row_length = 15.0;
  const FieldMap f = build_field(cfg, 5);
  const Vec2 t(3.7, -2.1);
  const FieldMap g = translated(f, t);
  VehicleConfig v;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> X(-1.0, 16.0), Y(-0.5, 2.8), T(-kPi, kPi);
  int hits = 0;
  for (int i = 0; i < 2000; ++i) {
    const RobotState s{X(rng), Y(rng), T(rng)};
    const bool a = collision_query(f, s, v).hit;
    const bool b = collision_query(g, {s.p_x + t.x(), s.p_y + t.y(), s.theta}, v).hit;
    CHECK(a == b);
    hits += a ? 1 : 0;
  }
  CHECK(hits > 0);
}

TEST_CASE("polygon containment is closed") {
  const Polygon p = Polygon::rectangle({0, 0}, {2, 1});
  CHECK(p.contains({1, 0.5}));
  CHECK(p.contains({0, 0.5}));
  CHECK(p.contains({2, 1}));
  CHECK_FALSE(p.contains({2.0001, 0.5}));
}

TEST_CASE("plan length") {
  WaypointPlan plan;
  plan.waypoints = {{{0, 0}, WaypointTag::RowEntry, 0}, {{3, 0}, WaypointTag::RowExit, 0},
                    {{3, 4}, WaypointTag::RowEntry, 1}};
  CHECK(plan.length() == doctest::Approx(7.0));
}
