#pragma once

// Ground-truth field: parallel rows of stem discs, lanes between adjacent
// rows, canopy polygons where GNSS degrades and terrain friction zones.

#include <cstdint>
#include <optional>
#include <vector>

#include "cropnav/common.hpp"
#include "cropnav/model.hpp"

namespace cropnav {

struct Polygon {
  std::vector<Vec2> vertices;

  static Polygon rectangle(const Vec2& lo, const Vec2& hi);
  // Closed: points on an edge are inside.
  bool contains(const Vec2& p) const;
};

struct Stem {
  Vec2 center;
  double radius = 0.02;
};

struct Row {
  Vec2 start;
  Vec2 end;
  std::vector<Stem> stems;
  std::vector<int> gap_mask;  // nominal plant slots left empty
};

// Corridor between two adjacent rows of the same group.
struct Lane {
  Vec2 start;  // center line at the row starts
  Vec2 end;
};

struct FrictionZone {
  Polygon area;
  double mu = 1.0;
  double nu = 1.0;
};

struct GnssQuality {
  double sigma = 0.02;
  Vec2 bias_mean = Vec2::Zero();
  double bias_sigma = 0.0;  // stationary std of the Gauss-Markov bias
  double bias_tau = 30.0;   // correlation time, s
  double dropout_prob = 0.0;
  bool degraded = false;
  bool clamped = false;  // query point was outside the bounds
};

struct GapOverride {
  int row = 0;  // global row index
  double from = 0.0;  // along-row distance from the row start, m
  double to = 0.0;
};

struct GrassConfig {
  int patches_per_headland = 0;
  double min_size = 1.0;
  double max_size = 3.0;
  double mu_min = 0.6;
  double mu_max = 0.8;
  double nu_min = 0.6;
  double nu_max = 0.8;
};

struct FieldConfig {
  std::vector<int> row_groups{7};  // rows per group; groups are stacked along +y
  double group_spacing = 10.0;     // open ground between groups, m
  double row_length = 90.0;
  double lane_width = 0.76;
  double plant_spacing = 0.15;
  double stem_radius = 0.02;
  double stem_jitter_along = 0.02;
  double stem_jitter_lateral = 0.01;
  double gap_prob = 0.0;
  std::vector<GapOverride> gaps;
  double headland_margin = 2.0;
  double canopy_overhang = 0.0;
  double bounds_margin = 8.0;
  double vehicle_width = 0.3;
  GnssQuality open_sky{0.02, Vec2::Zero(), 0.0, 30.0, 0.0, false, false};
  GnssQuality canopy{0.08, Vec2::Zero(), 0.2, 30.0, 0.05, true, false};
  GrassConfig grass;
  std::vector<FrictionZone> friction_zones;  // explicit zones, checked before grass

  void validate() const;
};

class StemIndex {
 public:
  StemIndex() = default;
  StemIndex(const std::vector<Row>& rows, const Vec2& lo, const Vec2& hi, double cell);

  // Calls f(stem) for every stem whose cell overlaps the axis-aligned box.
  template <typename F>
  void for_each_in_box(const Vec2& lo, const Vec2& hi, F&& f) const {
    const int i0 = cell_x(lo.x()), i1 = cell_x(hi.x());
    const int j0 = cell_y(lo.y()), j1 = cell_y(hi.y());
    for (int j = j0; j <= j1; ++j) {
      for (int i = i0; i <= i1; ++i) {
        const auto& c = cells_[static_cast<std::size_t>(j) * nx_ + i];
        for (int k : c) f(stems_[static_cast<std::size_t>(k)]);
      }
    }
  }

  const std::vector<int>& cell(int i, int j) const {
    return cells_[static_cast<std::size_t>(j) * nx_ + i];
  }
  const Stem& stem(int k) const { return stems_[static_cast<std::size_t>(k)]; }
  int cell_x(double x) const;
  int cell_y(double y) const;
  int nx() const { return nx_; }
  int ny() const { return ny_; }
  double cell_size() const { return cell_; }
  const Vec2& origin() const { return lo_; }
  std::size_t size() const { return stems_.size(); }

 private:
  std::vector<Stem> stems_;
  std::vector<std::vector<int>> cells_;
  Vec2 lo_ = Vec2::Zero();
  double cell_ = 0.25;
  int nx_ = 0;
  int ny_ = 0;
};

struct FieldMap {
  FieldConfig config;
  std::vector<Row> rows;
  std::vector<Lane> lanes;
  double lane_width = 0.76;
  double headland_margin = 2.0;
  std::vector<FrictionZone> friction_zones;
  std::vector<Polygon> canopy_polygons;
  Vec2 bounds_lo = Vec2::Zero();
  Vec2 bounds_hi = Vec2::Zero();
  StemIndex index;

  std::size_t stem_count() const { return index.size(); }
};

FieldMap build_field(const FieldConfig& cfg, std::uint64_t seed);

enum class WaypointTag { RowEntry, RowExit };

struct Waypoint {
  Vec2 point;
  WaypointTag tag = WaypointTag::RowEntry;
  int lane = -1;
};

struct WaypointPlan {
  std::vector<Waypoint> waypoints;

  bool empty() const { return waypoints.empty(); }
  std::size_t size() const { return waypoints.size(); }
  // Polyline length from the first to the last waypoint.
  double length() const;
};

// Entry/exit pair per lane, headland_margin outside the row ends, alternating
// traversal direction along the list.
WaypointPlan serpentine_plan(const FieldMap& field, const std::vector<int>& lane_indices);

GnssQuality gnss_quality_at(const FieldMap& field, const Vec2& p);

TractionParams terrain_at(const FieldMap& field, const Vec2& p);

struct CollisionReport {
  bool hit = false;
  Vec2 normal = Vec2::Zero();         // unit, from the stem toward the robot
  Vec2 contact_point = Vec2::Zero();  // on the robot footprint, world frame
  double depth = 0.0;
};

CollisionReport collision_query(const FieldMap& field, const RobotState& state,
                                const VehicleConfig& cfg);

}  // namespace cropnav
