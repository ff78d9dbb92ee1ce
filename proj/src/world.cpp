#include "cropnav/world.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cropnav/rng.hpp"

namespace cropnav {

Polygon Polygon::rectangle(const Vec2& lo, const Vec2& hi) {
  return Polygon{{lo, Vec2(hi.x(), lo.y()), hi, Vec2(lo.x(), hi.y())}};
}

bool Polygon::contains(const Vec2& p) const {
  const std::size_t n = vertices.size();
  if (n < 3) return false;
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = vertices[i];
    const Vec2& b = vertices[j];
    // boundary check: collinear and within the segment's extent
    const Vec2 ab = b - a;
    const Vec2 ap = p - a;
    const double cross = ab.x() * ap.y() - ab.y() * ap.x();
    const double scale = std::max(1.0, ab.norm());
    if (std::abs(cross) <= 1e-12 * scale) {
      const double t = ap.dot(ab);
      if (t >= 0.0 && t <= ab.squaredNorm()) return true;
    }
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x_cross = a.x() + (p.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
      if (p.x() < x_cross) inside = !inside;
    }
  }
  return inside;
}

void FieldConfig::validate() const {
  if (row_groups.empty()) throw ConfigError("field: no row groups");
  for (int n : row_groups) {
    if (n < 1) throw ConfigError("field: row group with no rows");
  }
  if (!(row_length > 0.0)) throw ConfigError("field: row_length must be positive");
  if (!(plant_spacing > 0.0)) throw ConfigError("field: plant_spacing must be positive");
  if (!(stem_radius > 0.0)) throw ConfigError("field: stem_radius must be positive");
  if (!(lane_width > vehicle_width)) {
    throw ConfigError("field: lane_width must exceed the vehicle width");
  }
  if (!(gap_prob >= 0.0 && gap_prob <= 1.0)) throw ConfigError("field: gap_prob outside [0, 1]");
  if (!(headland_margin >= 0.0)) throw ConfigError("field: negative headland_margin");
  for (const GnssQuality* q : {&open_sky, &canopy}) {
    if (!(q->sigma >= 0.0 && q->bias_sigma >= 0.0 && q->bias_tau > 0.0)) {
      throw ConfigError("field: invalid GNSS noise profile");
    }
    if (!(q->dropout_prob >= 0.0 && q->dropout_prob <= 1.0)) {
      throw ConfigError("field: dropout_prob outside [0, 1]");
    }
  }
}

StemIndex::StemIndex(const std::vector<Row>& rows, const Vec2& lo, const Vec2& hi, double cell)
    : lo_(lo), cell_(cell) {
  nx_ = std::max(1, static_cast<int>(std::ceil((hi.x() - lo.x()) / cell)));
  ny_ = std::max(1, static_cast<int>(std::ceil((hi.y() - lo.y()) / cell)));
  cells_.resize(static_cast<std::size_t>(nx_) * ny_);
  for (const Row& r : rows) {
    for (const Stem& s : r.stems) {
      const int k = static_cast<int>(stems_.size());
      stems_.push_back(s);
      // register in every cell the disc touches
      const int i0 = cell_x(s.center.x() - s.radius), i1 = cell_x(s.center.x() + s.radius);
      const int j0 = cell_y(s.center.y() - s.radius), j1 = cell_y(s.center.y() + s.radius);
      for (int j = j0; j <= j1; ++j) {
        for (int i = i0; i <= i1; ++i) cells_[static_cast<std::size_t>(j) * nx_ + i].push_back(k);
      }
    }
  }
}

int StemIndex::cell_x(double x) const {
  return std::clamp(static_cast<int>(std::floor((x - lo_.x()) / cell_)), 0, nx_ - 1);
}

int StemIndex::cell_y(double y) const {
  return std::clamp(static_cast<int>(std::floor((y - lo_.y()) / cell_)), 0, ny_ - 1);
}

FieldMap build_field(const FieldConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  RandomStream rng = make_stream(seed, "field");
  RandomStream grass_rng = make_stream(seed, "terrain");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  FieldMap field;
  field.config = cfg;
  field.lane_width = cfg.lane_width;
  field.headland_margin = cfg.headland_margin;

  const int slots = static_cast<int>(std::floor(cfg.row_length / cfg.plant_spacing + 1e-9)) + 1;
  double y0 = 0.0;
  int global_row = 0;
  for (int n_rows : cfg.row_groups) {
    const int first_row = static_cast<int>(field.rows.size());
    for (int r = 0; r < n_rows; ++r, ++global_row) {
      Row row;
      const double y = y0 + r * cfg.lane_width;
      row.start = Vec2(0.0, y);
      row.end = Vec2(cfg.row_length, y);
      for (int s = 0; s < slots; ++s) {
        const double along = s * cfg.plant_spacing;
        // draws are consumed even for gaps so gap settings do not shift jitter
        const double ja = cfg.stem_jitter_along * gauss(rng);
        const double jl = cfg.stem_jitter_lateral * gauss(rng);
        const bool random_gap = unit(rng) < cfg.gap_prob;
        bool forced_gap = false;
        for (const GapOverride& g : cfg.gaps) {
          if (g.row == global_row && along >= g.from && along <= g.to) forced_gap = true;
        }
        if (random_gap || forced_gap) {
          row.gap_mask.push_back(s);
          continue;
        }
        row.stems.push_back(Stem{Vec2(along + ja, y + jl), cfg.stem_radius});
      }
      field.rows.push_back(std::move(row));
    }
    for (int r = first_row; r + 1 < static_cast<int>(field.rows.size()); ++r) {
      const Row& a = field.rows[static_cast<std::size_t>(r)];
      const Row& b = field.rows[static_cast<std::size_t>(r + 1)];
      field.lanes.push_back(Lane{0.5 * (a.start + b.start), 0.5 * (a.end + b.end)});
    }
    const double y_last = y0 + (n_rows - 1) * cfg.lane_width;
    field.canopy_polygons.push_back(
        Polygon::rectangle(Vec2(-cfg.canopy_overhang, y0), Vec2(cfg.row_length + cfg.canopy_overhang, y_last)));
    y0 = y_last + cfg.group_spacing;
  }
  const double y_top = y0 - cfg.group_spacing;

  field.bounds_lo = Vec2(-cfg.headland_margin - cfg.bounds_margin, -cfg.bounds_margin);
  field.bounds_hi = Vec2(cfg.row_length + cfg.headland_margin + cfg.bounds_margin, y_top + cfg.bounds_margin);

  field.friction_zones = cfg.friction_zones;
  const GrassConfig& g = cfg.grass;
  for (int end = 0; end < 2 && g.patches_per_headland > 0; ++end) {
    for (int k = 0; k < g.patches_per_headland; ++k) {
      const double w = g.min_size + (g.max_size - g.min_size) * unit(grass_rng);
      const double h = g.min_size + (g.max_size - g.min_size) * unit(grass_rng);
      const double band = cfg.headland_margin + 1.0;
      const double cx = end == 0 ? -band * unit(grass_rng) : cfg.row_length + band * unit(grass_rng);
      const double cy = -1.0 + (y_top + 2.0) * unit(grass_rng);
      const double x_lo = cx - 0.5 * w;
      const double y_lo = cy - 0.5 * h;
      const double mu = g.mu_min + (g.mu_max - g.mu_min) * unit(grass_rng);
      const double nu = g.nu_min + (g.nu_max - g.nu_min) * unit(grass_rng);
      field.friction_zones.push_back(
          FrictionZone{Polygon::rectangle(Vec2(x_lo, y_lo), Vec2(x_lo + w, y_lo + h)), mu, nu});
    }
  }

  field.index = StemIndex(field.rows, field.bounds_lo, field.bounds_hi, 0.25);
  return field;
}

double WaypointPlan::length() const {
  double len = 0.0;
  for (std::size_t i = 1; i < waypoints.size(); ++i) {
    len += (waypoints[i].point - waypoints[i - 1].point).norm();
  }
  return len;
}

WaypointPlan serpentine_plan(const FieldMap& field, const std::vector<int>& lane_indices) {
  if (lane_indices.empty()) throw ConfigError("serpentine_plan: empty lane list");
  WaypointPlan plan;
  for (std::size_t k = 0; k < lane_indices.size(); ++k) {
    const int idx = lane_indices[k];
    if (idx < 0 || idx >= static_cast<int>(field.lanes.size())) {
      throw ConfigError("serpentine_plan: lane index out of range");
    }
    const Lane& lane = field.lanes[static_cast<std::size_t>(idx)];
    const bool forward = (k % 2) == 0;
    const Vec2 a = forward ? lane.start : lane.end;
    const Vec2 b = forward ? lane.end : lane.start;
    const Vec2 dir = (b - a).normalized();
    plan.waypoints.push_back({a - field.headland_margin * dir, WaypointTag::RowEntry, idx});
    plan.waypoints.push_back({b + field.headland_margin * dir, WaypointTag::RowExit, idx});
  }
  return plan;
}

GnssQuality gnss_quality_at(const FieldMap& field, const Vec2& p) {
  Vec2 q = p.cwiseMax(field.bounds_lo).cwiseMin(field.bounds_hi);
  const bool clamped = q != p;
  GnssQuality out = field.config.open_sky;
  out.degraded = false;
  for (const Polygon& poly : field.canopy_polygons) {
    if (poly.contains(q)) {
      out = field.config.canopy;
      out.degraded = true;
      break;
    }
  }
  out.clamped = clamped;
  return out;
}

TractionParams terrain_at(const FieldMap& field, const Vec2& p) {
  for (const FrictionZone& z : field.friction_zones) {
    if (z.area.contains(p)) return TractionParams{z.mu, z.nu, 0.0};
  }
  return TractionParams{1.0, 1.0, 0.0};
}

CollisionReport collision_query(const FieldMap& field, const RobotState& state,
                                const VehicleConfig& cfg) {
  CollisionReport report;
  const Vec2 p = state.position();
  const double c = std::cos(state.theta), s = std::sin(state.theta);
  const double reach = std::hypot(cfg.body_half_length, cfg.body_half_width) + 0.1;
  const Vec2 lo = p - Vec2(reach, reach), hi = p + Vec2(reach, reach);
  field.index.for_each_in_box(lo, hi, [&](const Stem& stem) {
    const Vec2 d = stem.center - p;
    const Vec2 body(c * d.x() + s * d.y(), -s * d.x() + c * d.y());
    const Vec2 nearest(std::clamp(body.x(), -cfg.body_half_length, cfg.body_half_length),
                       std::clamp(body.y(), -cfg.body_half_width, cfg.body_half_width));
    const double dist = (body - nearest).norm();
    if (dist >= stem.radius) return;
    const double depth = stem.radius - dist;
    if (report.hit && depth <= report.depth) return;
    Vec2 n_body;
    if (dist > 1e-12) {
      n_body = (nearest - body) / dist;
    } else {
      n_body = body.norm() > 1e-12 ? Vec2(-body.normalized()) : Vec2(-1.0, 0.0);
    }
    report.hit = true;
    report.depth = depth;
    report.normal = Vec2(c * n_body.x() - s * n_body.y(), s * n_body.x() + c * n_body.y());
    report.contact_point = p + Vec2(c * nearest.x() - s * nearest.y(), s * nearest.x() + c * nearest.y());
  });
  return report;
}

}  // namespace cropnav
