#include "cropnav/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cropnav {

SimState sim_step(const SimState& s, const WheelCommand& w, const FieldMap& field,
                  const VehicleConfig& cfg, double dt, const SimConfig& sim_cfg) {
  if (!(dt > 0.0)) throw DomainError("sim_step: dt must be positive");
  const ControlInput body = inverse_wheel(w, cfg);
  TractionParams traction = terrain_at(field, s.truth.position());

  SimState next = s;
  next.clock = s.clock + dt;
  if (s.stuck) {
    // velocity of the contact point under the commanded body motion
    const Vec2 heading(std::cos(s.truth.theta), std::sin(s.truth.theta));
    const Vec2 r = s.contact.contact_point - s.truth.position();
    const Vec2 vc = body.v * heading + body.omega * Vec2(-r.y(), r.x());
    if (vc.dot(s.contact.normal) > 0.0) {
      next.stuck = false;
    } else {
      traction.mu = 0.0;
      traction.nu *= sim_cfg.stuck_yaw_factor;
    }
  }

  const RobotState proposed = step(s.truth, body, traction, dt);
  const CollisionReport hit = collision_query(field, proposed, cfg);
  if (hit.hit) {
    // hold the last contact-free pose
    next.stuck = true;
    next.contact = hit;
    next.velocity = Vec2::Zero();
    return next;
  }
  const Vec2 delta = proposed.position() - s.truth.position();
  next.truth = proposed;
  next.velocity = delta / dt;
  next.path_length = s.path_length + delta.norm();
  return next;
}

GnssFix GnssChannel::sample(const SimState& s, const FieldMap& field, double dt) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const GnssQuality q = gnss_quality_at(field, s.truth.position());

  // fixed number of draws per fix keeps the stream aligned across profiles
  const double b1 = gauss(rng_), b2 = gauss(rng_);
  const double n1 = gauss(rng_), n2 = gauss(rng_);
  const double drop = unit(rng_);

  if (dt > 0.0) {
    const double a = std::exp(-dt / q.bias_tau);
    const double scale = q.bias_sigma * std::sqrt(std::max(0.0, 1.0 - a * a));
    bias_ = q.bias_mean + a * (bias_ - q.bias_mean) + scale * Vec2(b1, b2);
  } else if (q.bias_sigma == 0.0) {
    bias_ = q.bias_mean;
  }

  GnssFix fix;
  fix.timestamp = s.clock;
  fix.z_x = s.truth.p_x + bias_.x() + q.sigma * n1;
  fix.z_y = s.truth.p_y + bias_.y() + q.sigma * n2;
  fix.valid = drop >= q.dropout_prob;
  return fix;
}

ImuSample sample_imu(const SimState& s, const SimState& prev, double true_delta_theta,
                     const ImuNoise& noise, RandomStream& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  ImuSample out;
  out.timestamp = s.clock;
  const double dt = s.clock - prev.clock;
  double wz = 0.0;
  Vec2 acc_world = Vec2::Zero();
  if (dt > 0.0) {
    wz = wrap_angle(s.truth.theta - prev.truth.theta) / dt;
    acc_world = (s.velocity - prev.velocity) / dt;
  }
  const double c = std::cos(s.truth.theta), sn = std::sin(s.truth.theta);
  const Vec2 acc_body(c * acc_world.x() + sn * acc_world.y(), -sn * acc_world.x() + c * acc_world.y());

  out.omega_x = noise.gyro_sigma * gauss(rng);
  out.omega_y = noise.gyro_sigma * gauss(rng);
  out.omega_z = wz + noise.gyro_sigma * gauss(rng);
  out.a_x = acc_body.x() + noise.accel_sigma * gauss(rng);
  out.a_y = acc_body.y() + noise.accel_sigma * gauss(rng);
  out.a_z = kGravity + noise.accel_sigma * gauss(rng);
  out.z_theta = wrap_angle(s.truth.theta - true_delta_theta + noise.compass_sigma * gauss(rng));
  return out;
}

namespace {

// Smallest t >= 0 where origin + t dir enters the disc, or +inf.
double ray_disc(const Vec2& origin, const Vec2& dir, const Stem& stem) {
  const Vec2 oc = origin - stem.center;
  const double b = oc.dot(dir);
  const double c = oc.squaredNorm() - stem.radius * stem.radius;
  if (c <= 0.0) return 0.0;  // origin inside the disc
  const double disc = b * b - c;
  if (disc < 0.0) return std::numeric_limits<double>::infinity();
  const double t = -b - std::sqrt(disc);
  return t >= 0.0 ? t : std::numeric_limits<double>::infinity();
}

}  // namespace

double cast_ray(const FieldMap& field, const Vec2& origin, const Vec2& dir, double max_range) {
  const StemIndex& idx = field.index;
  const double cell = idx.cell_size();
  const Vec2 rel = (origin - idx.origin()) / cell;
  int i = static_cast<int>(std::floor(rel.x()));
  int j = static_cast<int>(std::floor(rel.y()));
  const int step_i = dir.x() > 0 ? 1 : -1;
  const int step_j = dir.y() > 0 ? 1 : -1;
  const double inf = std::numeric_limits<double>::infinity();
  const double t_delta_x = dir.x() != 0.0 ? cell / std::abs(dir.x()) : inf;
  const double t_delta_y = dir.y() != 0.0 ? cell / std::abs(dir.y()) : inf;
  double t_max_x = dir.x() != 0.0 ? ((dir.x() > 0 ? (i + 1 - rel.x()) : (rel.x() - i)) * cell) / std::abs(dir.x()) : inf;
  double t_max_y = dir.y() != 0.0 ? ((dir.y() > 0 ? (j + 1 - rel.y()) : (rel.y() - j)) * cell) / std::abs(dir.y()) : inf;

  double best = inf;
  double t_entry = 0.0;
  while (t_entry <= max_range && t_entry < best) {
    if (i >= 0 && j >= 0 && i < idx.nx() && j < idx.ny()) {
      for (int k : idx.cell(i, j)) best = std::min(best, ray_disc(origin, dir, idx.stem(k)));
      // a hit inside this cell cannot be beaten by later cells
      if (best <= std::min(t_max_x, t_max_y)) break;
    } else if ((i < 0 && step_i < 0) || (j < 0 && step_j < 0) || (i >= idx.nx() && step_i > 0) ||
               (j >= idx.ny() && step_j > 0)) {
      break;  // leaving the grid
    }
    if (t_max_x < t_max_y) {
      t_entry = t_max_x;
      t_max_x += t_delta_x;
      i += step_i;
    } else {
      t_entry = t_max_y;
      t_max_y += t_delta_y;
      j += step_j;
    }
  }
  return best <= max_range ? best : -1.0;
}

PointCloud2D sample_lidar(const SimState& s, const FieldMap& field, const LidarConfig& cfg,
                          RandomStream& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointCloud2D cloud;
  cloud.timestamp = s.clock;
  cloud.points.reserve(static_cast<std::size_t>(cfg.beams));
  const Vec2 origin = s.truth.position();
  const bool under_canopy = gnss_quality_at(field, origin).degraded;
  const double resolution = cfg.fov / cfg.beams;
  for (int b = 0; b < cfg.beams; ++b) {
    const double bearing = -0.5 * cfg.fov + b * resolution;
    const double world = s.truth.theta + bearing;
    const Vec2 dir(std::cos(world), std::sin(world));
    double range = cast_ray(field, origin, dir, cfg.max_range);
    const double noise = gauss(rng);
    const double u_out = unit(rng);
    const double u_range = unit(rng);
    if (under_canopy && u_out < cfg.outlier_rate) {
      const double limit = range > 0.0 ? std::min(range, cfg.outlier_max_range) : cfg.outlier_max_range;
      range = 0.1 + (limit - 0.1) * u_range;
    } else if (range >= 0.0) {
      range = std::clamp(range + cfg.range_sigma * noise, 1e-3, cfg.max_range);
    }
    if (range < 0.0) continue;
    cloud.points.emplace_back(range * std::cos(bearing), range * std::sin(bearing));
  }
  return cloud;
}

}  // namespace cropnav
