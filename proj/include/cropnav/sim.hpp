#pragma once

// Closed-loop plant: truth propagation with terrain traction and stem
// collisions, plus GNSS, IMU and 2-D LiDAR synthesis.

#include <vector>

#include "cropnav/model.hpp"
#include "cropnav/rng.hpp"
#include "cropnav/world.hpp"

namespace cropnav {

struct SimConfig {
  // Yaw traction multiplier while in contact with a stem.
  double stuck_yaw_factor = 0.3;
};

struct SimState {
  RobotState truth;
  Vec2 velocity = Vec2::Zero();  // world-frame truth velocity over the last step
  bool stuck = false;
  CollisionReport contact;  // last contact that caused `stuck`
  double clock = 0.0;
  double path_length = 0.0;  // integrated truth distance
};

SimState sim_step(const SimState& s, const WheelCommand& w, const FieldMap& field,
                  const VehicleConfig& cfg, double dt, const SimConfig& sim_cfg = {});

struct GnssFix {
  double z_x = 0.0;
  double z_y = 0.0;
  bool valid = false;
  double timestamp = 0.0;
};

// Owns the slowly varying multipath bias and the GNSS noise stream.
class GnssChannel {
 public:
  explicit GnssChannel(RandomStream rng) : rng_(std::move(rng)) {}

  // Advances the bias process by dt under the local profile and draws a fix.
  GnssFix sample(const SimState& s, const FieldMap& field, double dt);

  const Vec2& bias() const { return bias_; }

 private:
  RandomStream rng_;
  Vec2 bias_ = Vec2::Zero();
};

inline GnssFix sample_gnss(const SimState& s, const FieldMap& field, GnssChannel& channel,
                           double dt) {
  return channel.sample(s, field, dt);
}

struct ImuSample {
  double omega_x = 0.0, omega_y = 0.0, omega_z = 0.0;
  double a_x = 0.0, a_y = 0.0, a_z = 0.0;  // specific force, body frame
  double z_theta = 0.0;                    // compass heading
  double timestamp = 0.0;
};

struct ImuNoise {
  double gyro_sigma = 0.005;
  double accel_sigma = 0.05;
  double compass_sigma = 0.02;
};

inline constexpr double kGravity = 9.80665;

ImuSample sample_imu(const SimState& s, const SimState& prev, double true_delta_theta,
                     const ImuNoise& noise, RandomStream& rng);

struct LidarConfig {
  int beams = 540;
  double fov = 1.5 * kPi;  // 270 deg, centred on the forward axis
  double max_range = 10.0;
  double range_sigma = 0.01;
  double outlier_rate = 0.0;   // per-beam spurious return probability under canopy
  double outlier_max_range = 1.5;
};

struct PointCloud2D {
  std::vector<Vec2> points;  // sensor frame: x forward, y left
  double timestamp = 0.0;
};

PointCloud2D sample_lidar(const SimState& s, const FieldMap& field, const LidarConfig& cfg,
                          RandomStream& rng);

// Nearest ray/stem intersection distance along a world-frame ray, or a
// negative value for a miss.
double cast_ray(const FieldMap& field, const Vec2& origin, const Vec2& dir, double max_range);

}  // namespace cropnav
