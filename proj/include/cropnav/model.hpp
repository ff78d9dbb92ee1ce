#pragma once

// Kinodynamic skid-steer model shared by the simulator, the estimators and
// the controller.
//
//   d/dt [p_x, p_y, theta] = [mu v cos(theta), mu v sin(theta), nu omega]
//
// mu and nu are control-channel traction gains: 1 means the commanded motion
// is realized, 0 means the vehicle is stuck.

#include <cmath>

#include <Eigen/Core>
#include <unsupported/Eigen/AutoDiff>

#include "cropnav/common.hpp"

namespace cropnav {

struct RobotState {
  double p_x = 0.0;
  double p_y = 0.0;
  double theta = 0.0;

  Vec2 position() const { return {p_x, p_y}; }
  Vec3 vec() const { return {p_x, p_y, theta}; }
  static RobotState from(const Vec3& v) { return {v.x(), v.y(), wrap_angle(v.z())}; }
};

struct ControlInput {
  double v = 0.0;      // forward speed, m/s
  double omega = 0.0;  // yaw rate, rad/s

  Eigen::Vector2d vec() const { return {v, omega}; }
};

struct TractionParams {
  double mu = 1.0;
  double nu = 1.0;
  double delta_theta = 0.0;

  Vec3 vec() const { return {mu, nu, delta_theta}; }
  // Projects onto mu, nu in [0, 1] and wraps delta_theta.
  TractionParams clamped() const;
};

struct WheelCommand {
  double v_left = 0.0;
  double v_right = 0.0;
};

struct VehicleConfig {
  double track_width = 0.25;
  double v_max = 1.5;
  double body_half_width = 0.15;
  double body_half_length = 0.25;

  void validate() const;
};

/// Floor applied to mu before dividing by it in the wheel map.
inline constexpr double kMuFloor = 0.05;

/// Longest single RK4 substep; longer steps are subdivided.
inline constexpr double kMaxSubstep = 0.1;

template <typename Scalar>
using State3 = Eigen::Matrix<Scalar, 3, 1>;

/// Time derivative of the planar state. Templated on the scalar so the same
/// expression is differentiated with Eigen::AutoDiffScalar.
template <typename Scalar>
State3<Scalar> derivative(const State3<Scalar>& x, const Scalar& v, const Scalar& omega,
                          const Scalar& mu, const Scalar& nu) {
  using std::cos;
  using std::sin;
  State3<Scalar> dx;
  dx << mu * v * cos(x(2)), mu * v * sin(x(2)), nu * omega;
  return dx;
}

/// One classical RK4 step. Heading is left unwrapped; callers wrap.
template <typename Scalar>
State3<Scalar> rk4(const State3<Scalar>& x, const Scalar& v, const Scalar& omega,
                   const Scalar& mu, const Scalar& nu, double dt) {
  const State3<Scalar> k1 = derivative<Scalar>(x, v, omega, mu, nu);
  const State3<Scalar> k2 = derivative<Scalar>(x + (0.5 * dt) * k1, v, omega, mu, nu);
  const State3<Scalar> k3 = derivative<Scalar>(x + (0.5 * dt) * k2, v, omega, mu, nu);
  const State3<Scalar> k4 = derivative<Scalar>(x + dt * k3, v, omega, mu, nu);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Vec3 derivative(const RobotState& state, const ControlInput& u, const TractionParams& params);

/// RK4 integration over dt in equal substeps of at most kMaxSubstep.
RobotState step(const RobotState& state, const ControlInput& u, const TractionParams& params,
                double dt);

/// Same integration as step on a raw vector; heading is left unwrapped.
Vec3 integrate(const Vec3& state, const ControlInput& u, double mu, double nu, double dt);

/// Step together with its Jacobians. Heading of `next` is unwrapped.
struct StepJacobian {
  Vec3 next;
  Mat3 d_state;                          // d next / d state
  Eigen::Matrix<double, 3, 2> d_input;   // d next / d (v, omega)
  Eigen::Matrix<double, 3, 2> d_traction;  // d next / d (mu, nu)
};

StepJacobian step_jacobian(const Vec3& state, const ControlInput& u, double mu, double nu,
                           double dt);

struct WheelMapping {
  WheelCommand wheels;
  bool mu_clamped = false;
};

WheelMapping wheel_commands(const ControlInput& u, double mu, const VehicleConfig& cfg);

ControlInput inverse_wheel(const WheelCommand& w, const VehicleConfig& cfg);

}  // namespace cropnav
