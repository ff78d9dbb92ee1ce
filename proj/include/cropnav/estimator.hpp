#pragma once

// Pose and traction estimation cascade.
//
// A moving-horizon estimator fuses GNSS positions, compass headings and the
// commanded inputs over a window of N+1 fixes. The decision variables are the
// state at the start of the window and the parameter vector m = (mu, nu,
// delta_theta); the rest of the trajectory is rolled out through the shared
// model, so the dynamics constraint holds exactly. The cost is
//
//   |x_k - x~_k|^2_Px + |m - m~|^2_Pm + sum_i |y_i - h(x_i, z_i, delta_theta)|^2_Pw
//
// with the heading residual theta_i - (z_theta_i + delta_theta) wrapped.
//
// An EKF over [p_x, p_y, roll, pitch, yaw] runs at the IMU rate and is
// corrected with each MHE output.

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "cropnav/model.hpp"
#include "cropnav/sim.hpp"

namespace cropnav {

struct MheConfig {
  int horizon = 20;
  Mat3 P_x = Vec3(100.0, 100.0, 50.0).asDiagonal();
  Mat3 P_m = Vec3(1.0, 1.0, 2.0).asDiagonal();
  Mat3 P_w = Vec3(400.0, 400.0, 100.0).asDiagonal();
  double solver_tol = 1e-8;
  int max_iters = 50;

  void validate() const;
};

struct TimedInput {
  ControlInput u;
  double duration = 0.0;
};

// Commands applied between two consecutive fixes, piecewise constant.
using IntervalInputs = std::vector<TimedInput>;

struct MheMeasurement {
  double z_x = 0.0;
  double z_y = 0.0;
  double z_theta = 0.0;
  double timestamp = 0.0;
};

struct MheWindow {
  std::vector<MheMeasurement> measurements;  // horizon + 1
  std::vector<IntervalInputs> inputs;         // horizon
  RobotState prior_state;
  TractionParams prior_params;

  int horizon() const { return static_cast<int>(inputs.size()); }
  void validate() const;
};

struct MheSolution {
  std::vector<RobotState> states;
  TractionParams params;
  double cost = 0.0;
  bool converged = false;
  int iterations = 0;
};

struct MheResidual {
  Eigen::VectorXd residual;  // weighted, so cost = residual.squaredNorm()
  double cost = 0.0;
};

// Rolls the window's inputs out from x_k with the given traction.
std::vector<RobotState> mhe_rollout(const MheWindow& window, const RobotState& x_k,
                                    const TractionParams& params);

MheResidual mhe_residual(const MheWindow& window, const std::vector<RobotState>& states,
                         const TractionParams& params, const MheConfig& cfg);

// Decision vector layout: [p_x, p_y, theta, mu, nu, delta_theta].
using MheVector = Eigen::Matrix<double, 6, 1>;

struct MheLinearization {
  Eigen::VectorXd residual;
  Eigen::Matrix<double, Eigen::Dynamic, 6> jacobian;
  double cost = 0.0;
};

MheLinearization mhe_linearize(const MheWindow& window, const MheVector& z, const MheConfig& cfg);

// Gradient of the single-shooting cost with respect to the decision vector.
MheVector mhe_gradient(const MheWindow& window, const MheVector& z, const MheConfig& cfg);

MheSolution mhe_solve(const MheWindow& window, const MheConfig& cfg);

using Vec5 = Eigen::Matrix<double, 5, 1>;
using Mat5 = Eigen::Matrix<double, 5, 5>;

struct EkfConfig {
  // continuous-time process noise densities
  double q_position = 0.02;
  double q_angle = 0.002;
  Vec5 measurement_sigma = (Vec5() << 0.02, 0.02, 0.05, 0.05, 0.02).finished();
};

struct EkfState {
  Vec5 x = Vec5::Zero();  // p_x, p_y, roll, pitch, yaw
  Mat5 covariance = Mat5::Identity() * 0.01;
  Vec2 velocity = Vec2::Zero();  // auxiliary world-frame velocity
  double timestamp = 0.0;
  bool floored = false;  // last correction repaired a non-PSD covariance

  RobotState pose() const { return {x(0), x(1), x(4)}; }
};

EkfState ekf_predict(const EkfState& state, const ImuSample& imu, double dt,
                     const EkfConfig& cfg = {});

// Correction with z = [p_x, p_y, roll, pitch, yaw]. Components with an
// infinite sigma are treated as unmeasured.
EkfState ekf_correct(const EkfState& state, const RobotState& pose, const Vec2& inclination,
                     const EkfConfig& cfg = {});

// Roll and pitch implied by the specific force when the body is not
// accelerating.
Vec2 inclination_from_accel(const ImuSample& imu);

// Owns both filters; inputs are applied in timestamp order.
class StateEstimator {
 public:
  StateEstimator(MheConfig mhe, EkfConfig ekf);

  void reset(const RobotState& pose, const TractionParams& params, double t);

  void on_command(const ControlInput& u, double t);
  void on_imu(const ImuSample& imu);
  // Returns true when an MHE solve ran on this fix.
  bool on_gnss(const GnssFix& fix);

  RobotState estimate() const { return ekf_.pose(); }
  const EkfState& ekf() const { return ekf_; }
  const TractionParams& params() const { return params_; }
  const std::optional<MheSolution>& last_solution() const { return last_; }
  bool window_full() const { return static_cast<int>(measurements_.size()) == mhe_.horizon + 1; }
  int dropped_corrections() const { return dropped_; }
  int solves() const { return solves_; }

  // Applies an externally produced correction; dropped if older than the
  // last applied one.
  bool apply_correction(const RobotState& pose, double t);

 private:
  void close_interval(double t);

  MheConfig mhe_;
  EkfConfig ekf_cfg_;
  EkfState ekf_;
  TractionParams params_;
  RobotState prior_state_;
  std::optional<MheSolution> last_;

  std::vector<MheMeasurement> measurements_;
  std::vector<IntervalInputs> inputs_;
  IntervalInputs pending_;
  ControlInput command_;
  double command_time_ = 0.0;

  std::optional<ImuSample> last_imu_;
  Vec2 inclination_ = Vec2::Zero();
  double last_correction_ = -1e300;
  int dropped_ = 0;
  int solves_ = 0;
};

}  // namespace cropnav
