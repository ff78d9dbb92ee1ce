#pragma once

// Finite-horizon tracking MPC over the shared model. Decision variables are
// the wheel speeds of each step, so the actuator box is a plain box:
//
//   min  sum_{i<N} |x_i - x_i^r|^2_Q + |u_i - u_i^r|^2_R + |x_N - x_N^r|^2_QN
//   s.t. |v_left|, |v_right| <= v_max
//
// The body input of a step is u = (mu (v_left + v_right) / 2, (v_right - v_left) / L),
// the inverse of the traction-compensated wheel map. Because that map already
// divides by mu, predictions use unit linear traction and the estimated nu.

#include <optional>
#include <vector>

#include "cropnav/model.hpp"

namespace cropnav {

enum class Frame { World, Robot };

struct ReferencePoint {
  RobotState x;
  ControlInput u;  // feedforward
};

struct ReferencePath {
  std::vector<ReferencePoint> points;
  Frame frame = Frame::World;
  bool hold = false;  // terminal hold reference

  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }
  // Maps a robot-frame path into the world through the given pose.
  ReferencePath to_world(const RobotState& pose) const;
};

struct MpcConfig {
  int horizon = 10;
  double dt = 0.1;
  Mat3 Q = Vec3(10.0, 10.0, 1.0).asDiagonal();
  Eigen::Matrix2d R = Eigen::Vector2d(0.1, 0.05).asDiagonal();
  Mat3 Q_N = 5.0 * Vec3(10.0, 10.0, 1.0).asDiagonal();
  double v_max = 1.5;
  double track_width = 0.25;
  double solver_tol = 1e-9;
  int max_iters = 60;
  // arc length from the path start searched for the nearest point
  double projection_window = 1.5;

  void validate() const;
};

struct MpcSolution {
  std::vector<ControlInput> inputs;
  std::vector<WheelCommand> wheels;
  std::vector<RobotState> states;  // N + 1, starting at x0
  double cost = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Time-indexed reference of N+1 states sampled from a world-frame path:
// nearest-point projection of x0, then one sample every |v^r| dt of arc.
ReferencePath sample_reference(const ReferencePath& path, const RobotState& x0,
                               const MpcConfig& cfg);

// Body input realized by a wheel pair under traction compensation mu.
ControlInput wheel_to_input(const WheelCommand& w, double mu, const MpcConfig& cfg);

std::vector<RobotState> mpc_rollout(const RobotState& x0, const std::vector<ControlInput>& inputs,
                                    const TractionParams& params, const MpcConfig& cfg);

// ref is time indexed; it is padded by holding its last state.
double mpc_cost(const RobotState& x0, const std::vector<ControlInput>& inputs,
                const ReferencePath& ref, const TractionParams& params, const MpcConfig& cfg);

// Gradient of mpc_cost with respect to the stacked (v_i, omega_i).
Eigen::VectorXd mpc_cost_gradient(const RobotState& x0, const std::vector<ControlInput>& inputs,
                                  const ReferencePath& ref, const TractionParams& params,
                                  const MpcConfig& cfg);

MpcSolution mpc_solve(const RobotState& x0, const ReferencePath& ref, const TractionParams& params,
                      const MpcConfig& cfg, const std::optional<MpcSolution>& warm_start = std::nullopt);

// Receding-horizon wrapper: samples the path, solves, maps to wheels and
// applies the hold-then-stop fallback on solver failure.
class Tracker {
 public:
  Tracker(MpcConfig cfg, VehicleConfig vehicle);

  WheelCommand tick(const RobotState& estimate, const ReferencePath& path,
                    const TractionParams& params);

  void reset();
  const std::optional<MpcSolution>& last_solution() const { return warm_; }
  int consecutive_failures() const { return failures_; }
  bool alert() const { return failures_ > kMaxHold; }
  const MpcConfig& config() const { return cfg_; }

  static constexpr int kMaxHold = 3;

 private:
  MpcConfig cfg_;
  VehicleConfig vehicle_;
  std::optional<MpcSolution> warm_;
  WheelCommand last_;
  int failures_ = 0;
};

}  // namespace cropnav
