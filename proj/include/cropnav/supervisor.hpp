#pragma once

// Mode arbitration and reference generation. Failure detection has the
// highest priority; in-row and out-row are chosen from the debounced
// classifier otherwise.

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "cropnav/control.hpp"
#include "cropnav/perception.hpp"
#include "cropnav/world.hpp"

namespace cropnav {

enum class Mode { InRow, OutRow, Recovery };

const char* mode_name(Mode m);

struct SupervisorConfig {
  double mu_failure = 0.2;
  double recovery_hysteresis = 0.1;
  double recovery_window = 4.0;      // one MHE window, s
  double recovery_duration = 5.0;    // buffer span replayed, s
  double buffer_span = 15.0;
  double recovery_speed = 0.3;       // reverse feedforward magnitude, m/s
  double fallback_reverse = 0.5;     // straight reverse when the buffer is short, m
  int max_consecutive_recoveries = 3;
  double recovery_counter_reset = 15.0;  // failure-free time that clears the streak, s
  double cruise_speed = 0.6;
  double capture_radius = 0.5;
  double path_spacing = 0.1;
  double waypoint_lookahead = 4.0;
  double lane_lookahead = 3.0;
  double lane_timeout = 1.0;
  double corridor_width = 1.0;
  double corridor_time = 5.0;
  double no_progress_time = 30.0;
  double no_progress_distance = 0.5;

  void validate() const;
};

// True iff mu is strictly below the threshold.
bool detect_failure(const TractionParams& params, const SupervisorConfig& cfg);

Mode update_mode(Mode current, bool in_row, bool failure, bool recovery_done);

// Monotone progress along a waypoint plan.
class WaypointTracker {
 public:
  WaypointTracker(WaypointPlan plan, SupervisorConfig cfg);

  // Consumes waypoints reached by the robot.
  void update(const Vec2& position);

  // Polyline from the projection on the active segment through the
  // remaining waypoints, resampled with tangent headings and cruise speed.
  ReferencePath reference(const RobotState& pose) const;

  std::size_t progress() const { return idx_; }
  bool finished() const { return idx_ >= plan_.size(); }
  const WaypointPlan& plan() const { return plan_; }
  void set_progress(std::size_t idx) { idx_ = std::min(idx, plan_.size()); }

  // Active segment (previous waypoint to next); clamped at the plan ends.
  std::pair<Vec2, Vec2> active_segment() const;
  // Arc length along the plan of the projection onto the active segment.
  double arc_length(const Vec2& position) const;
  // Distance to the plan polyline near the active segment.
  double corridor_distance(const Vec2& position) const;

 private:
  WaypointPlan plan_;
  SupervisorConfig cfg_;
  std::size_t idx_ = 0;
  std::vector<double> cumulative_;
};

ReferencePath waypoint_reference(const WaypointTracker& tracker, const RobotState& pose);

// Robot-frame lane center line, or nothing when the estimate is stale or
// has never been initialized.
std::optional<ReferencePath> lane_reference(const LaneEstimate& est, double now,
                                            const SupervisorConfig& cfg);

struct BufferedState {
  RobotState x;
  double t = 0.0;
};

class RecoveryBuffer {
 public:
  explicit RecoveryBuffer(double span = 15.0) : span_(span) {}

  // Ignores samples that do not advance time.
  void push(const RobotState& x, double t);
  void clear() { samples_.clear(); }
  const std::deque<BufferedState>& samples() const { return samples_; }
  double span() const { return samples_.empty() ? 0.0 : samples_.back().t - samples_.front().t; }

 private:
  double span_;
  std::deque<BufferedState> samples_;
};

// The most recent forward-driven part of the last recovery_duration seconds,
// reversed, with negative feedforward speed. Falls back to a short straight
// reverse from `pose` when the buffer holds too little.
ReferencePath recovery_reference(const RecoveryBuffer& buf, const RobotState& pose,
                                 const SupervisorConfig& cfg);

struct SupervisorInputs {
  double t = 0.0;
  RobotState estimate;
  TractionParams params;
  bool mhe_valid = false;  // params come from a converged solve
  bool in_row = false;
  const LaneEstimate* lane = nullptr;  // predicted to t
  bool perception_enabled = true;
  bool recovery_enabled = true;
  Vec2 truth = Vec2::Zero();  // intervention monitors only
};

struct SupervisorEvent {
  std::string event;
  std::string detail;
};

struct SupervisorOutput {
  Mode mode = Mode::OutRow;
  ReferencePath path;  // world frame
  std::vector<SupervisorEvent> events;
  bool intervention = false;
  bool finished = false;
};

// Sequential decision loop at the control rate.
class Supervisor {
 public:
  Supervisor(WaypointPlan plan, SupervisorConfig cfg);

  SupervisorOutput tick(const SupervisorInputs& in);

  // Clears the recovery and monitor state after an intervention; waypoint
  // progress is kept.
  void reset_after_intervention(double t, bool in_row);

  Mode mode() const { return mode_; }
  int recoveries() const { return recoveries_; }
  int consecutive_recoveries() const { return consecutive_; }
  const WaypointTracker& waypoints() const { return waypoints_; }
  const RecoveryBuffer& buffer() const { return buffer_; }
  const SupervisorConfig& config() const { return cfg_; }

 private:
  bool recovery_done(const SupervisorInputs& in) const;
  void start_recovery(const SupervisorInputs& in, SupervisorOutput& out);

  SupervisorConfig cfg_;
  WaypointTracker waypoints_;
  RecoveryBuffer buffer_;
  Mode mode_ = Mode::OutRow;

  ReferencePath recovery_path_;
  std::size_t recovery_index_ = 0;
  double recovery_start_ = -1e300;
  double mu_ok_since_ = -1.0;  // start of the current restored-mu stretch, < 0 when none
  double last_failure_ = -1e300;
  int recoveries_ = 0;
  int consecutive_ = 0;

  double corridor_since_ = -1.0;
  double progress_mark_s_ = 0.0;
  double progress_mark_t_ = 0.0;
};

}  // namespace cropnav
