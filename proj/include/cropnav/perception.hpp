#pragma once

// Crop-row perception from a 2-D scan: per-side line fits with validity
// gating, a lane-relative Kalman filter over [d_lane, phi] and the in-row
// classifier.
//
// Conventions: d_lane > 0 when the robot sits left of the lane center line;
// phi is the robot heading relative to the lane direction, positive CCW.

#include <optional>

#include "cropnav/model.hpp"
#include "cropnav/sim.hpp"

namespace cropnav {

struct LaneEstimate {
  double d_lane = 0.0;
  double phi = 0.0;
  Mat2 covariance = Vec2(0.04, 0.01).asDiagonal();
  bool left_valid = false;
  bool right_valid = false;
  double timestamp = 0.0;
  bool initialized = false;  // at least one measurement has been fused
  double last_update = -1e300;
};

// y = slope x + intercept in the frame rotated by the previous phi.
struct RowFit {
  double slope = 0.0;
  double intercept = 0.0;
  int point_count = 0;
  double span_length = 0.0;
  double rms_residual = 0.0;

  double angle() const { return std::atan(slope); }
};

struct PerceptionConfig {
  double lane_width_nominal = 0.76;
  int n_inrow = 50;
  double box_half_width = 0.1;
  double histogram_bin = 0.05;
  int min_points = 8;
  double min_span = 0.5;
  double max_angle_jump = deg2rad(15.0);
  double max_distance_jump = 0.15;
  double lane_width_tolerance = 0.2;  // fraction of the nominal width
  double fit_back = 2.0;              // along-row extent used for fitting, m
  double fit_forward = 4.0;
  double roi_forward = 1.0;           // classifier window ahead of the sensor, m
  int debounce = 3;
  double sigma_d = 0.02;              // measurement noise, both sides valid
  double sigma_phi = deg2rad(1.5);
  double single_side_inflation = 4.0;
  double q_d = 0.002;                 // process noise densities
  double q_phi = 0.002;
  double cold_start_range = deg2rad(20.0);  // heading sweep when no lane estimate exists
  double cold_start_step = deg2rad(2.5);

  void validate() const;
};

struct LaneMeasurement {
  double d_lane = 0.0;
  double phi = 0.0;
  bool single_side = false;
};

struct RowDetection {
  std::optional<RowFit> left;
  std::optional<RowFit> right;
  std::optional<LaneMeasurement> measurement;
};

RowDetection detect_rows(const PointCloud2D& cloud, const LaneEstimate& prev,
                         const PerceptionConfig& cfg);

LaneEstimate lane_predict(const LaneEstimate& est, const ControlInput& u,
                          const TractionParams& params, double dt,
                          const PerceptionConfig& cfg = {});

LaneEstimate lane_update(const LaneEstimate& est, const LaneMeasurement& meas,
                         const Mat2& meas_noise);

// Measurement noise for a detection: the single-side case is inflated.
Mat2 lane_measurement_noise(const LaneMeasurement& meas, const PerceptionConfig& cfg);

// Number of returns in the classifier window.
int count_in_roi(const PointCloud2D& cloud, const PerceptionConfig& cfg);

bool classify_in_row(const PointCloud2D& cloud, const PerceptionConfig& cfg);

// Reports a flip only after k consecutive agreeing raw decisions.
class Debouncer {
 public:
  explicit Debouncer(int k = 3, bool initial = false) : k_(k), state_(initial) {}

  bool update(bool raw);
  bool state() const { return state_; }
  int flips() const { return flips_; }
  void reset(bool state) {
    state_ = state;
    streak_ = 0;
  }

 private:
  int k_;
  bool state_;
  int streak_ = 0;
  int flips_ = 0;
};

// Lane filter plus classifier, advanced scan by scan.
class LaneTracker {
 public:
  explicit LaneTracker(PerceptionConfig cfg);

  // Drops the lane estimate; the next valid detection re-initializes it.
  void reset_lane();
  void reset(bool in_row);

  // Predicts to the scan time with the given input, then fuses the scan.
  const RowDetection& on_scan(const PointCloud2D& cloud, const ControlInput& u,
                              const TractionParams& params);

  const LaneEstimate& estimate() const { return est_; }
  bool in_row() const { return debounce_.state(); }
  bool raw_in_row() const { return raw_; }
  int flips() const { return debounce_.flips(); }
  int roi_count() const { return roi_count_; }
  const RowDetection& last_detection() const { return last_; }
  const PerceptionConfig& config() const { return cfg_; }

 private:
  RowDetection cold_start(const PointCloud2D& cloud) const;

  PerceptionConfig cfg_;
  LaneEstimate est_;
  Debouncer debounce_;
  RowDetection last_;
  bool raw_ = false;
  int roi_count_ = 0;
};

}  // namespace cropnav
