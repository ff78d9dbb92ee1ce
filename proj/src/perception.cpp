#include "cropnav/perception.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/LU>

namespace cropnav {

void PerceptionConfig::validate() const {
  const bool positive = lane_width_nominal > 0.0 && n_inrow > 0 && box_half_width > 0.0 &&
                        histogram_bin > 0.0 && min_points > 0 && min_span > 0.0 &&
                        max_angle_jump > 0.0 && max_distance_jump > 0.0 &&
                        lane_width_tolerance > 0.0 && fit_back >= 0.0 && fit_forward > 0.0 &&
                        roi_forward > 0.0 && debounce > 0 && sigma_d > 0.0 && sigma_phi > 0.0 &&
                        single_side_inflation >= 1.0 && cold_start_range >= 0.0 &&
                        cold_start_step > 0.0 && q_d >= 0.0 && q_phi >= 0.0;
  if (!positive) throw ConfigError("perception: thresholds must be positive");
}

namespace {

std::optional<RowFit> fit_line(const std::vector<Vec2>& pts) {
  if (pts.size() < 2) return std::nullopt;
  const double n = static_cast<double>(pts.size());
  Vec2 mean = Vec2::Zero();
  double x_lo = pts.front().x(), x_hi = pts.front().x();
  for (const Vec2& p : pts) {
    mean += p;
    x_lo = std::min(x_lo, p.x());
    x_hi = std::max(x_hi, p.x());
  }
  mean /= n;
  double sxx = 0.0, sxy = 0.0;
  for (const Vec2& p : pts) {
    const Vec2 d = p - mean;
    sxx += d.x() * d.x();
    sxy += d.x() * d.y();
  }
  if (sxx <= 1e-12) return std::nullopt;
  RowFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = mean.y() - fit.slope * mean.x();
  fit.point_count = static_cast<int>(pts.size());
  fit.span_length = x_hi - x_lo;
  double ss = 0.0;
  for (const Vec2& p : pts) {
    const double r = p.y() - (fit.slope * p.x() + fit.intercept);
    ss += r * r;
  }
  fit.rms_residual = std::sqrt(ss / n);
  return fit;
}

// Lateral offset implied by one row line: signed distance from the lane
// center, positive when the robot is left of it.
double offset_from_left(const RowFit& f, double w) { return 0.5 * w - f.intercept * std::cos(f.angle()); }
double offset_from_right(const RowFit& f, double w) { return -(f.intercept * std::cos(f.angle()) + 0.5 * w); }

}  // namespace

RowDetection detect_rows(const PointCloud2D& cloud, const LaneEstimate& prev,
                         const PerceptionConfig& cfg) {
  RowDetection out;
  if (cloud.points.empty()) return out;

  const double w = cfg.lane_width_nominal;
  const double c = std::cos(prev.phi), s = std::sin(prev.phi);
  const double center = -prev.d_lane;

  // rows become parallel to x once rotated by the current heading estimate
  std::vector<Vec2> pts;
  pts.reserve(cloud.points.size());
  for (const Vec2& p : cloud.points) {
    const Vec2 q(c * p.x() - s * p.y(), s * p.x() + c * p.y());
    if (q.x() < -cfg.fit_back || q.x() > cfg.fit_forward) continue;
    if (std::abs(q.y() - center) > w) continue;
    pts.push_back(q);
  }

  const int bins = std::max(2, static_cast<int>(std::ceil(2.0 * w / cfg.histogram_bin)));
  const double bin = 2.0 * w / bins;
  std::vector<int> hist(static_cast<std::size_t>(bins), 0);
  for (const Vec2& q : pts) {
    const int b = std::clamp(static_cast<int>(std::floor((q.y() - (center - w)) / bin)), 0, bins - 1);
    ++hist[static_cast<std::size_t>(b)];
  }
  auto bin_center = [&](int b) { return center - w + (b + 0.5) * bin; };
  auto peak = [&](bool left) -> std::optional<double> {
    const double expected = center + (left ? 0.5 * w : -0.5 * w);
    int best = -1;
    for (int b = 0; b < bins; ++b) {
      const double y = bin_center(b);
      if (left ? y <= center : y >= center) continue;
      const int n = hist[static_cast<std::size_t>(b)];
      if (n == 0) continue;
      if (best < 0 || n > hist[static_cast<std::size_t>(best)] ||
          (n == hist[static_cast<std::size_t>(best)] &&
           std::abs(y - expected) < std::abs(bin_center(best) - expected))) {
        best = b;
      }
    }
    if (best < 0) return std::nullopt;
    return bin_center(best);
  };

  auto side_fit = [&](bool left) -> std::optional<RowFit> {
    const std::optional<double> py = peak(left);
    if (!py) return std::nullopt;
    std::vector<Vec2> box;
    for (const Vec2& q : pts) {
      if (std::abs(q.y() - *py) <= cfg.box_half_width) box.push_back(q);
    }
    std::optional<RowFit> fit = fit_line(box);
    if (!fit) return std::nullopt;
    if (fit->point_count < cfg.min_points || fit->span_length < cfg.min_span) return std::nullopt;
    if (prev.initialized) {
      const double d = left ? offset_from_left(*fit, w) : offset_from_right(*fit, w);
      if (std::abs(fit->angle()) > cfg.max_angle_jump) return std::nullopt;
      if (std::abs(d - prev.d_lane) > cfg.max_distance_jump) return std::nullopt;
    }
    return fit;
  };

  out.left = side_fit(true);
  out.right = side_fit(false);

  if (out.left && out.right) {
    const double gamma = 0.5 * (out.left->angle() + out.right->angle());
    const double width = (out.left->intercept - out.right->intercept) * std::cos(gamma);
    if (std::abs(width - w) > cfg.lane_width_tolerance * w) {
      const double jump_l = std::abs(offset_from_left(*out.left, w) - prev.d_lane);
      const double jump_r = std::abs(offset_from_right(*out.right, w) - prev.d_lane);
      if (jump_l > jump_r) {
        out.left.reset();
      } else {
        out.right.reset();
      }
    }
  }

  if (out.left && out.right) {
    const double gamma = 0.5 * (out.left->angle() + out.right->angle());
    const double mid = 0.5 * (out.left->intercept + out.right->intercept);
    out.measurement = LaneMeasurement{-mid * std::cos(gamma), wrap_angle(prev.phi - gamma), false};
  } else if (out.left) {
    out.measurement = LaneMeasurement{offset_from_left(*out.left, w),
                                      wrap_angle(prev.phi - out.left->angle()), true};
  } else if (out.right) {
    out.measurement = LaneMeasurement{offset_from_right(*out.right, w),
                                      wrap_angle(prev.phi - out.right->angle()), true};
  }
  return out;
}

LaneEstimate lane_predict(const LaneEstimate& est, const ControlInput& u,
                          const TractionParams& params, double dt, const PerceptionConfig& cfg) {
  if (!(dt > 0.0)) throw DomainError("lane_predict: dt must be positive");
  LaneEstimate out = est;
  const double speed = params.mu * u.v;
  out.d_lane = est.d_lane + speed * std::sin(est.phi) * dt;
  out.phi = wrap_angle(est.phi + params.nu * u.omega * dt);
  Mat2 f = Mat2::Identity();
  f(0, 1) = speed * std::cos(est.phi) * dt;
  out.covariance = f * est.covariance * f.transpose();
  out.covariance.diagonal() += Vec2(cfg.q_d, cfg.q_phi) * dt;
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  out.timestamp = est.timestamp + dt;
  return out;
}

LaneEstimate lane_update(const LaneEstimate& est, const LaneMeasurement& meas,
                         const Mat2& meas_noise) {
  LaneEstimate out = est;
  const Vec2 innovation(meas.d_lane - est.d_lane, wrap_angle(meas.phi - est.phi));
  const Mat2 s = est.covariance + meas_noise;
  const Mat2 k = est.covariance * s.inverse();
  const Vec2 x = Vec2(est.d_lane, est.phi) + k * innovation;
  out.d_lane = x(0);
  out.phi = wrap_angle(x(1));
  const Mat2 i_k = Mat2::Identity() - k;
  out.covariance = i_k * est.covariance * i_k.transpose() + k * meas_noise * k.transpose();
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  out.initialized = true;
  out.last_update = est.timestamp;
  return out;
}

Mat2 lane_measurement_noise(const LaneMeasurement& meas, const PerceptionConfig& cfg) {
  Mat2 r = Vec2(cfg.sigma_d * cfg.sigma_d, cfg.sigma_phi * cfg.sigma_phi).asDiagonal();
  if (meas.single_side) r *= cfg.single_side_inflation;
  return r;
}

int count_in_roi(const PointCloud2D& cloud, const PerceptionConfig& cfg) {
  int n = 0;
  for (const Vec2& p : cloud.points) {
    if (p.x() >= 0.0 && p.x() <= cfg.roi_forward && std::abs(p.y()) <= cfg.lane_width_nominal) ++n;
  }
  return n;
}

bool classify_in_row(const PointCloud2D& cloud, const PerceptionConfig& cfg) {
  return count_in_roi(cloud, cfg) >= cfg.n_inrow;
}

bool Debouncer::update(bool raw) {
  if (raw == state_) {
    streak_ = 0;
    return state_;
  }
  if (++streak_ >= k_) {
    state_ = raw;
    streak_ = 0;
    ++flips_;
  }
  return state_;
}

LaneTracker::LaneTracker(PerceptionConfig cfg) : cfg_(std::move(cfg)), debounce_(cfg_.debounce) {
  cfg_.validate();
}

void LaneTracker::reset_lane() {
  const double t = est_.timestamp;
  est_ = LaneEstimate{};
  est_.timestamp = t;
}

void LaneTracker::reset(bool in_row) {
  reset_lane();
  debounce_.reset(in_row);
  raw_ = in_row;
}

RowDetection LaneTracker::cold_start(const PointCloud2D& cloud) const {
  // coarse heading sweep; the aligned hypothesis packs the most points into the row boxes
  LaneEstimate seed = est_;
  RowDetection best;
  int best_score = -1;
  const int steps = static_cast<int>(std::floor(cfg_.cold_start_range / cfg_.cold_start_step));
  for (int i = -steps; i <= steps; ++i) {
    seed.d_lane = 0.0;
    seed.phi = i * cfg_.cold_start_step;
    RowDetection r = detect_rows(cloud, seed, cfg_);
    if (!r.measurement) continue;
    const int score = (r.left ? r.left->point_count : 0) + (r.right ? r.right->point_count : 0);
    if (score > best_score) {
      best_score = score;
      best = std::move(r);
    }
  }
  if (!best.measurement) return best;
  seed.d_lane = best.measurement->d_lane;
  seed.phi = best.measurement->phi;
  RowDetection refined = detect_rows(cloud, seed, cfg_);
  return refined.measurement ? refined : best;
}

const RowDetection& LaneTracker::on_scan(const PointCloud2D& cloud, const ControlInput& u,
                                         const TractionParams& params) {
  roi_count_ = count_in_roi(cloud, cfg_);
  raw_ = roi_count_ >= cfg_.n_inrow;
  debounce_.update(raw_);

  const double dt = cloud.timestamp - est_.timestamp;
  if (dt > 0.0) {
    if (est_.initialized) {
      est_ = lane_predict(est_, u, params, dt, cfg_);
    } else {
      est_.timestamp = cloud.timestamp;
    }
  }
  if (!debounce_.state()) {
    // outside a row the lane frame is meaningless; re-acquire on entry
    reset_lane();
    last_ = RowDetection{};
    return last_;
  }

  if (est_.initialized) {
    last_ = detect_rows(cloud, est_, cfg_);
  } else {
    last_ = cold_start(cloud);
  }

  est_.left_valid = last_.left.has_value();
  est_.right_valid = last_.right.has_value();
  if (last_.measurement) {
    const Mat2 r = lane_measurement_noise(*last_.measurement, cfg_);
    if (!est_.initialized) {
      est_.d_lane = last_.measurement->d_lane;
      est_.phi = last_.measurement->phi;
      est_.covariance = r;
      est_.initialized = true;
      est_.last_update = est_.timestamp;
    } else {
      est_ = lane_update(est_, *last_.measurement, r);
    }
  }
  return last_;
}

}  // namespace cropnav
