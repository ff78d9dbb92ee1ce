#include "cropnav/supervisor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cropnav {

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::InRow: return "InRow";
    case Mode::OutRow: return "OutRow";
    case Mode::Recovery: return "Recovery";
  }
  return "?";
}

void SupervisorConfig::validate() const {
  if (!(mu_failure > 0.0 && mu_failure < 1.0)) throw ConfigError("supervisor: mu_failure outside (0, 1)");
  if (max_consecutive_recoveries < 1) throw ConfigError("supervisor: max_consecutive_recoveries must be positive");
  const bool positive = recovery_window > 0.0 && recovery_duration > 0.0 && buffer_span >= recovery_duration &&
                        recovery_speed > 0.0 && fallback_reverse > 0.0 && cruise_speed > 0.0 &&
                        capture_radius > 0.0 && path_spacing > 0.0 && waypoint_lookahead > 0.0 &&
                        lane_lookahead > 0.0 && lane_timeout > 0.0 && corridor_width > 0.0 &&
                        corridor_time > 0.0 && no_progress_time > 0.0 && no_progress_distance > 0.0;
  if (!positive) throw ConfigError("supervisor: durations, speeds and distances must be positive");
}

bool detect_failure(const TractionParams& params, const SupervisorConfig& cfg) {
  return params.mu < cfg.mu_failure;
}

Mode update_mode(Mode current, bool in_row, bool failure, bool recovery_done) {
  if (failure) return Mode::Recovery;
  if (current == Mode::Recovery && !recovery_done) return Mode::Recovery;
  return in_row ? Mode::InRow : Mode::OutRow;
}

namespace {

double segment_distance(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double l2 = ab.squaredNorm();
  const double t = l2 > 0.0 ? std::clamp((p - a).dot(ab) / l2, 0.0, 1.0) : 0.0;
  return (a + t * ab - p).norm();
}

// Resamples a polyline at fixed spacing; headings follow the segments.
ReferencePath resample(const std::vector<Vec2>& poly, double spacing, double speed, double max_length) {
  ReferencePath out;
  double travelled = 0.0;
  for (std::size_t k = 0; k + 1 < poly.size() && travelled < max_length; ++k) {
    const Vec2 a = poly[k], b = poly[k + 1];
    const double len = (b - a).norm();
    if (len < 1e-9) continue;
    const Vec2 dir = (b - a) / len;
    const double heading = std::atan2(dir.y(), dir.x());
    for (double s = 0.0; s < len && travelled + s <= max_length; s += spacing) {
      const Vec2 p = a + s * dir;
      out.points.push_back({{p.x(), p.y(), heading}, {speed, 0.0}});
    }
    travelled += len;
  }
  return out;
}

}  // namespace

WaypointTracker::WaypointTracker(WaypointPlan plan, SupervisorConfig cfg)
    : plan_(std::move(plan)), cfg_(std::move(cfg)) {
  if (plan_.empty()) throw ConfigError("waypoint tracker: empty plan");
  cumulative_.assign(plan_.size(), 0.0);
  for (std::size_t i = 1; i < plan_.size(); ++i) {
    cumulative_[i] = cumulative_[i - 1] + (plan_.waypoints[i].point - plan_.waypoints[i - 1].point).norm();
  }
}

void WaypointTracker::update(const Vec2& position) {
  while (idx_ < plan_.size()) {
    const Vec2& wp = plan_.waypoints[idx_].point;
    if ((position - wp).norm() <= cfg_.capture_radius) {
      ++idx_;
      continue;
    }
    if (idx_ > 0) {
      // past the line through the waypoint perpendicular to its segment
      const Vec2 seg = wp - plan_.waypoints[idx_ - 1].point;
      if (seg.squaredNorm() > 0.0 && (position - wp).dot(seg) > 0.0) {
        ++idx_;
        continue;
      }
    }
    break;
  }
}

std::pair<Vec2, Vec2> WaypointTracker::active_segment() const {
  const std::size_t n = plan_.size();
  if (idx_ == 0) return {plan_.waypoints[0].point, plan_.waypoints[0].point};
  const std::size_t b = std::min(idx_, n - 1);
  const std::size_t a = b == 0 ? 0 : b - 1;
  return {plan_.waypoints[a].point, plan_.waypoints[b].point};
}

double WaypointTracker::arc_length(const Vec2& position) const {
  if (idx_ == 0) return 0.0;
  if (idx_ >= plan_.size()) return cumulative_.back();
  const auto [a, b] = active_segment();
  const Vec2 ab = b - a;
  const double len = ab.norm();
  const double s = len > 0.0 ? std::clamp((position - a).dot(ab) / len, 0.0, len) : 0.0;
  return cumulative_[idx_ - 1] + s;
}

double WaypointTracker::corridor_distance(const Vec2& position) const {
  const std::size_t n = plan_.size();
  const std::size_t hi = std::min(idx_ + 1, n - 1);
  const std::size_t lo = idx_ >= 2 ? idx_ - 2 : 0;
  double best = (position - plan_.waypoints[std::min(idx_, n - 1)].point).norm();
  for (std::size_t k = lo; k < hi; ++k) {
    best = std::min(best, segment_distance(position, plan_.waypoints[k].point, plan_.waypoints[k + 1].point));
  }
  return best;
}

ReferencePath WaypointTracker::reference(const RobotState& pose) const {
  const std::size_t n = plan_.size();
  if (idx_ >= n) {
    ReferencePath hold;
    hold.hold = true;
    const Vec2 end = plan_.waypoints.back().point;
    double heading = pose.theta;
    if (n >= 2) {
      const Vec2 d = end - plan_.waypoints[n - 2].point;
      heading = std::atan2(d.y(), d.x());
    }
    hold.points.push_back({{end.x(), end.y(), heading}, {0.0, 0.0}});
    return hold;
  }
  std::vector<Vec2> poly;
  if (idx_ == 0) {
    poly.push_back(pose.position());
  } else {
    const auto [a, b] = active_segment();
    const Vec2 ab = b - a;
    const double l2 = ab.squaredNorm();
    const double t = l2 > 0.0 ? std::clamp((pose.position() - a).dot(ab) / l2, 0.0, 1.0) : 1.0;
    poly.push_back(a + t * ab);
  }
  double length = 0.0;
  for (std::size_t k = idx_; k < n && length < cfg_.waypoint_lookahead; ++k) {
    length += (plan_.waypoints[k].point - poly.back()).norm();
    poly.push_back(plan_.waypoints[k].point);
  }
  ReferencePath path = resample(poly, cfg_.path_spacing, cfg_.cruise_speed, cfg_.waypoint_lookahead);
  if (path.empty()) {
    // robot sits on the last remaining waypoint
    const Vec2 p = poly.back();
    path.points.push_back({{p.x(), p.y(), pose.theta}, {0.0, 0.0}});
    path.hold = true;
    return path;
  }
  // close the polyline at its final vertex
  const Vec2 last = poly.back();
  if (length <= cfg_.waypoint_lookahead && (last - path.points.back().x.position()).norm() > 1e-9) {
    ReferencePoint end = path.points.back();
    end.x.p_x = last.x();
    end.x.p_y = last.y();
    path.points.push_back(end);
  }
  if (idx_ + 1 >= n && length < cfg_.waypoint_lookahead) path.points.back().u.v = 0.0;
  return path;
}

ReferencePath waypoint_reference(const WaypointTracker& tracker, const RobotState& pose) {
  return tracker.reference(pose);
}

std::optional<ReferencePath> lane_reference(const LaneEstimate& est, double now,
                                            const SupervisorConfig& cfg) {
  if (!est.initialized || now - est.last_update > cfg.lane_timeout) return std::nullopt;
  ReferencePath path;
  path.frame = Frame::Robot;
  const double c = std::cos(est.phi), s = std::sin(est.phi);
  const Vec2 origin(-est.d_lane * s, -est.d_lane * c);
  const Vec2 dir(c, -s);
  for (double a = 0.0; a <= cfg.lane_lookahead + 1e-9; a += cfg.path_spacing) {
    const Vec2 p = origin + a * dir;
    path.points.push_back({{p.x(), p.y(), wrap_angle(-est.phi)}, {cfg.cruise_speed, 0.0}});
  }
  return path;
}

void RecoveryBuffer::push(const RobotState& x, double t) {
  if (!samples_.empty() && !(t > samples_.back().t)) return;
  samples_.push_back({x, t});
  while (!samples_.empty() && samples_.back().t - samples_.front().t > span_) samples_.pop_front();
}

ReferencePath recovery_reference(const RecoveryBuffer& buf, const RobotState& pose,
                                 const SupervisorConfig& cfg) {
  ReferencePath path;
  const auto& s = buf.samples();
  if (!s.empty() && buf.span() >= cfg.recovery_duration) {
    const double t_end = s.back().t;
    // walk back from the newest sample while the robot was driving forward
    std::vector<RobotState> suffix{s.back().x};
    double length = 0.0;
    for (std::size_t k = s.size() - 1; k > 0; --k) {
      const BufferedState& newer = s[k];
      const BufferedState& older = s[k - 1];
      if (t_end - older.t > cfg.recovery_duration) break;
      const Vec2 d = newer.x.position() - older.x.position();
      const Vec2 h(std::cos(older.x.theta), std::sin(older.x.theta));
      if (d.dot(h) < -1e-3) break;
      if (d.norm() < 1e-4) continue;
      suffix.push_back(older.x);
      length += d.norm();
    }
    if (length >= cfg.fallback_reverse) {
      for (const RobotState& x : suffix) path.points.push_back({x, {-cfg.recovery_speed, 0.0}});
      return path;
    }
  }
  const Vec2 back(-std::cos(pose.theta), -std::sin(pose.theta));
  for (double a = 0.0; a <= cfg.fallback_reverse + 1e-9; a += 0.05) {
    const Vec2 p = pose.position() + a * back;
    path.points.push_back({{p.x(), p.y(), pose.theta}, {-cfg.recovery_speed, 0.0}});
  }
  return path;
}

Supervisor::Supervisor(WaypointPlan plan, SupervisorConfig cfg)
    : cfg_(std::move(cfg)), waypoints_(std::move(plan), cfg_), buffer_(cfg_.buffer_span) {
  cfg_.validate();
}

bool Supervisor::recovery_done(const SupervisorInputs& in) const {
  if (recovery_path_.empty()) return true;
  if ((in.estimate.position() - recovery_path_.points.back().x.position()).norm() < 0.1) return true;
  return mu_ok_since_ >= 0.0 && in.t - mu_ok_since_ >= cfg_.recovery_window;
}

void Supervisor::start_recovery(const SupervisorInputs& in, SupervisorOutput& out) {
  recovery_path_ = recovery_reference(buffer_, in.estimate, cfg_);
  recovery_index_ = 0;
  recovery_start_ = in.t;
  mu_ok_since_ = -1.0;
  ++recoveries_;
  ++consecutive_;
  out.events.push_back({"recovery", "attempt " + std::to_string(consecutive_)});
}

void Supervisor::reset_after_intervention(double t, bool in_row) {
  mode_ = in_row ? Mode::InRow : Mode::OutRow;
  recovery_path_ = ReferencePath{};
  recovery_start_ = -1e300;
  mu_ok_since_ = -1.0;
  last_failure_ = -1e300;
  consecutive_ = 0;
  corridor_since_ = -1.0;
  progress_mark_t_ = t;
  progress_mark_s_ = -std::numeric_limits<double>::infinity();
  buffer_.clear();
}

SupervisorOutput Supervisor::tick(const SupervisorInputs& in) {
  SupervisorOutput out;
  const double t = in.t;
  buffer_.push(in.estimate, t);
  waypoints_.update(in.estimate.position());

  const bool failure_raw = in.recovery_enabled && in.mhe_valid && detect_failure(in.params, cfg_);
  if (failure_raw) last_failure_ = t;
  if (t - last_failure_ > cfg_.recovery_counter_reset) consecutive_ = 0;
  // a failure already acted on stays in the MHE window for one window length
  const bool failure = failure_raw && t >= recovery_start_ + cfg_.recovery_window;

  if (mode_ == Mode::Recovery) {
    if (in.mhe_valid && in.params.mu >= cfg_.mu_failure + cfg_.recovery_hysteresis) {
      if (mu_ok_since_ < 0.0) mu_ok_since_ = t;
    } else {
      mu_ok_since_ = -1.0;
    }
  }

  const bool in_row = in.perception_enabled && in.in_row;
  const bool done = mode_ == Mode::Recovery && recovery_done(in);
  const Mode next = update_mode(mode_, in_row, failure, done);

  if (failure) {
    if (consecutive_ >= cfg_.max_consecutive_recoveries) {
      out.intervention = true;
      out.events.push_back({"intervention", "max_recoveries"});
    } else {
      start_recovery(in, out);
    }
  }
  if (next != mode_) {
    out.events.push_back({"mode", std::string(mode_name(mode_)) + "->" + mode_name(next)});
  }
  mode_ = next;
  out.mode = mode_;

  switch (mode_) {
    case Mode::Recovery: {
      // monotone progress along the reverse path
      const auto& pts = recovery_path_.points;
      const Vec2 p = in.estimate.position();
      while (recovery_index_ + 1 < pts.size() &&
             (pts[recovery_index_ + 1].x.position() - p).norm() <= (pts[recovery_index_].x.position() - p).norm()) {
        ++recovery_index_;
      }
      out.path = recovery_path_;
      if (!pts.empty()) {
        out.path.points.assign(pts.begin() + static_cast<std::ptrdiff_t>(std::min(recovery_index_, pts.size() - 1)),
                               pts.end());
      }
      break;
    }
    case Mode::InRow: {
      std::optional<ReferencePath> lane;
      if (in.lane) lane = lane_reference(*in.lane, t, cfg_);
      out.path = lane ? lane->to_world(in.estimate) : waypoints_.reference(in.estimate);
      break;
    }
    case Mode::OutRow:
      out.path = waypoints_.reference(in.estimate);
      break;
  }

  // mechanical intervention triggers on the true pose
  if (!out.intervention) {
    if (waypoints_.corridor_distance(in.truth) > cfg_.corridor_width) {
      if (corridor_since_ < 0.0) corridor_since_ = t;
      if (t - corridor_since_ > cfg_.corridor_time) {
        out.intervention = true;
        out.events.push_back({"intervention", "corridor"});
      }
    } else {
      corridor_since_ = -1.0;
    }
  }
  if (!out.intervention) {
    const double s = waypoints_.arc_length(in.truth);
    if (s >= progress_mark_s_ + cfg_.no_progress_distance) {
      progress_mark_s_ = s;
      progress_mark_t_ = t;
    } else if (t - progress_mark_t_ > cfg_.no_progress_time) {
      out.intervention = true;
      out.events.push_back({"intervention", "no_progress"});
    }
  }
  out.finished = waypoints_.finished();
  return out;
}

}  // namespace cropnav
