#include "cropnav/estimator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

namespace cropnav {

namespace {

bool positive_definite(const Mat3& m) {
  if (!m.isApprox(m.transpose(), 1e-12)) return false;
  Eigen::LLT<Mat3> llt(m);
  return llt.info() == Eigen::Success;
}

// Upper factor U with P = U^T U, so |U e|^2 = e^T P e.
Mat3 weight_root(const Mat3& p) {
  Eigen::LLT<Mat3> llt(p);
  return llt.matrixU();
}

MheVector pack(const RobotState& x, const TractionParams& m) {
  MheVector z;
  z << x.p_x, x.p_y, x.theta, m.mu, m.nu, m.delta_theta;
  return z;
}

RobotState state_of(const MheVector& z) { return {z(0), z(1), z(2)}; }
TractionParams params_of(const MheVector& z) { return {z(3), z(4), z(5)}; }

MheVector project(MheVector z) {
  z(2) = wrap_angle(z(2));
  z(3) = std::clamp(z(3), 0.0, 1.0);
  z(4) = std::clamp(z(4), 0.0, 1.0);
  z(5) = wrap_angle(z(5));
  return z;
}

Vec3 pose_error(const RobotState& a, const RobotState& b) {
  return {a.p_x - b.p_x, a.p_y - b.p_y, wrap_angle(a.theta - b.theta)};
}

Vec3 param_error(const TractionParams& a, const TractionParams& b) {
  return {a.mu - b.mu, a.nu - b.nu, wrap_angle(a.delta_theta - b.delta_theta)};
}

Vec3 measurement_error(const RobotState& x, const MheMeasurement& z, double delta_theta) {
  return {x.p_x - z.z_x, x.p_y - z.z_y, wrap_angle(x.theta - (z.z_theta + delta_theta))};
}

}  // namespace

void MheConfig::validate() const {
  if (horizon < 2) throw ConfigError("mhe: horizon must be at least 2");
  if (!positive_definite(P_x) || !positive_definite(P_m) || !positive_definite(P_w)) {
    throw ConfigError("mhe: weights must be symmetric positive definite");
  }
  if (!(solver_tol > 0.0) || max_iters < 1) throw ConfigError("mhe: invalid solver settings");
}

void MheWindow::validate() const {
  if (measurements.size() != inputs.size() + 1) {
    throw DomainError("mhe window: need one more measurement than input intervals");
  }
  for (std::size_t i = 1; i < measurements.size(); ++i) {
    if (!(measurements[i].timestamp > measurements[i - 1].timestamp)) {
      throw DomainError("mhe window: timestamps must be strictly increasing");
    }
  }
}

std::vector<RobotState> mhe_rollout(const MheWindow& window, const RobotState& x_k,
                                    const TractionParams& params) {
  std::vector<RobotState> states;
  states.reserve(window.inputs.size() + 1);
  Vec3 x = x_k.vec();
  states.push_back(x_k);
  for (const IntervalInputs& interval : window.inputs) {
    for (const TimedInput& piece : interval) {
      if (piece.duration <= 0.0) continue;
      x = integrate(x, piece.u, params.mu, params.nu, piece.duration);
    }
    states.push_back({x(0), x(1), x(2)});
  }
  return states;
}

MheResidual mhe_residual(const MheWindow& window, const std::vector<RobotState>& states,
                         const TractionParams& params, const MheConfig& cfg) {
  if (states.size() != window.measurements.size()) {
    throw DomainError("mhe_residual: candidate length must equal the measurement count");
  }
  const Mat3 ux = weight_root(cfg.P_x), um = weight_root(cfg.P_m), uw = weight_root(cfg.P_w);
  MheResidual out;
  out.residual.resize(6 + 3 * static_cast<Eigen::Index>(states.size()));
  out.residual.segment<3>(0) = ux * pose_error(states.front(), window.prior_state);
  out.residual.segment<3>(3) = um * param_error(params, window.prior_params);
  for (std::size_t i = 0; i < states.size(); ++i) {
    out.residual.segment<3>(6 + 3 * static_cast<Eigen::Index>(i)) =
        uw * measurement_error(states[i], window.measurements[i], params.delta_theta);
  }
  out.cost = out.residual.squaredNorm();
  return out;
}

MheLinearization mhe_linearize(const MheWindow& window, const MheVector& z, const MheConfig& cfg) {
  const Mat3 ux = weight_root(cfg.P_x), um = weight_root(cfg.P_m), uw = weight_root(cfg.P_w);
  const std::size_t n_meas = window.measurements.size();
  MheLinearization lin;
  const Eigen::Index rows = 6 + 3 * static_cast<Eigen::Index>(n_meas);
  lin.residual.resize(rows);
  lin.jacobian.setZero(rows, 6);

  const RobotState x_k = state_of(z);
  const TractionParams m = params_of(z);

  lin.residual.segment<3>(0) = ux * pose_error(x_k, window.prior_state);
  lin.jacobian.block<3, 3>(0, 0) = ux;
  lin.residual.segment<3>(3) = um * param_error(m, window.prior_params);
  lin.jacobian.block<3, 3>(3, 3) = um;

  // sensitivity of the rolled-out state to (x_k, mu, nu)
  Eigen::Matrix<double, 3, 5> sens = Eigen::Matrix<double, 3, 5>::Zero();
  sens.leftCols<3>().setIdentity();
  Vec3 x = x_k.vec();
  for (std::size_t i = 0; i < n_meas; ++i) {
    if (i > 0) {
      for (const TimedInput& piece : window.inputs[i - 1]) {
        if (piece.duration <= 0.0) continue;
        const StepJacobian sj = step_jacobian(x, piece.u, m.mu, m.nu, piece.duration);
        Eigen::Matrix<double, 3, 5> next = sj.d_state * sens;
        next.rightCols<2>() += sj.d_traction;
        sens = next;
        x = sj.next;
      }
    }
    const RobotState xi{x(0), x(1), x(2)};
    Eigen::Matrix<double, 3, 6> de = Eigen::Matrix<double, 3, 6>::Zero();
    de.leftCols<5>() = sens;
    de(2, 5) = -1.0;
    const Eigen::Index r0 = 6 + 3 * static_cast<Eigen::Index>(i);
    lin.residual.segment<3>(r0) = uw * measurement_error(xi, window.measurements[i], m.delta_theta);
    lin.jacobian.block<3, 6>(r0, 0) = uw * de;
  }
  lin.cost = lin.residual.squaredNorm();
  return lin;
}

MheVector mhe_gradient(const MheWindow& window, const MheVector& z, const MheConfig& cfg) {
  const MheLinearization lin = mhe_linearize(window, z, cfg);
  return 2.0 * lin.jacobian.transpose() * lin.residual;
}

MheSolution mhe_solve(const MheWindow& window, const MheConfig& cfg) {
  window.validate();
  if (window.horizon() != cfg.horizon) throw DomainError("mhe_solve: window/horizon mismatch");

  MheVector z = project(pack(window.prior_state, window.prior_params));
  MheLinearization lin = mhe_linearize(window, z, cfg);
  MheSolution sol;
  double lambda = 1e-6;

  for (int it = 0; it < cfg.max_iters; ++it) {
    sol.iterations = it + 1;
    const MheVector g = lin.jacobian.transpose() * lin.residual;

    // bound-active traction coefficients are frozen for this step
    std::array<bool, 6> free{};
    free.fill(true);
    for (int k : {3, 4}) {
      if ((z(k) <= 0.0 && g(k) > 0.0) || (z(k) >= 1.0 && g(k) < 0.0)) free[k] = false;
    }
    MheVector pg = g;
    for (int k = 0; k < 6; ++k) {
      if (!free[k]) pg(k) = 0.0;
    }
    if (2.0 * pg.norm() < cfg.solver_tol) {
      sol.converged = true;
      break;
    }

    Eigen::Matrix<double, 6, 6> h = lin.jacobian.transpose() * lin.jacobian;
    for (int k = 0; k < 6; ++k) {
      if (!free[k]) {
        h.row(k).setZero();
        h.col(k).setZero();
        h(k, k) = 1.0;
      }
    }
    h.diagonal().array() += lambda * (1.0 + h.diagonal().array());
    const MheVector step = -h.ldlt().solve(pg);

    bool accepted = false;
    double alpha = 1.0;
    MheLinearization trial;
    MheVector z_new;
    for (int ls = 0; ls < 30; ++ls) {
      z_new = project(z + alpha * step);
      trial = mhe_linearize(window, z_new, cfg);
      if (trial.cost <= lin.cost + 1e-4 * 2.0 * g.dot(z_new - z)) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      // no descent available at this resolution: stationary to working precision
      sol.converged = true;
      break;
    }
    const double decrease = lin.cost - trial.cost;
    z = z_new;
    lin = std::move(trial);
    lambda = alpha == 1.0 ? std::max(1e-9, lambda * 0.3) : std::min(1e3, lambda * 3.0);
    if (decrease <= cfg.solver_tol * (1.0 + lin.cost)) {
      sol.converged = true;
      break;
    }
  }

  sol.params = params_of(z).clamped();
  sol.states = mhe_rollout(window, state_of(z), sol.params);
  sol.cost = lin.cost;
  return sol;
}

EkfState ekf_predict(const EkfState& state, const ImuSample& imu, double dt, const EkfConfig& cfg) {
  if (!(dt > 0.0)) throw DomainError("ekf_predict: dt must be positive");
  EkfState out = state;
  const double roll = state.x(2), pitch = state.x(3), yaw = state.x(4);
  const double sa = std::sin(roll), ca = std::cos(roll);
  double cb = std::cos(pitch);
  if (std::abs(cb) < 1e-3) cb = std::copysign(1e-3, cb);
  const double sb = std::sin(pitch), tb = sb / cb;
  const double p = imu.omega_x, q = imu.omega_y, r = imu.omega_z;

  const double roll_rate = p + (q * sa + r * ca) * tb;
  const double pitch_rate = q * ca - r * sa;
  const double yaw_rate = (q * sa + r * ca) / cb;

  // remove gravity using the current attitude, keep the planar part
  const Vec3 gravity_body(-kGravity * sb, kGravity * sa * cb, kGravity * ca * cb);
  const Vec3 linear = Vec3(imu.a_x, imu.a_y, imu.a_z) - gravity_body;
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const Vec2 acc_world(cy * linear.x() - sy * linear.y(), sy * linear.x() + cy * linear.y());

  out.x(0) += state.velocity.x() * dt + 0.5 * acc_world.x() * dt * dt;
  out.x(1) += state.velocity.y() * dt + 0.5 * acc_world.y() * dt * dt;
  out.velocity = state.velocity + acc_world * dt;
  out.x(2) = wrap_angle(roll + roll_rate * dt);
  out.x(3) = wrap_angle(pitch + pitch_rate * dt);
  out.x(4) = wrap_angle(yaw + yaw_rate * dt);
  out.timestamp = state.timestamp + dt;

  Mat5 f = Mat5::Identity();
  const double qs_rc = q * sa + r * ca;
  const double qc_rs = q * ca - r * sa;
  f(2, 2) += dt * qc_rs * tb;
  f(2, 3) += dt * qs_rc / (cb * cb);
  f(3, 2) += dt * (-q * sa - r * ca);
  f(4, 2) += dt * qc_rs / cb;
  f(4, 3) += dt * qs_rc * sb / (cb * cb);
  // yaw enters the position through the rotated acceleration
  f(0, 4) += 0.5 * dt * dt * (-sy * linear.x() - cy * linear.y());
  f(1, 4) += 0.5 * dt * dt * (cy * linear.x() - sy * linear.y());

  Vec5 qd;
  qd << cfg.q_position, cfg.q_position, cfg.q_angle, cfg.q_angle, cfg.q_angle;
  out.covariance = f * state.covariance * f.transpose();
  out.covariance.diagonal() += qd * dt;
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

EkfState ekf_correct(const EkfState& state, const RobotState& pose, const Vec2& inclination,
                     const EkfConfig& cfg) {
  Vec5 z;
  z << pose.p_x, pose.p_y, inclination.x(), inclination.y(), pose.theta;
  std::vector<int> measured;
  for (int k = 0; k < 5; ++k) {
    if (std::isfinite(cfg.measurement_sigma(k))) measured.push_back(k);
  }
  EkfState out = state;
  out.floored = false;
  if (measured.empty()) return out;

  const Eigen::Index m = static_cast<Eigen::Index>(measured.size());
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(m, 5);
  Eigen::VectorXd innovation(m);
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int k = measured[static_cast<std::size_t>(i)];
    h(i, k) = 1.0;
    const double d = z(k) - state.x(k);
    innovation(i) = k >= 2 ? wrap_angle(d) : d;
    r(i, i) = cfg.measurement_sigma(k) * cfg.measurement_sigma(k);
  }
  const Mat5& p = state.covariance;
  const Eigen::MatrixXd s = h * p * h.transpose() + r;
  const Eigen::MatrixXd k_gain = s.ldlt().solve(h * p).transpose();

  out.x = state.x + k_gain * innovation;
  for (int k = 2; k < 5; ++k) out.x(k) = wrap_angle(out.x(k));
  const Mat5 i_kh = Mat5::Identity() - k_gain * h;
  Mat5 cov = i_kh * p * i_kh.transpose() + k_gain * r * k_gain.transpose();
  cov = 0.5 * (cov + cov.transpose()).eval();

  Eigen::SelfAdjointEigenSolver<Mat5> eig(cov);
  if (eig.eigenvalues().minCoeff() < 0.0) {
    const Vec5 floored = eig.eigenvalues().cwiseMax(0.0);
    cov = eig.eigenvectors() * floored.asDiagonal() * eig.eigenvectors().transpose();
    cov = 0.5 * (cov + cov.transpose()).eval();
    out.floored = true;
  }
  out.covariance = cov;
  return out;
}

Vec2 inclination_from_accel(const ImuSample& imu) {
  return {std::atan2(imu.a_y, imu.a_z), std::atan2(-imu.a_x, std::hypot(imu.a_y, imu.a_z))};
}

StateEstimator::StateEstimator(MheConfig mhe, EkfConfig ekf) : mhe_(std::move(mhe)), ekf_cfg_(ekf) {
  mhe_.validate();
}

void StateEstimator::reset(const RobotState& pose, const TractionParams& params, double t) {
  ekf_ = EkfState{};
  ekf_.x << pose.p_x, pose.p_y, 0.0, 0.0, pose.theta;
  ekf_.covariance = Mat5::Identity() * 1e-4;
  ekf_.timestamp = t;
  params_ = params;
  prior_state_ = pose;
  last_.reset();
  measurements_.clear();
  inputs_.clear();
  pending_.clear();
  command_ = ControlInput{};
  command_time_ = t;
  last_imu_.reset();
  inclination_ = Vec2::Zero();
  last_correction_ = -std::numeric_limits<double>::infinity();
}

void StateEstimator::on_command(const ControlInput& u, double t) {
  if (t > command_time_) {
    pending_.push_back({command_, t - command_time_});
    command_time_ = t;
  }
  command_ = u;
}

void StateEstimator::on_imu(const ImuSample& imu) {
  const double dt = imu.timestamp - ekf_.timestamp;
  if (dt > 0.0) ekf_ = ekf_predict(ekf_, imu, dt, ekf_cfg_);
  // slow low-pass so turning accelerations do not read as tilt
  const Vec2 incl = inclination_from_accel(imu);
  inclination_ = last_imu_ ? Vec2(0.98 * inclination_ + 0.02 * incl) : incl;
  last_imu_ = imu;
}

void StateEstimator::close_interval(double t) {
  if (t > command_time_) {
    pending_.push_back({command_, t - command_time_});
    command_time_ = t;
  }
}

bool StateEstimator::apply_correction(const RobotState& pose, double t) {
  if (t < last_correction_) {
    ++dropped_;
    return false;
  }
  ekf_ = ekf_correct(ekf_, pose, inclination_, ekf_cfg_);
  last_correction_ = t;
  return true;
}

bool StateEstimator::on_gnss(const GnssFix& fix) {
  if (!fix.valid) return false;
  close_interval(fix.timestamp);
  const double z_theta = last_imu_ ? last_imu_->z_theta : wrap_angle(ekf_.x(4) - params_.delta_theta);
  if (measurements_.empty()) {
    prior_state_ = ekf_.pose();
    pending_.clear();
  } else {
    inputs_.push_back(std::move(pending_));
    pending_.clear();
  }
  measurements_.push_back({fix.z_x, fix.z_y, z_theta, fix.timestamp});

  if (static_cast<int>(measurements_.size()) > mhe_.horizon + 1) {
    measurements_.erase(measurements_.begin());
    inputs_.erase(inputs_.begin());
    if (last_ && last_->states.size() > 1) prior_state_ = last_->states[1];
  }

  if (!window_full()) {
    // bootstrap: correct straight from the fix until a full window exists
    apply_correction({fix.z_x, fix.z_y, wrap_angle(z_theta + params_.delta_theta)}, fix.timestamp);
    return false;
  }

  MheWindow window{measurements_, inputs_, prior_state_, params_};
  MheSolution sol = mhe_solve(window, mhe_);
  ++solves_;
  if (sol.converged) {
    params_ = sol.params;
    const RobotState& latest = sol.states.back();
    if (apply_correction(latest, fix.timestamp)) {
      const double speed = params_.mu * command_.v;
      ekf_.velocity = speed * Vec2(std::cos(latest.theta), std::sin(latest.theta));
    }
  }
  last_ = std::move(sol);
  return true;
}

}  // namespace cropnav
