#include "cropnav/model.hpp"

#include <algorithm>

namespace cropnav {

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw DomainError(std::string("non-finite ") + what);
}

void require_finite(const RobotState& s, const ControlInput& u, const TractionParams& p) {
  require_finite(s.p_x, "p_x");
  require_finite(s.p_y, "p_y");
  require_finite(s.theta, "theta");
  require_finite(u.v, "v");
  require_finite(u.omega, "omega");
  require_finite(p.mu, "mu");
  require_finite(p.nu, "nu");
  require_finite(p.delta_theta, "delta_theta");
}

int substeps(double dt) { return std::max(1, static_cast<int>(std::ceil(dt / kMaxSubstep - 1e-9))); }

}  // namespace

TractionParams TractionParams::clamped() const {
  return {std::clamp(mu, 0.0, 1.0), std::clamp(nu, 0.0, 1.0), wrap_angle(delta_theta)};
}

void VehicleConfig::validate() const {
  if (!(track_width > 0.0 && v_max > 0.0 && body_half_width > 0.0 && body_half_length > 0.0)) {
    throw ConfigError("vehicle dimensions and v_max must be strictly positive");
  }
}

Vec3 derivative(const RobotState& state, const ControlInput& u, const TractionParams& params) {
  require_finite(state, u, params);
  return derivative<double>(state.vec(), u.v, u.omega, params.mu, params.nu);
}

RobotState step(const RobotState& state, const ControlInput& u, const TractionParams& params,
                double dt) {
  if (!(dt > 0.0)) throw DomainError("step: dt must be positive");
  require_finite(state, u, params);
  return RobotState::from(integrate(state.vec(), u, params.mu, params.nu, dt));
}

Vec3 integrate(const Vec3& state, const ControlInput& u, double mu, double nu, double dt) {
  const int n = substeps(dt);
  const double h = dt / n;
  Vec3 x = state;
  for (int i = 0; i < n; ++i) x = rk4<double>(x, u.v, u.omega, mu, nu, h);
  return x;
}

StepJacobian step_jacobian(const Vec3& state, const ControlInput& u, double mu, double nu,
                           double dt) {
  using Deriv = Eigen::Matrix<double, 7, 1>;
  using AD = Eigen::AutoDiffScalar<Deriv>;

  State3<AD> x;
  for (int i = 0; i < 3; ++i) x(i) = AD(state(i), 7, i);
  const AD v(u.v, 7, 3);
  const AD w(u.omega, 7, 4);
  const AD m(mu, 7, 5);
  const AD n(nu, 7, 6);

  const int k = substeps(dt);
  const double h = dt / k;
  State3<AD> next = x;
  for (int i = 0; i < k; ++i) next = rk4<AD>(next, v, w, m, n, h);

  StepJacobian out;
  for (int r = 0; r < 3; ++r) {
    out.next(r) = next(r).value();
    const Deriv& d = next(r).derivatives();
    out.d_state.row(r) = d.segment<3>(0).transpose();
    out.d_input.row(r) = d.segment<2>(3).transpose();
    out.d_traction.row(r) = d.segment<2>(5).transpose();
  }
  return out;
}

WheelMapping wheel_commands(const ControlInput& u, double mu, const VehicleConfig& cfg) {
  WheelMapping out;
  double m = mu;
  if (!(m >= kMuFloor)) {
    m = kMuFloor;
    out.mu_clamped = true;
  }
  const double half_turn = 0.5 * cfg.track_width * u.omega;
  out.wheels.v_left = u.v / m - half_turn;
  out.wheels.v_right = u.v / m + half_turn;
  return out;
}

ControlInput inverse_wheel(const WheelCommand& w, const VehicleConfig& cfg) {
  return {0.5 * (w.v_left + w.v_right), (w.v_right - w.v_left) / cfg.track_width};
}

}  // namespace cropnav
