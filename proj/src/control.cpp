#include "cropnav/control.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>

namespace cropnav {

ReferencePath ReferencePath::to_world(const RobotState& pose) const {
  if (frame == Frame::World) return *this;
  ReferencePath out;
  out.frame = Frame::World;
  out.hold = hold;
  out.points.reserve(points.size());
  const double c = std::cos(pose.theta), s = std::sin(pose.theta);
  for (const ReferencePoint& p : points) {
    ReferencePoint q = p;
    q.x.p_x = pose.p_x + c * p.x.p_x - s * p.x.p_y;
    q.x.p_y = pose.p_y + s * p.x.p_x + c * p.x.p_y;
    q.x.theta = wrap_angle(pose.theta + p.x.theta);
    out.points.push_back(q);
  }
  return out;
}

void MpcConfig::validate() const {
  auto pd3 = [](const Mat3& m) {
    return m.isApprox(m.transpose()) && Eigen::LLT<Mat3>(m).info() == Eigen::Success;
  };
  const bool r_pd = R.isApprox(R.transpose()) && Eigen::LLT<Eigen::Matrix2d>(R).info() == Eigen::Success;
  if (horizon < 1) throw ConfigError("mpc: horizon must be at least 1");
  if (!(dt > 0.0) || !(v_max > 0.0) || !(track_width > 0.0)) throw ConfigError("mpc: invalid dt, v_max or track width");
  if (!pd3(Q) || !pd3(Q_N) || !r_pd) throw ConfigError("mpc: weights must be positive definite");
  if (!(solver_tol > 0.0) || max_iters < 1) throw ConfigError("mpc: invalid solver settings");
}

namespace {

struct PathCursor {
  std::size_t seg = 0;  // segment [seg, seg + 1]
  double t = 0.0;       // fraction along it
};

Vec2 lerp(const Vec2& a, const Vec2& b, double t) { return a + t * (b - a); }

// Advances along the polyline by ds; stops at the end.
PathCursor advance(const ReferencePath& path, PathCursor c, double ds) {
  const std::size_t n = path.size();
  while (c.seg + 1 < n) {
    const Vec2 a = path.points[c.seg].x.position(), b = path.points[c.seg + 1].x.position();
    const double len = (b - a).norm();
    const double left = (1.0 - c.t) * len;
    if (ds <= left || len <= 0.0) {
      if (len > 0.0) c.t += ds / len;
      if (len <= 0.0) {
        ++c.seg;
        c.t = 0.0;
        continue;
      }
      return c;
    }
    ds -= left;
    ++c.seg;
    c.t = 0.0;
  }
  c.seg = n - 1;
  c.t = 0.0;
  return c;
}

ReferencePoint at(const ReferencePath& path, const PathCursor& c) {
  if (c.seg + 1 >= path.size()) return path.points.back();
  const ReferencePoint& a = path.points[c.seg];
  const ReferencePoint& b = path.points[c.seg + 1];
  ReferencePoint p;
  const Vec2 pos = lerp(a.x.position(), b.x.position(), c.t);
  p.x = {pos.x(), pos.y(), wrap_angle(a.x.theta + c.t * wrap_angle(b.x.theta - a.x.theta))};
  p.u.v = a.u.v + c.t * (b.u.v - a.u.v);
  return p;
}

// Upper factor U with W = U^T U.
template <int D>
Eigen::Matrix<double, D, D> root(const Eigen::Matrix<double, D, D>& w) {
  return Eigen::LLT<Eigen::Matrix<double, D, D>>(w).matrixU();
}

const ReferencePoint& ref_at(const ReferencePath& ref, int i) {
  return ref.points[static_cast<std::size_t>(std::min<int>(i, static_cast<int>(ref.size()) - 1))];
}

void check_inputs(const RobotState& x0, const std::vector<ControlInput>& inputs,
                  const ReferencePath& ref, const MpcConfig& cfg) {
  if (!std::isfinite(x0.p_x) || !std::isfinite(x0.p_y) || !std::isfinite(x0.theta)) {
    throw DomainError("mpc: non-finite initial state");
  }
  if (static_cast<int>(inputs.size()) != cfg.horizon) throw DomainError("mpc: input length != horizon");
  if (ref.empty()) throw DomainError("mpc: empty reference");
}

struct Linearization {
  Eigen::VectorXd residual;
  Eigen::MatrixXd jacobian;  // d residual / d (v_0, omega_0, ...)
  double cost = 0.0;
};

Linearization linearize(const RobotState& x0, const std::vector<ControlInput>& inputs,
                        const ReferencePath& ref, const TractionParams& params, const MpcConfig& cfg,
                        bool with_jacobian) {
  const int n = cfg.horizon;
  const Mat3 uq = root<3>(cfg.Q), uqn = root<3>(cfg.Q_N);
  const Eigen::Matrix2d ur = root<2>(cfg.R);
  Linearization lin;
  const int rows = 3 * (n + 1) + 2 * n;
  lin.residual.resize(rows);
  if (with_jacobian) lin.jacobian.setZero(rows, 2 * n);
  Eigen::MatrixXd sens;
  if (with_jacobian) sens.setZero(3, 2 * n);

  Vec3 x = x0.vec();
  for (int i = 0; i <= n; ++i) {
    const ReferencePoint& r = ref_at(ref, i);
    const Vec3 e(x(0) - r.x.p_x, x(1) - r.x.p_y, wrap_angle(x(2) - r.x.theta));
    const Mat3& u3 = i == n ? uqn : uq;
    lin.residual.segment<3>(3 * i) = u3 * e;
    if (with_jacobian && i > 0) lin.jacobian.block(3 * i, 0, 3, 2 * n) = u3 * sens;
    if (i == n) break;

    const ControlInput& u = inputs[static_cast<std::size_t>(i)];
    const Eigen::Vector2d du(u.v - r.u.v, u.omega - r.u.omega);
    const int ri = 3 * (n + 1) + 2 * i;
    lin.residual.segment<2>(ri) = ur * du;
    if (with_jacobian) {
      lin.jacobian.block<2, 2>(ri, 2 * i) = ur;
      const StepJacobian sj = step_jacobian(x, u, 1.0, params.nu, cfg.dt);
      sens = (sj.d_state * sens).eval();
      sens.block<3, 2>(0, 2 * i) += sj.d_input;
      x = sj.next;
    } else {
      x = integrate(x, u, 1.0, params.nu, cfg.dt);
    }
  }
  lin.cost = lin.residual.squaredNorm();
  return lin;
}

std::vector<ControlInput> to_inputs(const Eigen::VectorXd& w, double mu, const MpcConfig& cfg) {
  std::vector<ControlInput> u(static_cast<std::size_t>(cfg.horizon));
  for (int i = 0; i < cfg.horizon; ++i) {
    u[static_cast<std::size_t>(i)] = wheel_to_input({w(2 * i), w(2 * i + 1)}, mu, cfg);
  }
  return u;
}

struct GnResult {
  Eigen::VectorXd w;
  double cost = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Projected Gauss-Newton over the wheel box with Armijo backtracking along
// the projection arc.
GnResult gauss_newton(const RobotState& x0, const ReferencePath& ref, const TractionParams& params,
                      double mu, const MpcConfig& cfg, Eigen::VectorXd w) {
  const int m = 2 * cfg.horizon;
  const double lim = cfg.v_max;
  w = w.cwiseMax(-lim).cwiseMin(lim);
  // d (v, omega) / d (v_left, v_right)
  Eigen::Matrix2d t;
  t << 0.5 * mu, 0.5 * mu, -1.0 / cfg.track_width, 1.0 / cfg.track_width;

  GnResult res;
  Linearization lin = linearize(x0, to_inputs(w, mu, cfg), ref, params, cfg, true);
  for (int it = 0; it < cfg.max_iters; ++it) {
    res.iterations = it + 1;
    Eigen::MatrixXd jw(lin.jacobian.rows(), m);
    for (int i = 0; i < cfg.horizon; ++i) jw.middleCols<2>(2 * i) = lin.jacobian.middleCols<2>(2 * i) * t;
    const Eigen::VectorXd g = jw.transpose() * lin.residual;

    std::vector<bool> active(static_cast<std::size_t>(m), false);
    Eigen::VectorXd pg = g;
    const double eps = 1e-9;
    for (int k = 0; k < m; ++k) {
      if ((w(k) <= -lim + eps && g(k) > 0.0) || (w(k) >= lim - eps && g(k) < 0.0)) {
        active[static_cast<std::size_t>(k)] = true;
        pg(k) = 0.0;
      }
    }
    if (pg.lpNorm<Eigen::Infinity>() < 1e-10 * (1.0 + lin.cost)) {
      res.converged = true;
      break;
    }

    Eigen::MatrixXd h = jw.transpose() * jw;
    for (int k = 0; k < m; ++k) {
      if (active[static_cast<std::size_t>(k)]) {
        h.row(k).setZero();
        h.col(k).setZero();
        h(k, k) = 1.0;
      }
    }
    h.diagonal().array() += 1e-9;
    const Eigen::VectorXd d = -h.ldlt().solve(pg);

    double alpha = 1.0;
    bool accepted = false;
    Eigen::VectorXd w_new;
    Linearization trial;
    for (int ls = 0; ls < 30; ++ls) {
      w_new = (w + alpha * d).cwiseMax(-lim).cwiseMin(lim);
      trial = linearize(x0, to_inputs(w_new, mu, cfg), ref, params, cfg, false);
      if (trial.cost <= lin.cost + 1e-4 * 2.0 * g.dot(w_new - w)) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      res.converged = true;  // no descent left at working precision
      break;
    }
    const double decrease = lin.cost - trial.cost;
    w = w_new;
    lin = linearize(x0, to_inputs(w, mu, cfg), ref, params, cfg, true);
    if (decrease <= cfg.solver_tol * (1.0 + lin.cost)) {
      res.converged = true;
      break;
    }
  }
  res.w = w;
  res.cost = lin.cost;
  return res;
}

Eigen::VectorXd wheels_of(const std::vector<ControlInput>& u, double mu, const MpcConfig& cfg) {
  Eigen::VectorXd w(2 * cfg.horizon);
  for (int i = 0; i < cfg.horizon; ++i) {
    const ControlInput& ui = u[std::min(u.size() - 1, static_cast<std::size_t>(i))];
    w(2 * i) = ui.v / mu - 0.5 * cfg.track_width * ui.omega;
    w(2 * i + 1) = ui.v / mu + 0.5 * cfg.track_width * ui.omega;
  }
  return w;
}

}  // namespace

ReferencePath sample_reference(const ReferencePath& path, const RobotState& x0, const MpcConfig& cfg) {
  if (path.empty()) throw DomainError("sample_reference: empty path");
  if (path.frame != Frame::World) throw DomainError("sample_reference: path must be in the world frame");
  ReferencePath out;
  out.hold = path.hold;
  out.points.reserve(static_cast<std::size_t>(cfg.horizon) + 1);

  // nearest point on the polyline, searched only near its start so paths
  // that fold back on themselves do not skip ahead
  PathCursor best;
  double best_d2 = std::numeric_limits<double>::infinity();
  const Vec2 p = x0.position();
  if (path.size() == 1) {
    best_d2 = 0.0;
  }
  double searched = 0.0;
  for (std::size_t k = 0; k + 1 < path.size() && searched <= cfg.projection_window; ++k) {
    const Vec2 a = path.points[k].x.position(), b = path.points[k + 1].x.position();
    const Vec2 ab = b - a;
    searched += ab.norm();
    const double l2 = ab.squaredNorm();
    const double t = l2 > 0.0 ? std::clamp((p - a).dot(ab) / l2, 0.0, 1.0) : 0.0;
    const double d2 = (lerp(a, b, t) - p).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = {k, t};
    }
  }

  PathCursor c = best;
  for (int i = 0; i <= cfg.horizon; ++i) {
    ReferencePoint rp = at(path, c);
    out.points.push_back(rp);
    c = advance(path, c, std::abs(rp.u.v) * cfg.dt);
  }
  // feedforward yaw rate from consecutive reference headings
  for (int i = 0; i < cfg.horizon; ++i) {
    ReferencePoint& a = out.points[static_cast<std::size_t>(i)];
    const ReferencePoint& b = out.points[static_cast<std::size_t>(i) + 1];
    a.u.omega = wrap_angle(b.x.theta - a.x.theta) / cfg.dt;
  }
  out.points.back().u.omega = 0.0;
  return out;
}

ControlInput wheel_to_input(const WheelCommand& w, double mu, const MpcConfig& cfg) {
  return {mu * 0.5 * (w.v_left + w.v_right), (w.v_right - w.v_left) / cfg.track_width};
}

std::vector<RobotState> mpc_rollout(const RobotState& x0, const std::vector<ControlInput>& inputs,
                                    const TractionParams& params, const MpcConfig& cfg) {
  std::vector<RobotState> states;
  states.reserve(inputs.size() + 1);
  states.push_back(x0);
  const TractionParams predict{1.0, params.nu, 0.0};
  for (const ControlInput& u : inputs) states.push_back(step(states.back(), u, predict, cfg.dt));
  return states;
}

double mpc_cost(const RobotState& x0, const std::vector<ControlInput>& inputs,
                const ReferencePath& ref, const TractionParams& params, const MpcConfig& cfg) {
  check_inputs(x0, inputs, ref, cfg);
  return linearize(x0, inputs, ref, params, cfg, false).cost;
}

Eigen::VectorXd mpc_cost_gradient(const RobotState& x0, const std::vector<ControlInput>& inputs,
                                  const ReferencePath& ref, const TractionParams& params,
                                  const MpcConfig& cfg) {
  check_inputs(x0, inputs, ref, cfg);
  const Linearization lin = linearize(x0, inputs, ref, params, cfg, true);
  return 2.0 * lin.jacobian.transpose() * lin.residual;
}

MpcSolution mpc_solve(const RobotState& x0, const ReferencePath& ref, const TractionParams& params,
                      const MpcConfig& cfg, const std::optional<MpcSolution>& warm_start) {
  check_inputs(x0, std::vector<ControlInput>(static_cast<std::size_t>(cfg.horizon)), ref, cfg);
  const double mu = std::max(params.mu, kMuFloor);
  const int n = cfg.horizon;

  std::vector<Eigen::VectorXd> starts;
  if (warm_start && !warm_start->wheels.empty()) {
    // shift by one step, repeating the last command
    Eigen::VectorXd w(2 * n);
    const auto& prev = warm_start->wheels;
    for (int i = 0; i < n; ++i) {
      const WheelCommand& c = prev[std::min(prev.size() - 1, static_cast<std::size_t>(i) + 1)];
      w(2 * i) = c.v_left;
      w(2 * i + 1) = c.v_right;
    }
    starts.push_back(w);
  }
  std::vector<ControlInput> ff;
  for (int i = 0; i < n; ++i) ff.push_back(ref_at(ref, i).u);
  starts.push_back(wheels_of(ff, mu, cfg));
  starts.push_back(Eigen::VectorXd::Zero(2 * n));

  GnResult best;
  best.cost = std::numeric_limits<double>::infinity();
  int total_iters = 0;
  for (const Eigen::VectorXd& w0 : starts) {
    GnResult r = gauss_newton(x0, ref, params, mu, cfg, w0);
    total_iters += r.iterations;
    if (r.cost < best.cost) best = std::move(r);
  }

  MpcSolution sol;
  sol.cost = best.cost;
  sol.converged = best.converged;
  sol.iterations = total_iters;
  for (int i = 0; i < n; ++i) {
    const WheelCommand w{best.w(2 * i), best.w(2 * i + 1)};
    sol.wheels.push_back(w);
    sol.inputs.push_back(wheel_to_input(w, mu, cfg));
  }
  sol.states = mpc_rollout(x0, sol.inputs, params, cfg);
  return sol;
}

Tracker::Tracker(MpcConfig cfg, VehicleConfig vehicle) : cfg_(std::move(cfg)), vehicle_(vehicle) {
  cfg_.v_max = vehicle_.v_max;
  cfg_.track_width = vehicle_.track_width;
  cfg_.validate();
}

void Tracker::reset() {
  warm_.reset();
  last_ = WheelCommand{};
  failures_ = 0;
}

WheelCommand Tracker::tick(const RobotState& estimate, const ReferencePath& path,
                           const TractionParams& params) {
  std::optional<MpcSolution> sol;
  try {
    const ReferencePath ref = sample_reference(path, estimate, cfg_);
    sol = mpc_solve(estimate, ref, params, cfg_, warm_);
  } catch (const DomainError&) {
    sol.reset();
  }
  if (!sol || !sol->converged || !std::isfinite(sol->cost)) {
    ++failures_;
    if (failures_ > kMaxHold) last_ = WheelCommand{};
    if (sol && std::isfinite(sol->cost)) warm_ = std::move(sol);
    return last_;
  }
  failures_ = 0;
  last_ = sol->wheels.front();
  warm_ = std::move(sol);
  return last_;
}

}  // namespace cropnav
