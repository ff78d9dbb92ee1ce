#include "cropnav/harness.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

namespace cropnav {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

void Scenario::validate() const {
  field.validate();
  vehicle.validate();
  stack.mhe.validate();
  stack.mpc.validate();
  stack.perception.validate();
  stack.supervisor.validate();
  if (!(base_dt > 0.0)) throw ConfigError("scenario: base_dt must be positive");
  if (!(duration_limit > 0.0)) throw ConfigError("scenario: duration_limit must be positive");
  if (max_interventions < 0) throw ConfigError("scenario: max_interventions must be non-negative");
  if (!(stack.mu_control_floor >= kMuFloor && stack.mu_control_floor <= 1.0)) {
    throw ConfigError("scenario: mu_control_floor outside [0.05, 1]");
  }
  if (!(stack.nu_control_floor > 0.0 && stack.nu_control_floor <= 1.0)) {
    throw ConfigError("scenario: nu_control_floor outside (0, 1]");
  }
  if (lidar.beams < 1 || !(lidar.fov > 0.0) || !(lidar.max_range > 0.0)) {
    throw ConfigError("scenario: invalid lidar configuration");
  }
}

namespace {

Scenario serpentine_base(const std::string& name) {
  Scenario s;
  s.name = name;
  s.field.row_groups = {7};
  s.field.row_length = 90.0;
  s.field.gap_prob = 0.02;
  s.field.canopy_overhang = 1.0;
  s.field.grass.patches_per_headland = 3;
  s.lanes = {0, 1, 2, 3, 4, 5};
  s.lidar.outlier_rate = 0.02;
  s.duration_limit = 3000.0;
  return s;
}

}  // namespace

std::vector<std::string> builtin_scenarios() {
  return {"cropnav_recovery", "cropnav_norecovery", "gnss_only", "long_path", "benign"};
}

Scenario builtin_scenario(const std::string& name) {
  if (name == "cropnav_recovery") return serpentine_base(name);
  if (name == "cropnav_norecovery") {
    Scenario s = serpentine_base(name);
    s.stack.recovery_enabled = false;
    return s;
  }
  if (name == "gnss_only") {
    Scenario s = serpentine_base(name);
    s.stack.perception_enabled = false;
    s.max_interventions = 5;
    return s;
  }
  if (name == "long_path") {
    Scenario s = serpentine_base(name);
    // twelve lanes in the first group, an open-field transit, two more lanes
    s.field.row_groups = {13, 3};
    s.field.row_length = 80.0;
    s.lanes.resize(14);
    std::iota(s.lanes.begin(), s.lanes.end(), 0);
    s.duration_limit = 6000.0;
    return s;
  }
  if (name == "benign") {
    Scenario s;
    s.name = name;
    s.field.row_groups = {3};
    s.field.row_length = 30.0;
    s.field.open_sky = GnssQuality{0.0, Vec2::Zero(), 0.0, 30.0, 0.0, false, false};
    s.field.canopy = GnssQuality{0.0, Vec2::Zero(), 0.0, 30.0, 0.0, true, false};
    s.imu = ImuNoise{0.0, 0.0, 0.0};
    s.lidar.range_sigma = 0.0;
    s.lidar.outlier_rate = 0.0;
    s.lanes = {0, 1};
    s.duration_limit = 600.0;
    return s;
  }
  throw ConfigError("unknown scenario: " + name);
}

namespace {

// Shortest text that parses back to the same double.
std::string shortest(double v) {
  std::array<char, 32> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("scenario: bad integer list '" + text + "'");
    }
  }
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

// "row:from:to" entries separated by ';'
std::vector<GapOverride> parse_gaps(const std::string& text) {
  std::vector<GapOverride> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    GapOverride g;
    char c1 = 0, c2 = 0;
    std::stringstream is(item);
    if (!(is >> g.row >> c1 >> g.from >> c2 >> g.to) || c1 != ':' || c2 != ':') {
      throw ConfigError("scenario: bad gap entry '" + item + "'");
    }
    out.push_back(g);
  }
  return out;
}

std::string format_gaps(const std::vector<GapOverride>& gaps) {
  std::ostringstream os;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    os << (i ? ";" : "") << gaps[i].row << ':' << shortest(gaps[i].from) << ':' << shortest(gaps[i].to);
  }
  return os.str();
}

template <typename T>
void read(const pt::ptree& tree, const std::string& key, T& target) {
  const auto node = tree.get_child_optional(key);
  if (!node) return;
  const auto v = node->get_value_optional<T>();
  if (!v) throw ConfigError("scenario: bad value for " + key + ": '" + node->data() + "'");
  target = *v;
}

}  // namespace

Scenario load_scenario(const fs::path& path) {
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  Scenario s;
  if (auto base = tree.get_optional<std::string>("run.base")) s = builtin_scenario(*base);
  s.name = path.stem().string();
  read(tree, "run.name", s.name);

  FieldConfig& f = s.field;
  if (auto rows = tree.get_optional<std::string>("field.rows")) f.row_groups = parse_int_list(*rows);
  read(tree, "field.row_length_m", f.row_length);
  read(tree, "field.lane_width_m", f.lane_width);
  read(tree, "field.plant_spacing_m", f.plant_spacing);
  read(tree, "field.stem_radius_m", f.stem_radius);
  read(tree, "field.gap_prob", f.gap_prob);
  read(tree, "field.group_spacing_m", f.group_spacing);
  read(tree, "field.headland_margin_m", f.headland_margin);
  read(tree, "field.canopy_overhang_m", f.canopy_overhang);
  read(tree, "field.grass_patches", f.grass.patches_per_headland);
  if (auto gaps = tree.get_optional<std::string>("field.gaps")) f.gaps = parse_gaps(*gaps);
  if (auto lanes = tree.get_optional<std::string>("field.lanes")) s.lanes = parse_int_list(*lanes);

  read(tree, "noise.gnss_open_sigma_m", f.open_sky.sigma);
  read(tree, "noise.gnss_canopy_sigma_m", f.canopy.sigma);
  read(tree, "noise.gnss_canopy_bias_m", f.canopy.bias_sigma);
  read(tree, "noise.gnss_bias_tau_s", f.canopy.bias_tau);
  f.open_sky.bias_tau = f.canopy.bias_tau;
  read(tree, "noise.gnss_canopy_dropout", f.canopy.dropout_prob);
  read(tree, "noise.compass_sigma_rad", s.imu.compass_sigma);
  read(tree, "noise.gyro_sigma", s.imu.gyro_sigma);
  read(tree, "noise.accel_sigma", s.imu.accel_sigma);
  read(tree, "noise.lidar_sigma_m", s.lidar.range_sigma);
  read(tree, "noise.lidar_outlier_rate", s.lidar.outlier_rate);
  read(tree, "noise.compass_offset_rad", s.true_delta_theta);

  StackConfig& st = s.stack;
  read(tree, "stack.recovery_enabled", st.recovery_enabled);
  read(tree, "stack.perception_enabled", st.perception_enabled);
  read(tree, "stack.mu_failure", st.supervisor.mu_failure);
  read(tree, "stack.n_inrow", st.perception.n_inrow);
  read(tree, "stack.cruise_speed", st.supervisor.cruise_speed);
  read(tree, "stack.mu_control_floor", st.mu_control_floor);
  read(tree, "stack.nu_control_floor", st.nu_control_floor);
  read(tree, "stack.mpc_horizon", st.mpc.horizon);
  read(tree, "stack.mpc_dt", st.mpc.dt);
  read(tree, "stack.mpc_max_iters", st.mpc.max_iters);
  read(tree, "stack.mhe_horizon", st.mhe.horizon);
  read(tree, "stack.mhe_max_iters", st.mhe.max_iters);
  st.supervisor.recovery_window = st.mhe.horizon * 0.2;

  read(tree, "run.seed", s.seed);
  read(tree, "run.duration_limit_s", s.duration_limit);
  read(tree, "run.max_interventions", s.max_interventions);
  s.validate();
  return s;
}

void save_scenario(const Scenario& s, const fs::path& path) {
  pt::ptree tree;
  auto put = [&tree](const std::string& key, const auto& v) {
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
      tree.put(key, shortest(v));
    } else {
      tree.put(key, v);
    }
  };
  put("field.rows", join(s.field.row_groups));
  put("field.row_length_m", s.field.row_length);
  put("field.lane_width_m", s.field.lane_width);
  put("field.plant_spacing_m", s.field.plant_spacing);
  put("field.stem_radius_m", s.field.stem_radius);
  put("field.gap_prob", s.field.gap_prob);
  put("field.group_spacing_m", s.field.group_spacing);
  put("field.headland_margin_m", s.field.headland_margin);
  put("field.canopy_overhang_m", s.field.canopy_overhang);
  put("field.grass_patches", s.field.grass.patches_per_headland);
  put("field.gaps", format_gaps(s.field.gaps));
  put("field.lanes", join(s.lanes));

  put("noise.gnss_open_sigma_m", s.field.open_sky.sigma);
  put("noise.gnss_canopy_sigma_m", s.field.canopy.sigma);
  put("noise.gnss_canopy_bias_m", s.field.canopy.bias_sigma);
  put("noise.gnss_bias_tau_s", s.field.canopy.bias_tau);
  put("noise.gnss_canopy_dropout", s.field.canopy.dropout_prob);
  put("noise.compass_sigma_rad", s.imu.compass_sigma);
  put("noise.gyro_sigma", s.imu.gyro_sigma);
  put("noise.accel_sigma", s.imu.accel_sigma);
  put("noise.lidar_sigma_m", s.lidar.range_sigma);
  put("noise.lidar_outlier_rate", s.lidar.outlier_rate);
  put("noise.compass_offset_rad", s.true_delta_theta);

  put("stack.recovery_enabled", s.stack.recovery_enabled);
  put("stack.perception_enabled", s.stack.perception_enabled);
  put("stack.mu_failure", s.stack.supervisor.mu_failure);
  put("stack.n_inrow", s.stack.perception.n_inrow);
  put("stack.cruise_speed", s.stack.supervisor.cruise_speed);
  put("stack.mu_control_floor", s.stack.mu_control_floor);
  put("stack.nu_control_floor", s.stack.nu_control_floor);
  put("stack.mpc_horizon", s.stack.mpc.horizon);
  put("stack.mpc_dt", s.stack.mpc.dt);
  put("stack.mpc_max_iters", s.stack.mpc.max_iters);
  put("stack.mhe_horizon", s.stack.mhe.horizon);
  put("stack.mhe_max_iters", s.stack.mhe.max_iters);

  put("run.name", s.name);
  put("run.seed", s.seed);
  put("run.duration_limit_s", s.duration_limit);
  put("run.max_interventions", s.max_interventions);
  pt::ini_parser::write_ini(path.string(), tree);
}

Scenario resolve_scenario(const std::string& name_or_file) {
  const auto names = builtin_scenarios();
  if (std::find(names.begin(), names.end(), name_or_file) != names.end()) {
    return builtin_scenario(name_or_file);
  }
  if (fs::exists(name_or_file)) return load_scenario(name_or_file);
  throw ConfigError("no built-in scenario or file named '" + name_or_file + "'");
}

namespace {

int ticks_per(double period, double dt) {
  const int n = static_cast<int>(std::lround(period / dt));
  if (n < 1) throw ConfigError("scenario: sensor period shorter than base_dt");
  return n;
}

// Nearest collision-free pose on the active segment, heading along it.
RobotState reset_pose(const SimState& sim, const Supervisor& sup, const FieldMap& field,
                      const VehicleConfig& vehicle) {
  const WaypointPlan& plan = sup.waypoints().plan();
  auto [a, b] = sup.waypoints().active_segment();
  if ((b - a).norm() < 1e-9 && plan.size() >= 2) {
    a = plan.waypoints[0].point;
    b = plan.waypoints[1].point;
  }
  const Vec2 ab = b - a;
  const double len = ab.norm();
  const Vec2 dir = len > 0.0 ? Vec2(ab / len) : Vec2(std::cos(sim.truth.theta), std::sin(sim.truth.theta));
  double s = len > 0.0 ? std::clamp((sim.truth.position() - a).dot(dir), 0.0, len) : 0.0;
  const double heading = std::atan2(dir.y(), dir.x());
  RobotState pose;
  for (int k = 0; k < 200; ++k, s += 0.1) {
    const Vec2 p = a + s * dir;
    pose = {p.x(), p.y(), heading};
    if (!collision_query(field, pose, vehicle).hit) break;
  }
  return pose;
}

}  // namespace

RunResult run_scenario(const Scenario& sc) {
  sc.validate();
  const auto wall0 = std::chrono::steady_clock::now();
  RunResult res;
  res.field = build_field(sc.field, sc.seed);
  const FieldMap& field = res.field;
  std::vector<int> lanes = sc.lanes;
  if (lanes.empty()) {
    lanes.resize(field.lanes.size());
    std::iota(lanes.begin(), lanes.end(), 0);
  }
  res.plan = serpentine_plan(field, lanes);

  GnssChannel gnss(make_stream(sc.seed, "gnss"));
  RandomStream imu_rng = make_stream(sc.seed, "imu");
  RandomStream lidar_rng = make_stream(sc.seed, "lidar");

  const Vec2 p0 = res.plan.waypoints[0].point;
  const Vec2 d0 = res.plan.waypoints[1].point - p0;
  const RobotState start{p0.x(), p0.y(), std::atan2(d0.y(), d0.x())};

  SimState sim;
  sim.truth = start;
  StateEstimator est(sc.stack.mhe, sc.stack.ekf);
  est.reset(start, TractionParams{}, 0.0);
  LaneTracker lane(sc.stack.perception);
  SupervisorConfig sup_cfg = sc.stack.supervisor;
  Supervisor sup(res.plan, sup_cfg);
  Tracker tracker(sc.stack.mpc, sc.vehicle);

  const double dt = sc.base_dt;
  const int imu_every = ticks_per(0.02, dt);
  const int ctrl_every = ticks_per(0.05, dt);
  const int lidar_every = ticks_per(0.1, dt);
  const int gnss_every = ticks_per(0.2, dt);

  WheelCommand wheels;
  ControlInput body;
  SimState imu_prev = sim;
  double last_gnss_t = 0.0;
  bool perception = sc.stack.perception_enabled;
  RunMetrics& m = res.metrics;

  auto event = [&](double t, const std::string& name, const std::string& detail) {
    res.events.push_back({t, name, sim.truth.p_x, sim.truth.p_y, detail});
  };

  for (long k = 0;; ++k) {
    const double t = static_cast<double>(k) * dt;
    if (k > 0) {
      if (k % imu_every == 0) {
        const ImuSample imu = sample_imu(sim, imu_prev, sc.true_delta_theta, sc.imu, imu_rng);
        est.on_imu(imu);
        imu_prev = sim;
      }
      if (k % gnss_every == 0) {
        const GnssFix fix = gnss.sample(sim, field, t - last_gnss_t);
        last_gnss_t = t;
        est.on_gnss(fix);
      }
      if (perception && k % lidar_every == 0) {
        const PointCloud2D cloud = sample_lidar(sim, field, sc.lidar, lidar_rng);
        lane.on_scan(cloud, body, est.params());
      }
    }

    if (k % ctrl_every == 0) {
      LaneEstimate lane_now = lane.estimate();
      if (lane_now.initialized && t > lane_now.timestamp) {
        lane_now = lane_predict(lane_now, body, est.params(), t - lane_now.timestamp, sc.stack.perception);
      }
      const auto& sol = est.last_solution();
      SupervisorInputs in;
      in.t = t;
      in.estimate = est.estimate();
      in.params = est.params();
      in.mhe_valid = sol.has_value() && sol->converged;
      in.in_row = lane.in_row();
      in.lane = &lane_now;
      in.perception_enabled = perception;
      in.recovery_enabled = sc.stack.recovery_enabled;
      in.truth = sim.truth.position();
      const SupervisorOutput out = sup.tick(in);
      for (const SupervisorEvent& e : out.events) event(t, e.event, e.detail);

      std::string mode = mode_name(out.mode);
      if (out.intervention) {
        ++m.interventions;
        sim.truth = reset_pose(sim, sup, field, sc.vehicle);
        sim.stuck = false;
        sim.velocity = Vec2::Zero();
        imu_prev = sim;
        est.reset(sim.truth, TractionParams{}, t);
        bool in_row_now = false;
        if (perception) {
          in_row_now = classify_in_row(sample_lidar(sim, field, sc.lidar, lidar_rng), sc.stack.perception);
        }
        lane.reset(in_row_now);
        tracker.reset();
        sup.reset_after_intervention(t, in_row_now);
        wheels = WheelCommand{};
        mode = "Reset";
      } else {
        TractionParams ctrl = est.params();
        ctrl.mu = std::max(ctrl.mu, sc.stack.mu_control_floor);
        ctrl.nu = std::max(ctrl.nu, sc.stack.nu_control_floor);
        wheels = tracker.tick(est.estimate(), out.path, ctrl);
      }
      body = inverse_wheel(wheels, sc.vehicle);
      est.on_command(body, t);

      TrajectoryRow row;
      row.t = t;
      row.truth = sim.truth;
      row.estimate = est.estimate();
      row.params = est.params();
      row.d_lane = lane_now.d_lane;
      row.phi = lane_now.phi;
      row.mode = mode;
      row.wheels = wheels;
      res.trajectory.push_back(row);

      if (out.finished) {
        m.completion = true;
        event(t, "complete", "");
        break;
      }
      if (sc.max_interventions > 0 && m.interventions >= sc.max_interventions) {
        event(t, "stop", "intervention limit");
        break;
      }
      if (t >= sc.duration_limit) {
        event(t, "stop", "duration limit");
        break;
      }
    }

    const bool was_stuck = sim.stuck;
    sim = sim_step(sim, wheels, field, sc.vehicle, dt, sc.sim);
    sim.clock = static_cast<double>(k + 1) * dt;
    if (sim.stuck && !was_stuck) event(sim.clock, "collision", "");
  }

  m.distance_m = sim.path_length;
  m.recoveries = sup.recoveries();
  if (m.interventions > 0) m.meters_per_intervention = m.distance_m / m.interventions;
  m.sim_time = res.trajectory.empty() ? 0.0 : res.trajectory.back().t;
  m.classifier_flips = lane.flips();
  m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return res;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  // avoid "-0.000000" so equal runs print equal text
  if (std::string(buf) == "-0.000000") return "0.000000";
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

}  // namespace

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, const fs::path& path) {
  std::ofstream os = open_out(path);
  os << "t,truth_x,truth_y,truth_theta,est_x,est_y,est_theta,mu_hat,nu_hat,dtheta_hat,d_lane,phi,mode,v_left,v_right\n";
  for (const TrajectoryRow& r : rows) {
    os << fmt(r.t) << ',' << fmt(r.truth.p_x) << ',' << fmt(r.truth.p_y) << ',' << fmt(r.truth.theta) << ','
       << fmt(r.estimate.p_x) << ',' << fmt(r.estimate.p_y) << ',' << fmt(r.estimate.theta) << ','
       << fmt(r.params.mu) << ',' << fmt(r.params.nu) << ',' << fmt(r.params.delta_theta) << ','
       << fmt(r.d_lane) << ',' << fmt(r.phi) << ',' << r.mode << ',' << fmt(r.wheels.v_left) << ','
       << fmt(r.wheels.v_right) << '\n';
  }
}

void write_events_csv(const std::vector<EventRow>& rows, const fs::path& path) {
  std::ofstream os = open_out(path);
  os << "t,event,x,y,detail\n";
  for (const EventRow& e : rows) {
    os << fmt(e.t) << ',' << e.event << ',' << fmt(e.x) << ',' << fmt(e.y) << ',' << e.detail << '\n';
  }
}

void write_metrics(const RunMetrics& m, const fs::path& path) {
  nlohmann::ordered_json j;
  j["distance_m"] = m.distance_m;
  j["recoveries"] = m.recoveries;
  j["interventions"] = m.interventions;
  j["meters_per_intervention"] = m.meters_per_intervention ? nlohmann::ordered_json(*m.meters_per_intervention)
                                                           : nlohmann::ordered_json(nullptr);
  j["completion"] = m.completion;
  j["sim_time_s"] = m.sim_time;
  j["classifier_flips"] = m.classifier_flips;
  j["wall_time_s"] = m.wall_time;
  std::ofstream os = open_out(path);
  os << j.dump(2) << '\n';
}

void write_run(const Scenario& s, const RunResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  save_scenario(s, dir / "scenario.ini");
  write_trajectory_csv(r.trajectory, dir / "trajectory.csv");
  write_events_csv(r.events, dir / "events.csv");
  write_metrics(r.metrics, dir / "metrics.json");
  std::ofstream os = open_out(dir / "plot.svg");
  os << render_svg(r.trajectory, r.field, r.events);
}

std::vector<TrajectoryRow> read_trajectory_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<TrajectoryRow> rows;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    const auto f = split_csv(line);
    if (f.size() != 15) throw std::runtime_error("malformed trajectory row: " + line);
    TrajectoryRow r;
    r.t = std::stod(f[0]);
    r.truth = {std::stod(f[1]), std::stod(f[2]), std::stod(f[3])};
    r.estimate = {std::stod(f[4]), std::stod(f[5]), std::stod(f[6])};
    r.params = {std::stod(f[7]), std::stod(f[8]), std::stod(f[9])};
    r.d_lane = std::stod(f[10]);
    r.phi = std::stod(f[11]);
    r.mode = f[12];
    r.wheels = {std::stod(f[13]), std::stod(f[14])};
    rows.push_back(r);
  }
  return rows;
}

std::vector<EventRow> read_events_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<EventRow> rows;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    const auto f = split_csv(line);
    if (f.size() < 4) throw std::runtime_error("malformed event row: " + line);
    rows.push_back({std::stod(f[0]), f[1], std::stod(f[2]), std::stod(f[3]), f.size() > 4 ? f[4] : ""});
  }
  return rows;
}

AblationTable run_ablation(const std::vector<Scenario>& scenarios, const std::vector<std::uint64_t>& seeds,
                           unsigned threads, const std::optional<fs::path>& run_dir) {
  struct Job {
    std::size_t scenario;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    for (std::uint64_t seed : seeds) jobs.push_back({i, seed});
  }
  std::vector<RunMetrics> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;

  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      try {
        Scenario s = scenarios[jobs[j].scenario];
        s.seed = jobs[j].seed;
        RunResult r = run_scenario(s);
        if (run_dir) write_run(s, r, *run_dir / (s.name + "_seed" + std::to_string(s.seed)));
        results[j] = r.metrics;
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  unsigned n = threads ? threads : std::max(1u, std::thread::hardware_concurrency());
  n = std::min<unsigned>(n, static_cast<unsigned>(std::max<std::size_t>(1, jobs.size())));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (std::thread& th : pool) th.join();
  if (error) std::rethrow_exception(error);

  AblationTable table;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    table.rows.push_back({scenarios[jobs[j].scenario].name, jobs[j].seed, results[j]});
  }
  for (const Scenario& s : scenarios) {
    AblationTotal tot;
    tot.scenario = s.name;
    for (const AblationRow& r : table.rows) {
      if (r.scenario != s.name) continue;
      ++tot.runs;
      tot.distance_m += r.metrics.distance_m;
      tot.recoveries += r.metrics.recoveries;
      tot.interventions += r.metrics.interventions;
    }
    if (tot.interventions > 0) tot.meters_per_intervention = tot.distance_m / tot.interventions;
    table.totals.push_back(tot);
  }
  return table;
}

namespace {

std::string mpi_text(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", *v);
  return buf;
}

}  // namespace

std::string format_ablation_text(const AblationTable& table) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-26s %6s %12s %11s %14s %10s %9s\n", "scenario", "seed", "distance_m",
                "recoveries", "interventions", "m/interv.", "complete");
  os << line;
  for (const AblationRow& r : table.rows) {
    std::snprintf(line, sizeof(line), "%-26s %6llu %12.1f %11d %14d %10s %9s\n", r.scenario.c_str(),
                  static_cast<unsigned long long>(r.seed), r.metrics.distance_m, r.metrics.recoveries,
                  r.metrics.interventions, mpi_text(r.metrics.meters_per_intervention).c_str(),
                  r.metrics.completion ? "yes" : "no");
    os << line;
  }
  for (const AblationTotal& t : table.totals) {
    std::snprintf(line, sizeof(line), "%-26s %6s %12.1f %11d %14d %10s %9s\n", ("Total " + t.scenario).c_str(),
                  std::to_string(t.runs).c_str(), t.distance_m, t.recoveries, t.interventions,
                  mpi_text(t.meters_per_intervention).c_str(), "");
    os << line;
  }
  return os.str();
}

void write_ablation_csv(const AblationTable& table, const fs::path& path) {
  std::ofstream os = open_out(path);
  os << "scenario,seed,distance_m,recoveries,interventions,meters_per_intervention,completion\n";
  for (const AblationRow& r : table.rows) {
    os << r.scenario << ',' << r.seed << ',' << fmt(r.metrics.distance_m) << ',' << r.metrics.recoveries << ','
       << r.metrics.interventions << ','
       << (r.metrics.meters_per_intervention ? fmt(*r.metrics.meters_per_intervention) : "-") << ','
       << (r.metrics.completion ? 1 : 0) << '\n';
  }
  for (const AblationTotal& t : table.totals) {
    os << "Total " << t.scenario << ',' << t.runs << ',' << fmt(t.distance_m) << ',' << t.recoveries << ','
       << t.interventions << ',' << (t.meters_per_intervention ? fmt(*t.meters_per_intervention) : "-") << ",\n";
  }
}

std::string render_svg(const std::vector<TrajectoryRow>& trajectory, const FieldMap& field,
                       const std::vector<EventRow>& events) {
  Vec2 lo(-field.headland_margin - 2.0, -2.0);
  Vec2 hi(field.config.row_length + field.headland_margin + 2.0, 2.0);
  for (const Row& r : field.rows) hi.y() = std::max(hi.y(), r.start.y() + 2.0);
  for (const TrajectoryRow& r : trajectory) {
    lo = lo.cwiseMin(r.truth.position() - Vec2(1.0, 1.0));
    hi = hi.cwiseMax(r.truth.position() + Vec2(1.0, 1.0));
  }
  // lateral axis is stretched so the lanes stay readable
  const double width = 1600.0, margin = 40.0;
  const double sx = (width - 2 * margin) / (hi.x() - lo.x());
  const double sy = std::max(sx, 500.0 / (hi.y() - lo.y()));
  const double height = (hi.y() - lo.y()) * sy + 2 * margin;
  auto px = [&](const Vec2& p) {
    return Vec2(margin + (p.x() - lo.x()) * sx, height - margin - (p.y() - lo.y()) * sy);
  };
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (const Polygon& poly : field.canopy_polygons) {
    os << "<polygon fill=\"#e8f4e0\" stroke=\"none\" points=\"";
    for (const Vec2& v : poly.vertices) {
      const Vec2 q = px(v);
      os << q.x() << ',' << q.y() << ' ';
    }
    os << "\"/>\n";
  }
  for (const FrictionZone& z : field.friction_zones) {
    os << "<polygon fill=\"#f4ecd0\" stroke=\"none\" points=\"";
    for (const Vec2& v : z.area.vertices) {
      const Vec2 q = px(v);
      os << q.x() << ',' << q.y() << ' ';
    }
    os << "\"/>\n";
  }
  os << "<g fill=\"#2e7d32\">\n";
  for (const Row& r : field.rows) {
    for (const Stem& s : r.stems) {
      const Vec2 q = px(s.center);
      os << "<circle cx=\"" << q.x() << "\" cy=\"" << q.y() << "\" r=\"0.8\"/>\n";
    }
  }
  os << "</g>\n";
  auto polyline = [&](bool truth, const char* style) {
    if (trajectory.empty()) return;
    os << "<polyline fill=\"none\" " << style << " points=\"";
    for (const TrajectoryRow& r : trajectory) {
      const Vec2 q = px(truth ? r.truth.position() : r.estimate.position());
      os << q.x() << ',' << q.y() << ' ';
    }
    os << "\"/>\n";
  };
  polyline(false, "stroke=\"#1e88e5\" stroke-width=\"1\" stroke-dasharray=\"4,3\"");
  polyline(true, "stroke=\"black\" stroke-width=\"1.2\"");
  for (const EventRow& e : events) {
    const Vec2 q = px(Vec2(e.x, e.y));
    if (e.event == "recovery") {
      os << "<circle cx=\"" << q.x() << "\" cy=\"" << q.y() << "\" r=\"6\" fill=\"none\" stroke=\"orange\" stroke-width=\"2\"/>\n";
    } else if (e.event == "intervention") {
      os << "<path d=\"M" << q.x() - 6 << ',' << q.y() - 6 << " L" << q.x() + 6 << ',' << q.y() + 6 << " M"
         << q.x() - 6 << ',' << q.y() + 6 << " L" << q.x() + 6 << ',' << q.y() - 6
         << "\" stroke=\"red\" stroke-width=\"2.5\"/>\n";
    }
  }
  os << "<text x=\"" << margin << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">"
     << "truth (black), estimate (blue dashed), recoveries (orange), interventions (red); lateral axis stretched"
     << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

fs::path emit_plots(const fs::path& run_dir) {
  const Scenario s = load_scenario(run_dir / "scenario.ini");
  const FieldMap field = build_field(s.field, s.seed);
  const auto traj = read_trajectory_csv(run_dir / "trajectory.csv");
  if (traj.empty()) throw std::runtime_error("empty trajectory log in " + run_dir.string());
  const auto events = read_events_csv(run_dir / "events.csv");
  const fs::path out = run_dir / "plot.svg";
  std::ofstream os = open_out(out);
  os << render_svg(traj, field, events);
  return out;
}

}  // namespace cropnav
