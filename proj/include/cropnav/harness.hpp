#pragma once

// Scenario runner: wires the simulator and the navigation stack at their
// rates, counts recoveries and interventions, and writes logs and plots.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cropnav/control.hpp"
#include "cropnav/estimator.hpp"
#include "cropnav/perception.hpp"
#include "cropnav/sim.hpp"
#include "cropnav/supervisor.hpp"
#include "cropnav/world.hpp"

namespace cropnav {

struct StackConfig {
  bool recovery_enabled = true;
  bool perception_enabled = true;
  MheConfig mhe;
  EkfConfig ekf;
  PerceptionConfig perception;
  SupervisorConfig supervisor;
  MpcConfig mpc;
  // Lower bound on the mu used for wheel compensation, caps the gain at 1/floor.
  double mu_control_floor = 0.5;
  // Lower bound on the nu seen by the controller, keeps turning feasible in its predictions.
  double nu_control_floor = 0.5;
};

struct Scenario {
  std::string name = "custom";
  FieldConfig field;
  std::vector<int> lanes;  // serpentine order; empty means every lane
  StackConfig stack;
  ImuNoise imu;
  LidarConfig lidar;
  VehicleConfig vehicle;
  SimConfig sim;
  double true_delta_theta = 0.0;  // compass mounting offset
  std::uint64_t seed = 1;
  double duration_limit = 3600.0;
  int max_interventions = 0;  // 0 means unlimited
  double base_dt = 0.01;

  void validate() const;
};

std::vector<std::string> builtin_scenarios();
Scenario builtin_scenario(const std::string& name);

Scenario load_scenario(const std::filesystem::path& path);
void save_scenario(const Scenario& s, const std::filesystem::path& path);
// Built-in name or path to a scenario file.
Scenario resolve_scenario(const std::string& name_or_file);

struct TrajectoryRow {
  double t = 0.0;
  RobotState truth;
  RobotState estimate;
  TractionParams params;
  double d_lane = 0.0;
  double phi = 0.0;
  std::string mode;
  WheelCommand wheels;
};

struct EventRow {
  double t = 0.0;
  std::string event;
  double x = 0.0;
  double y = 0.0;
  std::string detail;
};

struct RunMetrics {
  double distance_m = 0.0;
  int recoveries = 0;
  int interventions = 0;
  std::optional<double> meters_per_intervention;
  bool completion = false;
  double wall_time = 0.0;
  double sim_time = 0.0;
  int classifier_flips = 0;
};

struct RunResult {
  RunMetrics metrics;
  std::vector<TrajectoryRow> trajectory;
  std::vector<EventRow> events;
  FieldMap field;
  WaypointPlan plan;
};

RunResult run_scenario(const Scenario& s);

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, const std::filesystem::path& path);
void write_events_csv(const std::vector<EventRow>& rows, const std::filesystem::path& path);
void write_metrics(const RunMetrics& m, const std::filesystem::path& path);
// scenario.ini, trajectory.csv, events.csv, metrics.json and plot.svg.
void write_run(const Scenario& s, const RunResult& r, const std::filesystem::path& dir);

std::vector<TrajectoryRow> read_trajectory_csv(const std::filesystem::path& path);
std::vector<EventRow> read_events_csv(const std::filesystem::path& path);

struct AblationRow {
  std::string scenario;
  std::uint64_t seed = 0;
  RunMetrics metrics;
};

struct AblationTotal {
  std::string scenario;
  int runs = 0;
  double distance_m = 0.0;
  int recoveries = 0;
  int interventions = 0;
  std::optional<double> meters_per_intervention;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::vector<AblationTotal> totals;  // one per scenario, in input order
};

// Runs every scenario with every seed; runs execute on `threads` workers
// (0 = hardware concurrency) and results are ordered deterministically.
AblationTable run_ablation(const std::vector<Scenario>& scenarios, const std::vector<std::uint64_t>& seeds,
                           unsigned threads = 0,
                           const std::optional<std::filesystem::path>& run_dir = std::nullopt);

std::string format_ablation_text(const AblationTable& table);
void write_ablation_csv(const AblationTable& table, const std::filesystem::path& path);

std::string render_svg(const std::vector<TrajectoryRow>& trajectory, const FieldMap& field,
                       const std::vector<EventRow>& events);
// Reads a run directory and writes plot.svg into it.
std::filesystem::path emit_plots(const std::filesystem::path& run_dir);

}  // namespace cropnav
