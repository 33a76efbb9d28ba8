#pragma once
// Experiment plumbing: configuration, closed-loop repetitions, rollouts for the tuner and the
// BO baseline, log persistence and the comparison report.

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nmpc_tune/bo.hpp"
#include "nmpc_tune/errors.hpp"
#include "nmpc_tune/geometry.hpp"
#include "nmpc_tune/kpi.hpp"
#include "nmpc_tune/nmpc.hpp"
#include "nmpc_tune/robot.hpp"
#include "nmpc_tune/tuner.hpp"

namespace nmpc_tune {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct BoSettings {
  int budget = 100;
  int init_design = 10;
  double jitter = 0.01;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  DhParameters dh = DhParameters::ur10e();
  JointLimits limits = JointLimits::ur10e();
  JointState home = (JointState() << 0.0, -1.2, 1.6, -1.97, -1.57, 0.0).finished();

  double edge_length = 0.08;
  Vec3 core_offset = Vec3(-0.85, -0.17, 0.40);
  WindingSequence sequence = WindingSequence::tetrahedron_default();
  double speed = 0.02;
  CornerConfig corner;
  TaperConfig taper;

  NmpcConfig nmpc;
  PlannerWeights planner;
  KpiTargets targets;
  double sat_tol = 0.01;
  TunerConfig tuner;
  WeightLayout layout = WeightLayout::Shared;
  WeightMatrices initial_weights = WeightMatrices::identity();
  WeightMatrices track_weights = WeightMatrices::identity();
  BoSettings bo;
  std::string output_dir = "out";
  std::uint64_t seed = 1;

  static ExperimentConfig load(const std::string& path);
};

namespace detail {

template <int N>
Eigen::Matrix<double, N, 1> json_vec(const json& j, const char* what) {
  if (!j.is_array() || static_cast<int>(j.size()) != N)
    throw ConfigError(std::string(what) + " must be an array of " + std::to_string(N) + " numbers");
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) v[i] = j.at(i).get<double>();
  return v;
}

inline VectorXd json_vecx(const json& j, const char* what) {
  if (!j.is_array()) throw ConfigError(std::string(what) + " must be an array");
  VectorXd v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j.at(i).get<double>();
  return v;
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open config file: " + p.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("invalid JSON in " + p.string() + ": " + e.what());
  }
}

inline WeightMatrices json_weights(const json& j) {
  WeightMatrices w;
  const json& q = j.at("q");
  const json& r = j.at("r");
  if (q.is_number()) w.q_diag.setConstant(q.get<double>());
  else w.q_diag = json_vec<3>(q, "q");
  if (r.is_number()) w.r_diag.setConstant(r.get<double>());
  else w.r_diag = json_vec<6>(r, "r");
  return w;
}

inline void apply_core_config(const json& c, ExperimentConfig& cfg) {
  cfg.edge_length = c.value("edge_length_m", cfg.edge_length);
  if (c.contains("offset_m")) cfg.core_offset = json_vec<3>(c["offset_m"], "offset_m");
  if (c.contains("sequence")) cfg.sequence.order = c["sequence"].get<std::vector<int>>();
  cfg.sequence.repetitions = c.value("repetitions", cfg.sequence.repetitions);
  cfg.speed = c.value("speed_mps", cfg.speed);
  if (c.contains("corner")) {
    cfg.corner.window = c["corner"].value("window_m", cfg.corner.window);
    cfg.corner.slowdown = c["corner"].value("slowdown", cfg.corner.slowdown);
  }
  if (c.contains("taper")) {
    cfg.taper.peak = c["taper"].value("peak", cfg.taper.peak);
    cfg.taper.window = c["taper"].value("window_m", cfg.taper.window);
  }
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::load(const std::string& path) {
  using detail::json_vec;
  ExperimentConfig cfg;
  const fs::path cfg_path(path);
  const fs::path base = cfg_path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  const json j = detail::read_json(cfg_path);
  try {
    if (j.contains("robot")) {
      const json& r = j["robot"];
      if (r.contains("dh_csv")) cfg.dh = DhParameters::from_csv(resolve(r["dh_csv"].get<std::string>()).string());
      if (r.contains("home_q")) cfg.home = json_vec<6>(r["home_q"], "home_q");
      if (r.contains("q_min")) cfg.limits.q_min = json_vec<6>(r["q_min"], "q_min");
      if (r.contains("q_max")) cfg.limits.q_max = json_vec<6>(r["q_max"], "q_max");
      if (r.contains("qdot_max")) {
        cfg.limits.qdot_max = json_vec<6>(r["qdot_max"], "qdot_max");
        cfg.limits.qdot_min = -cfg.limits.qdot_max;
      }
      if (r.contains("qdot_min")) cfg.limits.qdot_min = json_vec<6>(r["qdot_min"], "qdot_min");
    }
    if (j.contains("core_config"))
      detail::apply_core_config(detail::read_json(resolve(j["core_config"].get<std::string>())), cfg);
    if (j.contains("core")) detail::apply_core_config(j["core"], cfg);
    if (j.contains("nmpc")) {
      const json& n = j["nmpc"];
      cfg.nmpc.horizon = n.value("horizon", cfg.nmpc.horizon);
      cfg.nmpc.ts = n.value("ts_s", cfg.nmpc.ts);
      cfg.nmpc.solver.kkt_tol = n.value("kkt_tol", cfg.nmpc.solver.kkt_tol);
      cfg.nmpc.solver.max_sqp_iters = n.value("max_sqp_iters", cfg.nmpc.solver.max_sqp_iters);
      cfg.nmpc.solver.armijo_c = n.value("armijo_c", cfg.nmpc.solver.armijo_c);
      cfg.nmpc.solver.backtrack = n.value("backtrack", cfg.nmpc.solver.backtrack);
      cfg.nmpc.solver.min_step = n.value("min_step", cfg.nmpc.solver.min_step);
      cfg.nmpc.solver.state_penalty = n.value("state_penalty", cfg.nmpc.solver.state_penalty);
    }
    if (j.contains("weight_bounds")) {
      const json& b = j["weight_bounds"];
      cfg.nmpc.weight_bounds.q_min = b.value("q_min", cfg.nmpc.weight_bounds.q_min);
      cfg.nmpc.weight_bounds.q_max = b.value("q_max", cfg.nmpc.weight_bounds.q_max);
      cfg.nmpc.weight_bounds.r_min = b.value("r_min", cfg.nmpc.weight_bounds.r_min);
      cfg.nmpc.weight_bounds.r_max = b.value("r_max", cfg.nmpc.weight_bounds.r_max);
    }
    if (j.contains("planner")) {
      const json& p = j["planner"];
      cfg.planner.q_bar = p.value("q_bar", cfg.planner.q_bar);
      cfg.planner.r_bar = p.value("r_bar", cfg.planner.r_bar);
      cfg.planner.w_vertex = p.value("w_vertex", cfg.planner.w_vertex);
      cfg.planner.w_align = p.value("w_align", cfg.planner.w_align);
    }
    if (j.contains("kpi")) {
      const json& k = j["kpi"];
      cfg.targets.rmse = k.value("rmse_target_m", cfg.targets.rmse);
      cfg.targets.rms_du = k.value("rms_du_target", cfg.targets.rms_du);
      cfg.targets.sat = k.value("sat_target", cfg.targets.sat);
      cfg.targets.max_ee = k.value("max_ee_target_m", cfg.targets.max_ee);
      cfg.sat_tol = k.value("sat_tol", cfg.sat_tol);
    }
    if (j.contains("tuner")) {
      const json& t = j["tuner"];
      if (t.contains("alpha")) cfg.tuner.alpha = detail::json_vecx(t["alpha"], "alpha");
      if (t.contains("beta")) {
        if (t["beta"].is_number()) cfg.tuner.beta = t["beta"].get<double>();
        else cfg.tuner.beta_diag = detail::json_vecx(t["beta"], "beta");
      }
      cfg.tuner.delta = t.value("delta", cfg.tuner.delta);
      cfg.tuner.epsilon = t.value("epsilon", cfg.tuner.epsilon);
      cfg.tuner.ell_max = t.value("ell_max", cfg.tuner.ell_max);
      cfg.tuner.refresh_every = t.value("refresh_every", cfg.tuner.refresh_every);
      cfg.tuner.parallel_sensitivity = t.value("parallel_sensitivity", cfg.tuner.parallel_sensitivity);
      const std::string rule = t.value("stop_rule", std::string("norm"));
      if (rule == "norm") cfg.tuner.stop_rule = StopRule::Norm;
      else if (rule == "targets") cfg.tuner.stop_rule = StopRule::Targets;
      else throw ConfigError("tuner.stop_rule must be 'norm' or 'targets'");
      const std::string layout = t.value("layout", std::string("shared"));
      if (layout == "shared") cfg.layout = WeightLayout::Shared;
      else if (layout == "per_diagonal") cfg.layout = WeightLayout::PerDiagonal;
      else throw ConfigError("tuner.layout must be 'shared' or 'per_diagonal'");
      if (t.contains("initial_weights")) cfg.initial_weights = detail::json_weights(t["initial_weights"]);
    }
    if (j.contains("track") && j["track"].contains("weights")) cfg.track_weights = detail::json_weights(j["track"]["weights"]);
    if (j.contains("bo")) {
      const json& b = j["bo"];
      cfg.bo.budget = b.value("budget", cfg.bo.budget);
      cfg.bo.init_design = b.value("init_design", cfg.bo.init_design);
      cfg.bo.jitter = b.value("jitter", cfg.bo.jitter);
      cfg.bo.seed = b.value("seed", cfg.bo.seed);
    }
    if (j.contains("output_dir")) cfg.output_dir = resolve(j["output_dir"].get<std::string>()).string();
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration value: ") + e.what());
  }
  cfg.nmpc.limits = cfg.limits;
  cfg.nmpc.validate();
  cfg.limits.validate();
  cfg.targets.validate();
  cfg.initial_weights.validate(cfg.nmpc.weight_bounds);
  cfg.track_weights.validate(cfg.nmpc.weight_bounds);
  return cfg;
}

// Planned task shared by every repetition.
struct Task {
  DhParameters dh;
  NmpcConfig nmpc;
  ReferencePath raw;        // densified polyline
  PlannedTrajectory plan;   // planner output; plan.reference is the tracking reference
  JointState q0;
};

inline Task prepare_task(const ExperimentConfig& cfg) {
  Task task;
  task.dh = cfg.dh;
  task.nmpc = cfg.nmpc;
  task.nmpc.limits = cfg.limits;
  const Core core = make_tetrahedron(cfg.edge_length, cfg.core_offset);
  task.raw = densify(core, cfg.sequence, cfg.nmpc.ts, cfg.speed, cfg.corner, cfg.taper);
  task.q0 = inverse_kinematics(cfg.dh, task.raw.points.front().p_ref, cfg.home, cfg.limits);
  task.plan = plan_open_loop(cfg.dh, task.nmpc, task.raw, task.q0, cfg.planner);
  return task;
}

// One closed-loop execution of the whole reference with the given controller.
template <typename Model>
RepetitionLog run_repetition(const Model& plant_model, NmpcController<Model>& controller, const ReferencePath& path,
                             const JointState& q0, double approach_tol = 1e-4) {
  if (path.empty()) throw EmptyReference("reference path is empty");
  const NmpcConfig& cfg = controller.config();
  if ((plant_model.position(q0) - path.points.front().p_ref).norm() > approach_tol)
    throw ConfigError("initial joint state is not at the first reference point");
  controller.reset();
  RepetitionLog log;
  log.ts = cfg.ts;
  log.samples.reserve(path.size());
  JointState q = q0;
  for (std::size_t i = 0; i < path.size(); ++i) {
    LogSample s;
    s.t = cfg.ts * static_cast<double>(i);
    s.q = q;
    s.p = plant_model.position(q);
    s.p_ref = path.points[i].p_ref;
    try {
      s.u = controller.control_step(q, make_window(path, i + 1, cfg.horizon, false));
    } catch (const SolverFailure& e) {
      throw SolverFailure("step " + std::to_string(i) + ": " + e.what());
    }
    const StepTelemetry& tel = controller.last_telemetry();
    s.sqp_iters = tel.iterations;
    s.kkt = tel.kkt_residual;
    s.solve_ms = tel.wall_ms;
    s.degraded = tel.degraded;
    log.samples.push_back(s);
    q = plant_step(q, s.u, cfg.ts, cfg.limits);
  }
  return log;
}

inline RepetitionLog run_task(const Task& task, const WeightMatrices& w) {
  const DhOutputModel model{task.dh};
  NmpcController<DhOutputModel> ctrl(model, task.nmpc, w);
  return run_repetition(model, ctrl, task.plan.reference, task.q0);
}

inline RolloutResult summarize(const RepetitionLog& log, const JointLimits& limits, const KpiTargets& targets,
                               double sat_tol) {
  RolloutResult r;
  r.report = compute_report(log, limits, sat_tol);
  r.error = normalize(r.report, targets);
  r.control_effort = control_effort(log);
  return r;
}

inline Rollout make_rollout(const Task& task, const ExperimentConfig& cfg) {
  return [&task, &cfg](const WeightVector& w) {
    const RepetitionLog log = run_task(task, w.decode());
    return summarize(log, cfg.limits, cfg.targets, cfg.sat_tol);
  };
}

// |e|_alpha, the scalar the BO baseline minimizes.
inline double weighted_error_norm(const KpiError& e, const VectorXd& alpha) {
  return std::sqrt(e.e.dot(alpha.cwiseProduct(e.e)));
}

// ---------------------------------------------------------------------------
// Persistence

inline void write_log_csv(const RepetitionLog& log, std::ostream& os) {
  os << "k,t,q1,q2,q3,q4,q5,q6,u1,u2,u3,u4,u5,u6,px,py,pz,ref_x,ref_y,ref_z,sqp_iters,kkt,degraded,solve_ms\n";
  const auto old = os.precision(17);
  for (std::size_t k = 0; k < log.samples.size(); ++k) {
    const auto& s = log.samples[k];
    os << k << ',' << s.t;
    for (int i = 0; i < 6; ++i) os << ',' << s.q[i];
    for (int i = 0; i < 6; ++i) os << ',' << s.u[i];
    for (int i = 0; i < 3; ++i) os << ',' << s.p[i];
    for (int i = 0; i < 3; ++i) os << ',' << s.p_ref[i];
    os << ',' << s.sqp_iters << ',' << s.kkt << ',' << (s.degraded ? 1 : 0) << ',' << s.solve_ms << '\n';
  }
  os.precision(old);
}

inline RepetitionLog read_log_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open log: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("k,t,q1", 0) != 0) throw ConfigError("not a repetition log: " + path.string());
  RepetitionLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(std::strtod(cell.c_str(), nullptr));
    if (v.size() != 24) throw ConfigError("malformed log row in " + path.string());
    LogSample s;
    s.t = v[1];
    for (int i = 0; i < 6; ++i) s.q[i] = v[2 + i];
    for (int i = 0; i < 6; ++i) s.u[i] = v[8 + i];
    for (int i = 0; i < 3; ++i) s.p[i] = v[14 + i];
    for (int i = 0; i < 3; ++i) s.p_ref[i] = v[17 + i];
    s.sqp_iters = static_cast<int>(v[20]);
    s.kkt = v[21];
    s.degraded = v[22] != 0.0;
    s.solve_ms = v[23];
    log.samples.push_back(s);
  }
  if (log.samples.size() >= 2) log.ts = log.samples[1].t - log.samples[0].t;
  return log;
}

inline json to_json(const WeightMatrices& w) {
  return {{"q", std::vector<double>(w.q_diag.data(), w.q_diag.data() + 3)},
          {"r", std::vector<double>(w.r_diag.data(), w.r_diag.data() + 6)}};
}

inline json to_json(const KpiReport& r) {
  return {{"rmse_m", r.rmse}, {"rms_du", r.rms_du}, {"sat_ratio", r.sat_ratio}, {"max_ee_m", r.max_ee}};
}

inline json to_json(const TuningHistory& h) {
  json j;
  j["converged"] = h.converged;
  j["repetitions"] = h.repetitions();
  j["rollouts"] = h.rollouts;
  j["layout"] = h.entries.empty() ? "shared" : to_string(h.entries.front().w.layout);
  json s = json::array();
  for (Eigen::Index r = 0; r < h.sensitivity.s.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < h.sensitivity.s.cols(); ++c) row.push_back(h.sensitivity.s(r, c));
    s.push_back(row);
  }
  j["sensitivity"] = {{"s", s},
                      {"step", std::vector<double>(h.sensitivity.step.data(),
                                                   h.sensitivity.step.data() + h.sensitivity.step.size())},
                      {"estimated_at_rep", h.sensitivity.estimated_at_rep}};
  json reps = json::array();
  for (const auto& en : h.entries) {
    json e;
    e["rep"] = en.rep;
    e["log_weights"] = std::vector<double>(en.w.w.data(), en.w.w.data() + en.w.w.size());
    e["weights"] = to_json(en.w.decode());
    e["kpi"] = to_json(en.result.report);
    e["error"] = std::vector<double>(en.result.error.e.data(), en.result.error.e.data() + 4);
    e["control_effort"] = en.result.control_effort;
    e["delta_w"] = std::vector<double>(en.dw.data(), en.dw.data() + en.dw.size());
    e["clipped"] = en.clipped;
    reps.push_back(e);
  }
  j["history"] = reps;
  return j;
}

// ---------------------------------------------------------------------------
// Comparison report

struct MethodMetrics {
  std::string name;
  std::string convergence;  // e.g. "4 repetitions" or "100 evaluations"
  double rmse_mm = 0.0;
  double max_error_mm = 0.0;
  double mean_error_mm = 0.0;
  double control_effort = 0.0;
  double rms_control = 0.0;  // sqrt(mean |u_k|^2), rad/s
  double computation_ms = 0.0;
};

inline MethodMetrics metrics_from_log(const std::string& name, const RepetitionLog& log, const std::string& convergence) {
  if (log.empty()) throw EmptyLog("log for " + name + " is empty");
  MethodMetrics m;
  m.name = name;
  m.convergence = convergence;
  double sq = 0.0, mx = 0.0, sum = 0.0, sq_u = 0.0;
  for (const auto& s : log.samples) {
    const double e = (s.p - s.p_ref).norm();
    sq += e * e;
    sum += e;
    mx = std::max(mx, e);
    sq_u += s.u.squaredNorm();
  }
  const double n = static_cast<double>(log.size());
  m.rmse_mm = 1e3 * std::sqrt(sq / n);
  m.max_error_mm = 1e3 * mx;
  m.mean_error_mm = 1e3 * sum / n;
  m.control_effort = control_effort(log);
  m.rms_control = std::sqrt(sq_u / n);
  m.computation_ms = mean_solve_ms(log);
  return m;
}

inline json to_json(const MethodMetrics& m) {
  return {{"method", m.name},
          {"convergence", m.convergence},
          {"rmse_mm", m.rmse_mm},
          {"max_error_mm", m.max_error_mm},
          {"mean_error_mm", m.mean_error_mm},
          {"control_effort_rad_s", m.control_effort},
          {"rms_control_rad_s", m.rms_control},
          {"computation_time_ms", m.computation_ms}};
}

inline void write_comparison_table(const std::vector<MethodMetrics>& methods, std::ostream& os) {
  os << "metric";
  for (const auto& m : methods) os << ',' << m.name;
  os << '\n';
  auto row = [&](const char* label, auto get) {
    os << label;
    for (const auto& m : methods) os << ',' << get(m);
    os << '\n';
  };
  const auto old = os.precision(17);
  row("Convergence", [](const MethodMetrics& m) { return m.convergence; });
  row("RMSE [mm]", [](const MethodMetrics& m) { return m.rmse_mm; });
  row("Max error [mm]", [](const MethodMetrics& m) { return m.max_error_mm; });
  row("Mean error [mm]", [](const MethodMetrics& m) { return m.mean_error_mm; });
  row("Control effort [rad/s]", [](const MethodMetrics& m) { return m.control_effort; });
  row("RMS control [rad/s]", [](const MethodMetrics& m) { return m.rms_control; });
  row("Computation time [ms]", [](const MethodMetrics& m) { return m.computation_ms; });
  os.precision(old);
}

}  // namespace nmpc_tune
