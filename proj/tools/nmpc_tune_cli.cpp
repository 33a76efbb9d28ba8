// Command-line entry point: plan | track | tune | bo | compare | report.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "nmpc_tune/harness.hpp"

namespace nt = nmpc_tune;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kIo = 1, kConfig = 2, kSolver = 3, kNoConvergence = 4 };

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Each output is written as <name>.partial and renamed when the command completes.
class OutputSet {
 public:
  OutputSet(fs::path dir, bool force) : dir_(std::move(dir)), force_(force) {}

  // Declare every output up front so an overwrite refusal happens before any work.
  void declare(const std::vector<std::string>& names) {
    for (const auto& n : names) {
      const fs::path p = dir_ / n;
      if (fs::exists(p) && !force_) throw IoError(p.string() + " exists (use --force to overwrite)");
    }
  }

  std::ofstream& open(const std::string& name) {
    fs::create_directories(dir_);
    const fs::path p = dir_ / (name + ".partial");
    auto& f = files_[name];
    f.open(p, std::ios::out | std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    return f;
  }

  void commit() {
    for (auto& [name, f] : files_) {
      f.close();
      if (!f) throw IoError("write failed for " + name);
      fs::rename(dir_ / (name + ".partial"), dir_ / name);
    }
    files_.clear();
  }

 private:
  fs::path dir_;
  bool force_;
  std::map<std::string, std::ofstream> files_;
};

void write_joint_reference(const nt::PlannedTrajectory& plan, std::ostream& os) {
  os << "t,q1,q2,q3,q4,q5,q6,u1,u2,u3,u4,u5,u6\n";
  os.precision(17);
  for (std::size_t k = 0; k < plan.q.size(); ++k) {
    os << plan.reference.points[k].t;
    for (int i = 0; i < 6; ++i) os << ',' << plan.q[k][i];
    for (int i = 0; i < 6; ++i) os << ',' << plan.u[k][i];
    os << '\n';
  }
}

std::string weights_summary(const nt::WeightMatrices& w) {
  std::ostringstream s;
  s << "Q=diag(" << w.q_diag.transpose() << ") R=diag(" << w.r_diag.transpose() << ")";
  return s.str();
}

void print_kpi(const char* label, const nt::RolloutResult& r) {
  std::printf("%s rmse=%.4f mm max=%.4f mm rms_du=%.5f rad/s sat=%.4f |e|=%.4f\n", label, 1e3 * r.report.rmse,
              1e3 * r.report.max_ee, r.report.rms_du, r.report.sat_ratio, r.error.e.norm());
}

int cmd_plan(const nt::ExperimentConfig& cfg, OutputSet& out) {
  out.declare({"path_raw.csv", "reference.csv", "joint_reference.csv"});
  const nt::Task task = nt::prepare_task(cfg);
  nt::write_path_csv(task.raw, out.open("path_raw.csv"));
  nt::write_path_csv(task.plan.reference, out.open("reference.csv"));
  write_joint_reference(task.plan, out.open("joint_reference.csv"));
  out.commit();
  std::printf("planned %zu points, path length %.4f m\n", task.raw.size(), nt::path_length(task.raw));
  return kOk;
}

int cmd_track(const nt::ExperimentConfig& cfg, OutputSet& out, int repetitions) {
  out.declare({"track_log.csv", "track_kpi.csv"});
  const nt::Task task = nt::prepare_task(cfg);
  auto& kpi = out.open("track_kpi.csv");
  nt::write_kpi_header(kpi);
  nt::RepetitionLog log;
  for (int rep = 1; rep <= repetitions; ++rep) {
    log = nt::run_task(task, cfg.track_weights);
    const nt::RolloutResult r = nt::summarize(log, cfg.limits, cfg.targets, cfg.sat_tol);
    nt::write_kpi_row(kpi, rep, r.report, r.error);
    print_kpi(("rep " + std::to_string(rep)).c_str(), r);
  }
  nt::write_log_csv(log, out.open("track_log.csv"));
  out.commit();
  return kOk;
}

int cmd_tune(const nt::ExperimentConfig& cfg, OutputSet& out) {
  out.declare({"tuning_history.json", "tuning_history.csv", "tune_kpi.csv", "tune_log.csv"});
  const nt::Task task = nt::prepare_task(cfg);
  const nt::Rollout rollout = nt::make_rollout(task, cfg);
  const nt::WeightVector w0 = nt::WeightVector::encode(cfg.initial_weights, cfg.layout, cfg.nmpc.weight_bounds);
  const nt::TuningHistory hist = nt::run_tuning(cfg.tuner, rollout, w0);

  out.open("tuning_history.json") << nt::to_json(hist).dump(2) << '\n';
  nt::write_tuning_csv(hist, out.open("tuning_history.csv"));
  auto& kpi = out.open("tune_kpi.csv");
  nt::write_kpi_header(kpi);
  for (const auto& en : hist.entries) {
    nt::write_kpi_row(kpi, en.rep, en.result.report, en.result.error);
    print_kpi(("rep " + std::to_string(en.rep)).c_str(), en.result);
  }
  const nt::WeightMatrices final_w = hist.final_entry().w.decode();
  nt::write_log_csv(nt::run_task(task, final_w), out.open("tune_log.csv"));
  out.commit();
  std::printf("%s after %d repetitions (%d rollouts), %s\n", hist.converged ? "converged" : "NOT converged",
              hist.repetitions(), hist.rollouts, weights_summary(final_w).c_str());
  return hist.converged ? kOk : kNoConvergence;
}

int cmd_bo(const nt::ExperimentConfig& cfg, OutputSet& out) {
  out.declare({"bo_history.csv", "bo_kpi.csv", "bo_log.csv"});
  const nt::Task task = nt::prepare_task(cfg);
  const nt::Rollout rollout = nt::make_rollout(task, cfg);
  const nt::WeightVector proto = nt::WeightVector::encode(cfg.initial_weights, nt::WeightLayout::Shared,
                                                          cfg.nmpc.weight_bounds);
  nt::BoConfig bc;
  bc.lower = proto.lower;
  bc.upper = proto.upper;
  bc.budget = cfg.bo.budget;
  bc.init_design = cfg.bo.init_design;
  bc.jitter = cfg.bo.jitter;
  bc.seed = cfg.bo.seed;
  const Eigen::VectorXd alpha = cfg.tuner.alpha;
  const nt::BoResult res = nt::bo_minimize(
      [&](const Eigen::VectorXd& x) {
        return nt::weighted_error_norm(rollout(proto.with(x)).error, alpha);
      },
      bc);
  nt::write_bo_history_csv(res, {"logQ", "logR"}, out.open("bo_history.csv"));
  const nt::WeightMatrices best = proto.with(res.best_x).decode();
  const nt::RepetitionLog log = nt::run_task(task, best);
  const nt::RolloutResult r = nt::summarize(log, cfg.limits, cfg.targets, cfg.sat_tol);
  auto& kpi = out.open("bo_kpi.csv");
  nt::write_kpi_header(kpi);
  nt::write_kpi_row(kpi, 1, r.report, r.error);
  nt::write_log_csv(log, out.open("bo_log.csv"));
  out.commit();
  print_kpi("bo best", r);
  std::printf("best objective %.6g after %zu evaluations, %s\n", res.best_objective, res.history.size(),
              weights_summary(best).c_str());
  return kOk;
}

struct MethodSource {
  const char* name;
  const char* log;
};
const MethodSource kMethods[] = {{"fixed", "track_log.csv"}, {"tuned", "tune_log.csv"}, {"bo", "bo_log.csv"}};

std::string convergence_of(const fs::path& dir, const std::string& method) {
  if (method == "tuned" && fs::exists(dir / "tuning_history.json")) {
    std::ifstream in(dir / "tuning_history.json");
    const nt::json j = nt::json::parse(in);
    return std::to_string(j.at("repetitions").get<int>()) + " repetitions";
  }
  if (method == "bo" && fs::exists(dir / "bo_history.csv")) {
    std::ifstream in(dir / "bo_history.csv");
    std::string line;
    int rows = -1;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    return std::to_string(rows) + " evaluations";
  }
  return "-";
}

int cmd_compare(const fs::path& dir, OutputSet& out) {
  std::vector<nt::MethodMetrics> methods;
  for (const auto& m : kMethods) {
    const fs::path p = dir / m.log;
    if (!fs::exists(p)) continue;
    methods.push_back(nt::metrics_from_log(m.name, nt::read_log_csv(p), convergence_of(dir, m.name)));
  }
  if (methods.empty()) throw nt::ConfigError("no repetition logs found in " + dir.string());
  out.declare({"summary.json", "comparison.csv"});
  nt::json j;
  j["control_effort_definition"] = "sum over steps of |u_k|_2, rad/s";
  j["rms_control_definition"] = "sqrt(mean over steps of |u_k|_2^2), rad/s";
  j["computation_time_definition"] = "mean per-step solve wall time, ms";
  j["methods"] = nt::json::array();
  for (const auto& m : methods) j["methods"].push_back(nt::to_json(m));
  out.open("summary.json") << j.dump(2) << '\n';
  nt::write_comparison_table(methods, out.open("comparison.csv"));
  out.commit();
  nt::write_comparison_table(methods, std::cout);
  return kOk;
}

int cmd_report(const fs::path& dir, OutputSet& out) {
  std::vector<std::pair<std::string, nt::RepetitionLog>> logs;
  for (const auto& m : kMethods) {
    const fs::path p = dir / m.log;
    if (fs::exists(p)) logs.emplace_back(m.name, nt::read_log_csv(p));
  }
  if (logs.empty()) throw nt::ConfigError("no repetition logs found in " + dir.string());
  std::size_t n = logs.front().second.size();
  for (const auto& [name, log] : logs) n = std::min(n, log.size());
  out.declare({"plot_position.csv", "plot_joint_positions.csv", "plot_joint_velocities.csv"});

  auto& pos = out.open("plot_position.csv");
  auto& jq = out.open("plot_joint_positions.csv");
  auto& ju = out.open("plot_joint_velocities.csv");
  pos << "t,ref_x,ref_y,ref_z";
  jq << "t";
  ju << "t";
  for (const auto& [name, log] : logs) {
    pos << ',' << name << "_x," << name << "_y," << name << "_z";
    for (int i = 1; i <= 6; ++i) {
      jq << ',' << name << "_q" << i;
      ju << ',' << name << "_u" << i;
    }
  }
  pos << '\n';
  jq << '\n';
  ju << '\n';
  pos.precision(17);
  jq.precision(17);
  ju.precision(17);
  const auto& ref = logs.front().second.samples;
  for (std::size_t k = 0; k < n; ++k) {
    pos << ref[k].t << ',' << ref[k].p_ref.x() << ',' << ref[k].p_ref.y() << ',' << ref[k].p_ref.z();
    jq << ref[k].t;
    ju << ref[k].t;
    for (const auto& [name, log] : logs) {
      const auto& s = log.samples[k];
      pos << ',' << s.p.x() << ',' << s.p.y() << ',' << s.p.z();
      for (int i = 0; i < 6; ++i) {
        jq << ',' << s.q[i];
        ju << ',' << s.u[i];
      }
    }
    pos << '\n';
    jq << '\n';
    ju << '\n';
  }
  out.commit();
  std::printf("wrote plot CSVs for %zu methods, %zu samples\n", logs.size(), n);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative NMPC weight tuning for a UR10e winding task"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  bool force = false;
  int repetitions = 1;
  app.add_option("-c,--config", config_path, "experiment JSON")->required();
  app.add_option("-o,--out", out_dir, "output directory (overrides output_dir in the config)");
  app.add_flag("-f,--force", force, "overwrite existing outputs");
  auto* plan = app.add_subcommand("plan", "densify the path and run the open-loop planner");
  auto* track = app.add_subcommand("track", "closed-loop repetitions with fixed weights");
  track->add_option("-n,--repetitions", repetitions, "number of repetitions")->check(CLI::PositiveNumber);
  auto* tune = app.add_subcommand("tune", "iterative weight tuning");
  auto* bo = app.add_subcommand("bo", "Bayesian-optimization baseline");
  auto* compare = app.add_subcommand("compare", "comparison table from persisted logs");
  auto* report = app.add_subcommand("report", "plot-ready CSVs from persisted logs");
  CLI11_PARSE(app, argc, argv);

  try {
    nt::ExperimentConfig cfg = nt::ExperimentConfig::load(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    OutputSet out(cfg.output_dir, force);
    if (plan->parsed()) return cmd_plan(cfg, out);
    if (track->parsed()) return cmd_track(cfg, out, repetitions);
    if (tune->parsed()) return cmd_tune(cfg, out);
    if (bo->parsed()) return cmd_bo(cfg, out);
    if (compare->parsed()) return cmd_compare(cfg.output_dir, out);
    if (report->parsed()) return cmd_report(cfg.output_dir, out);
  } catch (const nt::SolverFailure& e) {
    std::fprintf(stderr, "solver failure: %s\n", e.what());
    return kSolver;
  } catch (const nt::RolloutFailure& e) {
    std::fprintf(stderr, "rollout failure: %s\n", e.what());
    return kSolver;
  } catch (const nt::NonFinite& e) {
    std::fprintf(stderr, "non-finite KPI: %s\n", e.what());
    return kSolver;
  } catch (const nt::IllConditioned& e) {
    std::fprintf(stderr, "ill-conditioned update: %s\n", e.what());
    return kSolver;
  } catch (const nt::Error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const nt::json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  }
  return kOk;
}
