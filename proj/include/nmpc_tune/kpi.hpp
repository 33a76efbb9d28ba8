#pragma once
// Task-level metrics of one repetition and their normalized error vector.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <vector>

#include "nmpc_tune/errors.hpp"
#include "nmpc_tune/robot.hpp"

namespace nmpc_tune {

struct LogSample {
  double t = 0.0;
  JointState q = JointState::Zero();
  JointCommand u = JointCommand::Zero();
  Vec3 p = Vec3::Zero();
  Vec3 p_ref = Vec3::Zero();
  int sqp_iters = 0;
  double kkt = 0.0;
  double solve_ms = 0.0;
  bool degraded = false;
};

struct RepetitionLog {
  double ts = 0.0;
  std::vector<LogSample> samples;

  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }
};

struct KpiTargets {
  double rmse = 1e-3;        // m
  double rms_du = 0.025;     // rad/s
  double sat = 0.05;         // fraction
  double max_ee = 2e-3;      // m

  void validate() const {
    if (!(rmse > 0.0 && rms_du > 0.0 && sat > 0.0 && sat <= 1.0 && max_ee > 0.0))
      throw ConfigError("KPI targets must be strictly positive (sat in (0, 1])");
  }
};

struct KpiReport {
  double rmse = 0.0;       // m
  double rms_du = 0.0;     // rad/s
  double sat_ratio = 0.0;  // fraction of steps
  double max_ee = 0.0;     // m
};

struct KpiError {
  Eigen::Vector4d e = Eigen::Vector4d::Zero();  // (rmse, du, sat, maxee)

  double rmse() const { return e[0]; }
  double du() const { return e[1]; }
  double sat() const { return e[2]; }
  double maxee() const { return e[3]; }
};

inline KpiReport compute_report(const RepetitionLog& log, const JointLimits& limits, double sat_tol = 0.01) {
  if (log.empty()) throw EmptyLog("repetition log is empty");
  const double n = static_cast<double>(log.size());
  double sq_err = 0.0;
  double sq_du = 0.0;
  double max_err = 0.0;
  std::size_t saturated = 0;
  JointCommand prev = JointCommand::Zero();
  for (const auto& s : log.samples) {
    const double err2 = (s.p - s.p_ref).squaredNorm();
    sq_err += err2;
    max_err = std::max(max_err, std::sqrt(err2));
    sq_du += (s.u - prev).squaredNorm();
    prev = s.u;
    for (int i = 0; i < 6; ++i) {
      const double lim = s.u[i] >= 0.0 ? limits.qdot_max[i] : -limits.qdot_min[i];
      if (std::abs(s.u[i]) >= (1.0 - sat_tol) * lim) {
        ++saturated;
        break;
      }
    }
  }
  KpiReport r;
  r.rmse = std::sqrt(sq_err / n);
  r.rms_du = std::sqrt(sq_du / n);
  r.sat_ratio = static_cast<double>(saturated) / n;
  r.max_ee = max_err;
  return r;
}

inline KpiError normalize(const KpiReport& r, const KpiTargets& t) {
  KpiError out;
  out.e << (r.rmse - t.rmse) / t.rmse, (r.rms_du - t.rms_du) / t.rms_du, (r.sat_ratio - t.sat) / t.sat,
      (r.max_ee - t.max_ee) / t.max_ee;
  return out;
}

inline bool targets_met(const KpiError& e) { return (e.e.array() <= 0.0).all(); }

inline double mean_error(const RepetitionLog& log) {
  if (log.empty()) throw EmptyLog("repetition log is empty");
  double sum = 0.0;
  for (const auto& s : log.samples) sum += (s.p - s.p_ref).norm();
  return sum / static_cast<double>(log.size());
}

// Sum over steps of |u_k|_2, in rad/s.
inline double control_effort(const RepetitionLog& log) {
  double sum = 0.0;
  for (const auto& s : log.samples) sum += s.u.norm();
  return sum;
}

inline double mean_solve_ms(const RepetitionLog& log) {
  if (log.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : log.samples) sum += s.solve_ms;
  return sum / static_cast<double>(log.size());
}

inline void write_kpi_header(std::ostream& os) {
  os << "rep,rmse_m,rms_du,sat_ratio,max_ee_m,e_rmse,e_du,e_sat,e_maxee\n";
}

inline void write_kpi_row(std::ostream& os, int rep, const KpiReport& r, const KpiError& e) {
  const auto old = os.precision(17);
  os << rep << ',' << r.rmse << ',' << r.rms_du << ',' << r.sat_ratio << ',' << r.max_ee << ',' << e.e[0] << ','
     << e.e[1] << ',' << e.e[2] << ',' << e.e[3] << '\n';
  os.precision(old);
}

}  // namespace nmpc_tune
