#pragma once
// Kinematic model of a 6-DOF serial manipulator (standard DH convention).
// Header-only, Eigen-only.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nmpc_tune/errors.hpp"

namespace nmpc_tune {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat36 = Eigen::Matrix<double, 3, 6>;

// Joint angles [rad] and joint velocity commands [rad/s].
using JointState = Vec6;
using JointCommand = Vec6;

struct DhRow {
  double a = 0.0;             // m
  double alpha = 0.0;         // rad
  double d = 0.0;             // m
  double theta_offset = 0.0;  // rad
};

class DhParameters {
 public:
  DhParameters() = default;
  explicit DhParameters(const std::array<DhRow, 6>& rows) : rows_(rows) { validate(); }

  // Published nominal table for the UR10e.
  static DhParameters ur10e() {
    constexpr double kHalfPi = M_PI / 2.0;
    return DhParameters({{{0.0, kHalfPi, 0.1807, 0.0},
                          {-0.6127, 0.0, 0.0, 0.0},
                          {-0.57155, 0.0, 0.0, 0.0},
                          {0.0, kHalfPi, 0.17415, 0.0},
                          {0.0, -kHalfPi, 0.11985, 0.0},
                          {0.0, 0.0, 0.11655, 0.0}}});
  }

  // CSV with header `a,alpha,d,theta_offset` and exactly 6 data rows.
  static DhParameters from_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open DH table: " + path);
    std::string line;
    std::vector<DhRow> rows;
    bool header_seen = false;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (!header_seen) {
        header_seen = true;
        if (line.rfind("a,alpha,d,theta_offset", 0) != 0)
          throw ConfigError("DH table header must be a,alpha,d,theta_offset: " + path);
        continue;
      }
      std::stringstream ss(line);
      std::string cell;
      std::array<double, 4> v{};
      for (int c = 0; c < 4; ++c) {
        if (!std::getline(ss, cell, ','))
          throw ConfigError("DH table row has fewer than 4 columns: " + path);
        try {
          v[c] = std::stod(cell);
        } catch (const std::exception&) {
          throw ConfigError("DH table entry is not a number: '" + cell + "'");
        }
      }
      rows.push_back({v[0], v[1], v[2], v[3]});
    }
    if (rows.size() != 6) throw ConfigError("DH table must have exactly 6 rows: " + path);
    std::array<DhRow, 6> arr{};
    std::copy(rows.begin(), rows.end(), arr.begin());
    return DhParameters(arr);
  }

  const DhRow& operator[](std::size_t j) const { return rows_[j]; }
  const std::array<DhRow, 6>& rows() const { return rows_; }

 private:
  void validate() const {
    for (const auto& r : rows_) {
      if (!std::isfinite(r.a) || !std::isfinite(r.alpha) || !std::isfinite(r.d) ||
          !std::isfinite(r.theta_offset))
        throw ConfigError("DH table contains a non-finite entry");
    }
  }

  std::array<DhRow, 6> rows_{};
};

struct JointLimits {
  Vec6 q_min;
  Vec6 q_max;
  Vec6 qdot_min;
  Vec6 qdot_max;

  // UR10e: +-360 deg on every joint except the elbow (+-180 deg); 120 deg/s on base and
  // shoulder, 180 deg/s elsewhere.
  static JointLimits ur10e() {
    JointLimits l;
    l.q_max << 2 * M_PI, 2 * M_PI, M_PI, 2 * M_PI, 2 * M_PI, 2 * M_PI;
    l.q_min = -l.q_max;
    const double slow = 120.0 * M_PI / 180.0;
    const double fast = M_PI;
    l.qdot_max << slow, slow, fast, fast, fast, fast;
    l.qdot_min = -l.qdot_max;
    return l;
  }

  void validate() const {
    for (int i = 0; i < 6; ++i) {
      if (!(q_min[i] < q_max[i])) throw ConfigError("joint limits: q_min must be < q_max");
      if (!(qdot_min[i] < 0.0 && 0.0 < qdot_max[i]))
        throw ConfigError("joint limits: require qdot_min < 0 < qdot_max");
    }
  }

  JointState clamp_position(const JointState& q) const { return q.cwiseMax(q_min).cwiseMin(q_max); }
  JointCommand clamp_velocity(const JointCommand& u) const {
    return u.cwiseMax(qdot_min).cwiseMin(qdot_max);
  }
};

struct EePose {
  Vec3 p = Vec3::Zero();    // m
  Vec3 phi = Vec3::Zero();  // ZYZ Euler angles, rad
};

inline Mat4 dh_transform(const DhRow& row, double q) {
  const double theta = q + row.theta_offset;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double ca = std::cos(row.alpha), sa = std::sin(row.alpha);
  Mat4 t;
  t << ct, -st * ca, st * sa, row.a * ct,
       st, ct * ca, -ct * sa, row.a * st,
       0.0, sa, ca, row.d,
       0.0, 0.0, 0.0, 1.0;
  return t;
}

// Base-to-flange homogeneous transform.
inline Mat4 flange_transform(const DhParameters& dh, const JointState& q) {
  Mat4 t = Mat4::Identity();
  for (int j = 0; j < 6; ++j) t = t * dh_transform(dh[j], q[j]);
  return t;
}

// R = Rz(phi1) * Ry(phi2) * Rz(phi3). At the gimbal singularities phi1 is set to 0.
inline Vec3 zyz_euler(const Mat3& r) {
  const double s2 = std::hypot(r(0, 2), r(1, 2));
  if (s2 > 1e-12) {
    return {std::atan2(r(1, 2), r(0, 2)), std::atan2(s2, r(2, 2)), std::atan2(r(2, 1), -r(2, 0))};
  }
  if (r(2, 2) > 0.0) return {0.0, 0.0, std::atan2(r(1, 0), r(0, 0))};
  return {0.0, M_PI, std::atan2(r(1, 0), r(1, 1))};
}

inline Mat3 zyz_rotation(const Vec3& phi) {
  return (Eigen::AngleAxisd(phi[0], Vec3::UnitZ()) * Eigen::AngleAxisd(phi[1], Vec3::UnitY()) *
          Eigen::AngleAxisd(phi[2], Vec3::UnitZ()))
      .toRotationMatrix();
}

inline EePose forward_kinematics(const DhParameters& dh, const JointState& q) {
  const Mat4 t = flange_transform(dh, q);
  EePose pose;
  pose.p = t.block<3, 1>(0, 3);
  pose.phi = zyz_euler(t.block<3, 3>(0, 0));
  return pose;
}

inline Vec3 fk_position(const DhParameters& dh, const JointState& q) {
  return flange_transform(dh, q).block<3, 1>(0, 3);
}

// Position and geometric position Jacobian from one pass over the chain:
// column j = z_{j-1} x (p - o_{j-1}).
inline void position_and_jacobian(const DhParameters& dh, const JointState& q, Vec3& p, Mat36& jac) {
  std::array<Vec3, 6> z;
  std::array<Vec3, 6> o;
  Mat4 t = Mat4::Identity();
  for (int j = 0; j < 6; ++j) {
    z[j] = t.block<3, 1>(0, 2);
    o[j] = t.block<3, 1>(0, 3);
    t = t * dh_transform(dh[j], q[j]);
  }
  p = t.block<3, 1>(0, 3);
  for (int j = 0; j < 6; ++j) jac.col(j) = z[j].cross(p - o[j]);
}

inline Mat36 position_jacobian(const DhParameters& dh, const JointState& q) {
  Vec3 p;
  Mat36 jac;
  position_and_jacobian(dh, q, p, jac);
  return jac;
}

struct IkOptions {
  double damping = 1e-3;
  int max_iters = 200;
  double tol = 1e-7;      // m
  double max_step = 0.3;  // rad, per iteration, infinity norm
  int restarts = 8;
  unsigned restart_seed = 12345u;
  Vec6 joint_weights = Vec6::Ones();
};

namespace detail {

inline bool dls_solve(const DhParameters& dh, const Vec3& target, JointState q,
                      const JointLimits& limits, const IkOptions& opt, JointState& out) {
  q = limits.clamp_position(q);
  const double lambda2 = opt.damping * opt.damping;
  for (int it = 0; it <= opt.max_iters; ++it) {
    Vec3 p;
    Mat36 jac;
    position_and_jacobian(dh, q, p, jac);
    const Vec3 err = target - p;
    if (err.norm() <= opt.tol) {
      out = q;
      return true;
    }
    if (it == opt.max_iters) break;
    const Mat3 jjt = jac * jac.transpose() + lambda2 * Mat3::Identity();
    Vec6 dq = jac.transpose() * jjt.ldlt().solve(err);
    const double peak = dq.cwiseAbs().maxCoeff();
    if (peak > opt.max_step) dq *= opt.max_step / peak;
    q = limits.clamp_position(q + dq);
  }
  return false;
}

}  // namespace detail

// Damped-least-squares position IK. The run seeded at `seed` is tried first; if it fails,
// deterministic perturbed restarts are tried and the converged result nearest to the seed
// (weighted joint norm) is returned.
inline JointState inverse_kinematics(const DhParameters& dh, const Vec3& target_p, const JointState& seed,
                                     const JointLimits& limits, const IkOptions& opt = {}) {
  JointState result;
  if (detail::dls_solve(dh, target_p, seed, limits, opt, result)) return result;

  // Simple LCG keeps restarts reproducible across standard libraries.
  std::uint64_t state = opt.restart_seed;
  auto uniform = [&state]() {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    return static_cast<double>(state >> 11) * (1.0 / 9007199254740992.0);
  };
  bool found = false;
  double best = 0.0;
  for (int r = 0; r < opt.restarts; ++r) {
    JointState start = seed;
    for (int i = 0; i < 6; ++i) start[i] += (2.0 * uniform() - 1.0) * M_PI / 2.0;
    JointState candidate;
    if (!detail::dls_solve(dh, target_p, start, limits, opt, candidate)) continue;
    const double dist = (opt.joint_weights.array() * (candidate - seed).array().square()).sum();
    if (!found || dist < best) {
      found = true;
      best = dist;
      result = candidate;
    }
  }
  if (!found) throw NoConvergence("inverse kinematics did not converge to the target position");
  return result;
}

// Forward-Euler step of q' = u, clamped to the position limits.
inline JointState plant_step(const JointState& q, const JointCommand& u, double ts, const JointLimits& limits) {
  return limits.clamp_position(q + ts * u);
}

}  // namespace nmpc_tune
