#pragma once
// Winding-core geometry, dense reference-path generation and the open-loop planner
// that turns the raw polyline into a kinematically feasible tracking reference.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "nmpc_tune/errors.hpp"
#include "nmpc_tune/nmpc.hpp"
#include "nmpc_tune/robot.hpp"

namespace nmpc_tune {

struct Core {
  std::vector<Vec3> vertices;
  std::vector<std::pair<int, int>> edges;
  Vec3 offset = Vec3::Zero();

  void validate() const {
    if (vertices.size() < 4) throw ConfigError("core needs at least 4 vertices");
    const int nv = static_cast<int>(vertices.size());
    for (const auto& [a, b] : edges) {
      if (a < 0 || b < 0 || a >= nv || b >= nv || a == b) throw ConfigError("core edge references an invalid vertex");
    }
  }
};

// Regular tetrahedron with its base face parallel to the x-y plane, centroid at `offset`.
inline Core make_tetrahedron(double edge_length, const Vec3& offset = Vec3::Zero()) {
  if (!(edge_length > 0.0)) throw ConfigError("edge_length must be > 0");
  const double height = edge_length * std::sqrt(2.0 / 3.0);
  const double circumradius = edge_length / std::sqrt(3.0);
  const double z_base = -height / 4.0;
  Core core;
  for (int i = 0; i < 3; ++i) {
    const double ang = 2.0 * M_PI * i / 3.0;
    core.vertices.push_back(offset + Vec3(circumradius * std::cos(ang), circumradius * std::sin(ang), z_base));
  }
  core.vertices.push_back(offset + Vec3(0.0, 0.0, 3.0 * height / 4.0));
  core.edges = {{0, 1}, {1, 2}, {2, 0}, {0, 3}, {1, 3}, {2, 3}};
  core.offset = offset;
  return core;
}

struct WindingSequence {
  std::vector<int> order;
  int repetitions = 1;

  // Walk over all six tetrahedron edges (edge 1-2 is traversed twice).
  static WindingSequence tetrahedron_default() { return {{0, 1, 2, 3, 0, 2, 1, 3}, 1}; }

  // Full visit list with passes concatenated; a pass that starts where the previous ended
  // does not repeat the shared vertex.
  std::vector<int> expanded() const {
    std::vector<int> out;
    for (int r = 0; r < std::max(repetitions, 1); ++r) {
      for (int idx : order) {
        if (!out.empty() && out.back() == idx) continue;
        out.push_back(idx);
      }
    }
    return out;
  }
};

struct CornerConfig {
  double window = 0.005;   // m
  double slowdown = 0.25;  // speed factor in (0, 1]
};

struct TaperConfig {
  double peak = 1.0;
  double window = 0.010;  // m
};

struct PathPoint {
  double t = 0.0;
  Vec3 p_ref = Vec3::Zero();
  double vertex_weight = 0.0;
  bool is_corner = false;
  Vec3 vertex = Vec3::Zero();  // nearest visited vertex (attractor of the vertex term)
};

struct ReferencePath {
  double ts = 0.0;
  std::vector<PathPoint> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

// Piecewise-linear interpolation of the vertex sequence. The arc-length step is speed*ts,
// scaled by corner.slowdown within corner.window of an interior vertex where the path turns.
// Every visited vertex is sampled exactly.
inline ReferencePath densify(const Core& core, const WindingSequence& seq, double ts, double speed,
                             const CornerConfig& corner = {}, const TaperConfig& taper = {}) {
  if (!(speed > 0.0)) throw ConfigError("speed must be > 0");
  if (!(ts > 0.0)) throw ConfigError("ts must be > 0");
  if (!(corner.slowdown > 0.0 && corner.slowdown <= 1.0)) throw ConfigError("corner slowdown must be in (0, 1]");
  if (corner.window < 0.0 || taper.window < 0.0 || taper.peak < 0.0)
    throw ConfigError("corner/taper windows and peak must be >= 0");
  const std::vector<int> visits = seq.expanded();
  if (visits.size() < 2) throw EmptySequence("winding sequence needs at least 2 vertices");
  const int nv = static_cast<int>(core.vertices.size());
  for (int idx : visits) {
    if (idx < 0 || idx >= nv) throw ConfigError("winding sequence references an invalid vertex");
  }

  const int nseg = static_cast<int>(visits.size()) - 1;
  std::vector<Vec3> pts;
  for (int idx : visits) pts.push_back(core.vertices[idx]);
  std::vector<bool> turns(pts.size(), false);
  for (std::size_t i = 1; i + 1 < pts.size(); ++i) {
    const Vec3 d0 = (pts[i] - pts[i - 1]).normalized();
    const Vec3 d1 = (pts[i + 1] - pts[i]).normalized();
    turns[i] = d0.cross(d1).norm() > 1e-9 || d0.dot(d1) < 0.0;
  }

  const double nominal = speed * ts;
  ReferencePath path;
  path.ts = ts;
  auto push = [&](const Vec3& p, double s_from_start, double seg_len, int seg) {
    PathPoint pp;
    pp.t = ts * static_cast<double>(path.points.size());
    pp.p_ref = p;
    const double to_start = s_from_start;
    const double to_end = seg_len - s_from_start;
    const bool near_start = to_start <= to_end;
    const double dist = near_start ? to_start : to_end;
    const int vid = near_start ? seg : seg + 1;
    pp.vertex = pts[vid];
    if (dist == 0.0) {
      pp.vertex_weight = taper.peak;
    } else if (taper.window > 0.0 && dist < taper.window) {
      pp.vertex_weight = taper.peak * (1.0 - dist / taper.window);
    }
    pp.is_corner = (turns[seg] && to_start <= corner.window) || (turns[seg + 1] && to_end <= corner.window);
    path.points.push_back(pp);
  };

  for (int seg = 0; seg < nseg; ++seg) {
    const Vec3 a = pts[seg];
    const Vec3 b = pts[seg + 1];
    const double len = (b - a).norm();
    if (seg == 0) push(a, 0.0, len, seg);
    if (len == 0.0) continue;
    const Vec3 dir = (b - a) / len;
    double s = 0.0;
    for (;;) {
      const bool slow = (turns[seg] && s < corner.window) || (turns[seg + 1] && len - s <= corner.window);
      const double step = slow ? nominal * corner.slowdown : nominal;
      // Relative slack absorbs round-off so that an exact multiple of the step lands on b.
      if (s + step >= len - 1e-9 * step) {
        push(b, len, len, seg);
        break;
      }
      s += step;
      push(a + s * dir, s, len, seg);
    }
  }
  return path;
}

inline double path_length(const ReferencePath& path) {
  double len = 0.0;
  for (std::size_t i = 1; i < path.points.size(); ++i) len += (path.points[i].p_ref - path.points[i - 1].p_ref).norm();
  return len;
}

inline void write_path_csv(const ReferencePath& path, std::ostream& os) {
  os << "t,px,py,pz,vertex_weight,is_corner\n";
  os << std::setprecision(17);
  for (const auto& pt : path.points) {
    os << pt.t << ',' << pt.p_ref.x() << ',' << pt.p_ref.y() << ',' << pt.p_ref.z() << ',' << pt.vertex_weight << ','
       << (pt.is_corner ? 1 : 0) << '\n';
  }
}

struct PlannerWeights {
  double q_bar = 2e4;     // position tracking, 1/m^2
  double r_bar = 5e-3;    // input rate
  double w_vertex = 1.0;  // scales the tapered vertex weight
  double w_align = 0.0;   // accepted for compatibility; the alignment term is not modelled
};

struct PlannedTrajectory {
  std::vector<JointState> q;
  std::vector<JointCommand> u;
  ReferencePath reference;  // same timing/weights as the input path, p_ref = h(q_k)
};

// Window of N reference points starting at `first`, repeating the last point at the tail.
inline TrackingWindow make_window(const ReferencePath& path, std::size_t first, int n, bool with_vertex,
                                  double w_vertex = 0.0) {
  TrackingWindow w;
  w.p_ref.reserve(n);
  const std::size_t last = path.points.size() - 1;
  for (int k = 0; k < n; ++k) {
    const auto& pt = path.points[std::min(first + static_cast<std::size_t>(k), last)];
    w.p_ref.push_back(pt.p_ref);
    if (with_vertex) {
      w.vertex.push_back(pt.vertex);
      w.vertex_weight.push_back(w_vertex * pt.vertex_weight);
    }
  }
  return w;
}

// Open-loop receding-horizon planning over the whole path with the kinematic model.
// Returns the executed joint trajectory and its forward-kinematics positions as reference.
inline PlannedTrajectory plan_open_loop(const DhParameters& dh, const NmpcConfig& cfg, const ReferencePath& path,
                                        const JointState& q_init, const PlannerWeights& pw = {}) {
  if (path.empty()) throw EmptyReference("planner received an empty path");
  if (pw.w_align != 0.0)
    std::cerr << "warning: w_align is ignored (thread-alignment term is not modelled)\n";
  NmpcConfig pcfg = cfg;
  pcfg.weight_bounds = {0.0, std::numeric_limits<double>::infinity(), 0.0, std::numeric_limits<double>::infinity()};
  NmpcController<DhOutputModel> ctrl(DhOutputModel{dh}, pcfg, WeightMatrices::uniform(pw.q_bar, pw.r_bar));

  PlannedTrajectory out;
  out.reference = path;
  const std::size_t m = path.points.size();
  out.q.reserve(m);
  out.u.reserve(m);
  JointState q = q_init;
  for (std::size_t i = 0; i < m; ++i) {
    out.q.push_back(q);
    out.reference.points[i].p_ref = fk_position(dh, q);
    if (i + 1 == m) {
      out.u.push_back(JointCommand::Zero());
      break;
    }
    JointCommand u;
    try {
      u = ctrl.control_step(q, make_window(path, i + 1, cfg.horizon, true, pw.w_vertex));
    } catch (const SolverFailure& e) {
      throw SolverFailure("planner window " + std::to_string(i) + ": " + e.what());
    }
    out.u.push_back(u);
    q = plant_step(q, u, cfg.ts, cfg.limits);
  }
  return out;
}

}  // namespace nmpc_tune
