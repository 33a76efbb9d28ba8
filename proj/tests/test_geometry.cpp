#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "nmpc_tune/geometry.hpp"

using namespace nmpc_tune;

namespace {

const JointState kHome = (JointState() << 0.0, -1.2, 1.6, -1.97, -1.57, 0.0).finished();

Core home_core() { return make_tetrahedron(0.08, fk_position(DhParameters::ur10e(), kHome)); }

double max_gap(const ReferencePath& path) {
  double g = 0.0;
  for (std::size_t i = 1; i < path.size(); ++i) g = std::max(g, (path.points[i].p_ref - path.points[i - 1].p_ref).norm());
  return g;
}

}  // namespace

TEST(Geometry, TetrahedronEdgeLengths) {
  const Core core = make_tetrahedron(0.08, Vec3(0.3, -0.2, 0.5));
  ASSERT_EQ(core.vertices.size(), 4u);
  ASSERT_EQ(core.edges.size(), 6u);
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) EXPECT_NEAR((core.vertices[i] - core.vertices[j]).norm(), 0.08, 1e-12);
  for (const auto& [a, b] : core.edges) EXPECT_NEAR((core.vertices[a] - core.vertices[b]).norm(), 0.08, 1e-12);
}

TEST(Geometry, TetrahedronCentroidAtOffset) {
  const Core core = make_tetrahedron(1.0);
  Vec3 c = Vec3::Zero();
  for (const auto& v : core.vertices) c += v;
  EXPECT_LE((c / 4.0).norm(), 1e-12);
  // Base face parallel to the x-y plane.
  EXPECT_NEAR(core.vertices[0].z(), core.vertices[1].z(), 1e-15);
  EXPECT_NEAR(core.vertices[1].z(), core.vertices[2].z(), 1e-15);
}

TEST(Geometry, TetrahedronRejectsNonPositiveEdge) {
  EXPECT_THROW(make_tetrahedron(0.0), ConfigError);
  EXPECT_THROW(make_tetrahedron(-1.0), ConfigError);
}

TEST(Geometry, DensifyStraightSegmentSampleCount) {
  const Core core = make_tetrahedron(0.08);
  const ReferencePath path = densify(core, {{0, 1}, 1}, 0.008, 0.01, {0.005, 1.0}, {1.0, 0.01});
  // 0.08 m / (0.01 m/s * 0.008 s) = 1000 steps -> 1001 samples.
  ASSERT_EQ(path.size(), 1001u);
  for (std::size_t i = 1; i < path.size(); ++i) {
    EXPECT_NEAR((path.points[i].p_ref - path.points[i - 1].p_ref).norm(), 8e-5, 1e-12);
    EXPECT_NEAR(path.points[i].t - path.points[i - 1].t, 0.008, 1e-12);
  }
  EXPECT_LE((path.points.back().p_ref - core.vertices[1]).norm(), 1e-15);
}

TEST(Geometry, DensifyUniformWhenSlowdownDisabled) {
  const ReferencePath path =
      densify(make_tetrahedron(0.08), WindingSequence::tetrahedron_default(), 0.008, 0.02, {0.005, 1.0}, {});
  const double step = 0.02 * 0.008;
  for (std::size_t i = 1; i < path.size(); ++i) {
    EXPECT_LE((path.points[i].p_ref - path.points[i - 1].p_ref).norm(), step + 1e-12);
    EXPECT_FALSE(path.points[i].p_ref.hasNaN());
  }
}

TEST(Geometry, DensifyCornerRefinement) {
  const CornerConfig corner{0.005, 0.25};
  const ReferencePath path = densify(make_tetrahedron(0.08), {{0, 1, 2}, 1}, 0.008, 0.02, corner, {});
  int corner_samples = 0;
  for (std::size_t i = 1; i < path.size(); ++i) {
    const double gap = (path.points[i].p_ref - path.points[i - 1].p_ref).norm();
    if (path.points[i].is_corner && path.points[i - 1].is_corner) {
      EXPECT_LE(gap, 0.25 * 0.02 * 0.008 + 1e-12);
      ++corner_samples;
    }
  }
  // 5 mm on each side of the one interior vertex at 40 um spacing.
  EXPECT_NEAR(corner_samples, 2 * 125, 3);
  EXPECT_FALSE(path.points.front().is_corner);
  EXPECT_FALSE(path.points.back().is_corner);
}

TEST(Geometry, DensifyArcLengthAndGapInvariants) {
  const Core core = make_tetrahedron(0.08);
  const WindingSequence seq = WindingSequence::tetrahedron_default();
  const ReferencePath path = densify(core, seq, 0.008, 0.02, {}, {});
  double polyline = 0.0;
  const auto visits = seq.expanded();
  for (std::size_t i = 1; i < visits.size(); ++i) polyline += (core.vertices[visits[i]] - core.vertices[visits[i - 1]]).norm();
  EXPECT_NEAR(path_length(path), polyline, 1e-9);
  EXPECT_LE(max_gap(path), 0.02 * 0.008 + 1e-12);
  for (std::size_t i = 1; i < path.size(); ++i) EXPECT_GT(path.points[i].t, path.points[i - 1].t);
}

TEST(Geometry, TaperProfile) {
  const Core core = make_tetrahedron(0.08);
  const ReferencePath path = densify(core, {{0, 1, 2}, 1}, 0.008, 0.02, {0.005, 1.0}, {2.0, 0.01});
  for (const auto& pt : path.points) {
    const double dist = std::min({(pt.p_ref - core.vertices[0]).norm(), (pt.p_ref - core.vertices[1]).norm(),
                                  (pt.p_ref - core.vertices[2]).norm()});
    const double expected = dist < 0.01 ? 2.0 * (1.0 - dist / 0.01) : 0.0;
    EXPECT_NEAR(pt.vertex_weight, expected, 1e-9);
  }
}

TEST(Geometry, ZeroTaperWindowOnlyAtVertices) {
  const Core core = make_tetrahedron(0.08);
  const ReferencePath path = densify(core, WindingSequence::tetrahedron_default(), 0.008, 0.02, {}, {1.0, 0.0});
  int nonzero = 0;
  for (const auto& pt : path.points) {
    if (pt.vertex_weight == 0.0) continue;
    ++nonzero;
    bool at_vertex = false;
    for (const auto& v : core.vertices) at_vertex |= (pt.p_ref - v).norm() == 0.0;
    EXPECT_TRUE(at_vertex);
  }
  EXPECT_EQ(nonzero, static_cast<int>(WindingSequence::tetrahedron_default().expanded().size()));
}

TEST(Geometry, DensifyErrors) {
  const Core core = make_tetrahedron(0.08);
  EXPECT_THROW(densify(core, {{0}, 1}, 0.008, 0.02), EmptySequence);
  EXPECT_THROW(densify(core, {{}, 1}, 0.008, 0.02), EmptySequence);
  EXPECT_THROW(densify(core, {{0, 7}, 1}, 0.008, 0.02), ConfigError);
  EXPECT_THROW(densify(core, {{0, 1}, 1}, 0.008, 0.0), ConfigError);
  EXPECT_THROW(densify(core, {{0, 1}, 1}, 0.008, 0.02, {0.005, 0.0}), ConfigError);
}

TEST(Geometry, DefaultSequenceCoversAllEdges) {
  const auto visits = WindingSequence::tetrahedron_default().expanded();
  std::set<std::pair<int, int>> seen;
  for (std::size_t i = 1; i < visits.size(); ++i)
    seen.insert({std::min(visits[i - 1], visits[i]), std::max(visits[i - 1], visits[i])});
  EXPECT_EQ(seen.size(), 6u);
  WindingSequence two = WindingSequence::tetrahedron_default();
  two.repetitions = 2;
  // The default order ends on vertex 3 and restarts at 0, so nothing merges at the seam.
  EXPECT_EQ(two.expanded().size(), 2 * visits.size());
}

TEST(Geometry, PathCsvHeader) {
  std::ostringstream os;
  write_path_csv(densify(make_tetrahedron(0.08), {{0, 1}, 1}, 0.008, 0.02), os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "t,px,py,pz,vertex_weight,is_corner");
}

TEST(Geometry, WindowRepeatsLastPoint) {
  const ReferencePath path = densify(make_tetrahedron(0.08), {{0, 1}, 1}, 0.008, 0.01);
  const TrackingWindow w = make_window(path, path.size() - 3, 10, false);
  ASSERT_EQ(w.p_ref.size(), 10u);
  for (int k = 2; k < 10; ++k) EXPECT_EQ(w.p_ref[k], path.points.back().p_ref);
  EXPECT_FALSE(w.has_vertex_term());
}

TEST(Geometry, PlannerStationaryPath) {
  const DhParameters dh = DhParameters::ur10e();
  ReferencePath path;
  path.ts = 0.008;
  for (int i = 0; i < 50; ++i) {
    PathPoint pt;
    pt.t = 0.008 * i;
    pt.p_ref = fk_position(dh, kHome);
    pt.vertex = pt.p_ref;
    path.points.push_back(pt);
  }
  const PlannedTrajectory plan = plan_open_loop(dh, NmpcConfig{}, path, kHome);
  for (const auto& u : plan.u) EXPECT_EQ(u, JointCommand::Zero());
  for (const auto& q : plan.q) EXPECT_EQ(q, kHome);
}

TEST(Geometry, PlannerEmptyPathThrows) {
  EXPECT_THROW(plan_open_loop(DhParameters::ur10e(), NmpcConfig{}, ReferencePath{}, kHome), EmptyReference);
}

TEST(Geometry, PlannerStraightLineDeviation) {
  const DhParameters dh = DhParameters::ur10e();
  const Core core = home_core();
  const ReferencePath raw = densify(core, {{0, 1}, 1}, 0.008, 0.02);
  const JointState q0 = inverse_kinematics(dh, raw.points.front().p_ref, kHome, JointLimits::ur10e());
  const PlannedTrajectory plan = plan_open_loop(dh, NmpcConfig{}, raw, q0);
  double dev = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i)
    dev = std::max(dev, (plan.reference.points[i].p_ref - raw.points[i].p_ref).norm());
  EXPECT_LE(dev, 1e-3);
}

TEST(Geometry, PlannerRespectsLimitsAndIsReachable) {
  const DhParameters dh = DhParameters::ur10e();
  const JointLimits lim = JointLimits::ur10e();
  const ReferencePath raw = densify(home_core(), {{0, 1, 2, 3}, 1}, 0.008, 0.02);
  const JointState q0 = inverse_kinematics(dh, raw.points.front().p_ref, kHome, lim);
  const PlannedTrajectory plan = plan_open_loop(dh, NmpcConfig{}, raw, q0);
  ASSERT_EQ(plan.q.size(), raw.size());
  for (std::size_t i = 0; i < plan.q.size(); ++i) {
    EXPECT_TRUE((plan.q[i].array() >= lim.q_min.array()).all() && (plan.q[i].array() <= lim.q_max.array()).all());
    EXPECT_TRUE((plan.u[i].array() >= lim.qdot_min.array()).all() &&
                (plan.u[i].array() <= lim.qdot_max.array()).all());
    EXPECT_LE((fk_position(dh, plan.q[i]) - plan.reference.points[i].p_ref).norm(), 1e-15);
  }
  // Reachability: IK from a sample 25 steps earlier reaches each planned point.
  for (std::size_t i = 25; i < plan.q.size(); i += 25) {
    const Vec3 target = plan.reference.points[i].p_ref;
    const JointState q = inverse_kinematics(dh, target, plan.q[i - 25], lim);
    EXPECT_LE((fk_position(dh, q) - target).norm(), 1e-6);
  }
}
