#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <sstream>

#include "nmpc_tune/tuner.hpp"

using namespace nmpc_tune;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

RolloutResult from_error(const Eigen::Vector4d& e) {
  RolloutResult r;
  r.error.e = e;
  return r;
}

// e(w) = A (w - w_star)
Rollout affine_rollout(const MatrixXd& a, const VectorXd& w_star, std::atomic<int>* calls = nullptr) {
  return [a, w_star, calls](const WeightVector& w) {
    if (calls) ++*calls;
    return from_error(a * (w.w - w_star));
  };
}

WeightVector wide(const VectorXd& w) {
  return WeightVector::generic(w, VectorXd::Constant(w.size(), -100.0), VectorXd::Constant(w.size(), 100.0));
}

MatrixXd random_matrix(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

// Independent oracle: least squares on the stacked system [sqrt(alpha) S; sqrt(beta) I] dW = [-sqrt(alpha) e; 0].
VectorXd oracle_update(const VectorXd& e, const MatrixXd& s, const VectorXd& alpha, const VectorXd& beta) {
  const int ne = static_cast<int>(s.rows()), nw = static_cast<int>(s.cols());
  MatrixXd big = MatrixXd::Zero(ne + nw, nw);
  VectorXd rhs = VectorXd::Zero(ne + nw);
  big.topRows(ne) = alpha.cwiseSqrt().asDiagonal() * s;
  big.bottomRows(nw) = beta.cwiseSqrt().asDiagonal();
  rhs.head(ne) = -(alpha.cwiseSqrt().cwiseProduct(e));
  return big.colPivHouseholderQr().solve(rhs);
}

}  // namespace

TEST(Tuner, EncodeDecodeSharedAndPerDiagonal) {
  const WeightMatrices id = WeightMatrices::identity();
  const WeightVector s = WeightVector::encode(id, WeightLayout::Shared);
  ASSERT_EQ(s.size(), 2);
  EXPECT_EQ(s.w, VectorXd::Zero(2));
  EXPECT_EQ(s.lower, (VectorXd(2) << 0.0, -6.0).finished());
  EXPECT_EQ(s.upper, (VectorXd(2) << 6.0, 0.0).finished());
  const WeightMatrices back = s.decode();
  EXPECT_EQ(back.q_diag, Vec3::Ones());
  EXPECT_EQ(back.r_diag, Vec6::Ones());

  WeightMatrices m;
  m.q_diag << 10, 100, 1000;
  m.r_diag << 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6;
  const WeightVector p = WeightVector::encode(m, WeightLayout::PerDiagonal);
  ASSERT_EQ(p.size(), 9);
  const WeightMatrices mb = p.decode();
  EXPECT_LE((mb.q_diag - m.q_diag).cwiseQuotient(m.q_diag).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((mb.r_diag - m.r_diag).cwiseQuotient(m.r_diag).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_THROW(wide(VectorXd::Zero(2)).decode(), ConfigError);
}

TEST(Tuner, ClipExamplesAndIdempotence) {
  const WeightVector base = WeightVector::encode(WeightMatrices::identity(), WeightLayout::Shared);
  const ClipResult inside = clip_to_bounds(base.with((VectorXd(2) << 2.5, -3.0).finished()));
  EXPECT_FALSE(inside.any());
  EXPECT_EQ(inside.w.w, (VectorXd(2) << 2.5, -3.0).finished());

  const ClipResult low_r = clip_to_bounds(base.with((VectorXd(2) << 1.0, -8.0).finished()));
  EXPECT_TRUE(low_r.clipped[1]);
  EXPECT_FALSE(low_r.clipped[0]);
  EXPECT_NEAR(low_r.w.decode().r_diag[0], 1e-6, 1e-20);

  const ClipResult high_q = clip_to_bounds(base.with((VectorXd(2) << 7.0, -1.0).finished()));
  EXPECT_TRUE(high_q.clipped[0]);
  EXPECT_NEAR(high_q.w.decode().q_diag[0], 1e6, 1e-8);

  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int n = 0; n < 100; ++n) {
    const WeightVector w = base.with((VectorXd(2) << u(rng), u(rng)).finished());
    const WeightVector once = clip_to_bounds(w).w;
    const ClipResult twice = clip_to_bounds(once);
    EXPECT_EQ(twice.w.w, once.w);
    EXPECT_FALSE(twice.any());
  }
}

TEST(Tuner, UpdateTrivialCases) {
  const VectorXd alpha = VectorXd::Ones(1), beta = VectorXd::Ones(1);
  const MatrixXd s = MatrixXd::Ones(1, 1);
  EXPECT_DOUBLE_EQ(norm_optimal_update(VectorXd::Constant(1, 2.0), s, alpha, beta)[0], -1.0);
  const MatrixXd s4 = MatrixXd::Random(4, 2);
  EXPECT_EQ(norm_optimal_update(VectorXd::Zero(4), s4, VectorXd::Ones(4), VectorXd::Ones(2)), VectorXd::Zero(2));
}

TEST(Tuner, UpdateMatchesIndependentSolveAndIsOptimal) {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> pos(0.01, 10.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int n = 0; n < 200; ++n) {
    const int nw = n % 2 == 0 ? 2 : 9;
    const MatrixXd s = random_matrix(rng, 4, nw);
    const VectorXd e = random_matrix(rng, 4, 1);
    VectorXd alpha(4), beta(nw);
    for (int i = 0; i < 4; ++i) alpha[i] = pos(rng);
    for (int i = 0; i < nw; ++i) beta[i] = pos(rng);
    const VectorXd dw = norm_optimal_update(e, s, alpha, beta);
    const VectorXd ref = oracle_update(e, s, alpha, beta);
    EXPECT_LE((dw - ref).norm(), 1e-10 * std::max(1.0, ref.norm()));
    const double j0 = update_objective(e, s, alpha, beta, dw);
    for (int k = 0; k < 200; ++k) {
      VectorXd d(nw);
      for (int i = 0; i < nw; ++i) d[i] = nd(rng);
      d *= pos(rng) / 10.0 / d.norm();
      EXPECT_LE(j0, update_objective(e, s, alpha, beta, dw + d) + 1e-12);
    }
  }
}

TEST(Tuner, UpdateShrinksAsBetaGrows) {
  std::mt19937_64 rng(33);
  const MatrixXd s = random_matrix(rng, 4, 2);
  const VectorXd e = random_matrix(rng, 4, 1);
  const VectorXd alpha = (VectorXd(4) << 10, 1, 1, 5).finished();
  double prev = std::numeric_limits<double>::infinity();
  for (double b = 1e-3; b < 1e6; b *= 3.0) {
    const double n = norm_optimal_update(e, s, alpha, VectorXd::Constant(2, b)).norm();
    EXPECT_LT(n, prev);
    prev = n;
  }
  EXPECT_LT(prev, 1e-4);
}

TEST(Tuner, SensitivityOfAffineMapIsExact) {
  std::mt19937_64 rng(34);
  const MatrixXd a = random_matrix(rng, 4, 3);
  const VectorXd w_star = random_matrix(rng, 3, 1);
  std::atomic<int> calls{0};
  const SensitivityEstimate est = estimate_sensitivity(affine_rollout(a, w_star, &calls), wide(VectorXd::Zero(3)), 0.5);
  EXPECT_LE((est.sensitivity.s - a).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(est.rollouts, 4);
  EXPECT_EQ(calls.load(), 4);
  EXPECT_LE((est.base.error.e - a * (-w_star)).norm(), 1e-15);
}

TEST(Tuner, SensitivityOfConstantRolloutIsZero) {
  const Rollout constant = [](const WeightVector&) { return from_error(Eigen::Vector4d(0.3, -1, -1, 2)); };
  const SensitivityEstimate est = estimate_sensitivity(constant, wide(VectorXd::Zero(2)), 0.5);
  EXPECT_EQ(est.sensitivity.s, MatrixXd::Zero(4, 2));
}

TEST(Tuner, SensitivityOfQuadraticMapNearGradient) {
  // e_i(w) = 0.5 w' H_i w + g_i' w, gradient at w0 is H_i w0 + g_i.
  std::mt19937_64 rng(35);
  std::vector<MatrixXd> h(4);
  for (auto& m : h) {
    const MatrixXd b = random_matrix(rng, 2, 2);
    m = b * b.transpose();
  }
  const MatrixXd g = random_matrix(rng, 4, 2);
  const Rollout quad = [&](const WeightVector& w) {
    Eigen::Vector4d e;
    for (int i = 0; i < 4; ++i) e[i] = 0.5 * w.w.dot(h[i] * w.w) + g.row(i).dot(w.w);
    return from_error(e);
  };
  const VectorXd w0 = (VectorXd(2) << 0.7, -0.4).finished();
  MatrixXd grad(4, 2);
  for (int i = 0; i < 4; ++i) grad.row(i) = (h[i] * w0).transpose() + g.row(i);
  const SensitivityEstimate est = estimate_sensitivity(quad, wide(w0), 1e-3);
  EXPECT_LE((est.sensitivity.s - grad).norm(), 1e-2 * grad.norm());
}

TEST(Tuner, SensitivityUsesBackwardDifferenceAtUpperBound) {
  const WeightVector w0 = WeightVector::encode(WeightMatrices::identity(), WeightLayout::Shared);
  const MatrixXd a = (MatrixXd(4, 2) << -1, 1, 0.1, -0.1, 0, 0, -2, 2).finished();
  std::vector<VectorXd> seen;
  const Rollout r = [&](const WeightVector& w) {
    seen.push_back(w.w);
    return from_error(a * w.w);
  };
  const SensitivityEstimate est = estimate_sensitivity(r, w0, 0.5);
  EXPECT_EQ(est.sensitivity.step, (VectorXd(2) << 0.5, -0.5).finished());
  for (const auto& v : seen) {
    EXPECT_TRUE((v.array() >= w0.lower.array()).all());
    EXPECT_TRUE((v.array() <= w0.upper.array()).all());
  }
  EXPECT_LE((est.sensitivity.s - a).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Tuner, ParallelSensitivityMatchesSerial) {
  std::mt19937_64 rng(36);
  const MatrixXd a = random_matrix(rng, 4, 9);
  const VectorXd w_star = random_matrix(rng, 9, 1);
  const WeightVector w = wide(VectorXd::Zero(9));
  const SensitivityEstimate s1 = estimate_sensitivity(affine_rollout(a, w_star), w, 0.5, false);
  const SensitivityEstimate s2 = estimate_sensitivity(affine_rollout(a, w_star), w, 0.5, true);
  EXPECT_EQ(s1.sensitivity.s, s2.sensitivity.s);
  EXPECT_EQ(s1.base.error.e, s2.base.error.e);
}

TEST(Tuner, RolloutErrorsPropagate) {
  const Rollout throws = [](const WeightVector&) -> RolloutResult { throw std::runtime_error("boom"); };
  EXPECT_THROW(estimate_sensitivity(throws, wide(VectorXd::Zero(2)), 0.5), RolloutFailure);
  const Rollout nan = [](const WeightVector&) {
    return from_error(Eigen::Vector4d(std::numeric_limits<double>::quiet_NaN(), 0, 0, 0));
  };
  TunerConfig cfg;
  EXPECT_THROW(run_tuning(cfg, nan, wide(VectorXd::Zero(2))), NonFinite);
}

TEST(Tuner, ImmediateConvergenceStopsAfterOneRepetition) {
  std::atomic<int> calls{0};
  const Rollout zero = [&](const WeightVector&) {
    ++calls;
    return from_error(Eigen::Vector4d::Zero());
  };
  const WeightVector w0 = WeightVector::encode(WeightMatrices::identity(), WeightLayout::Shared);
  const TuningHistory h = run_tuning(TunerConfig{}, zero, w0);
  ASSERT_EQ(h.repetitions(), 1);
  EXPECT_TRUE(h.converged);
  EXPECT_EQ(h.entries[0].w.w, w0.w);
  EXPECT_EQ(h.entries[0].w.decode().q_diag, Vec3::Ones());
  EXPECT_EQ(h.entries[0].w.decode().r_diag, Vec6::Ones());
  EXPECT_EQ(h.rollouts, 3);  // base + one per column
  EXPECT_EQ(calls.load(), 3);
}

TEST(Tuner, AffineRolloutConvergesWithPredictedContraction) {
  // A = alpha^{-1/2} U s with orthonormal U: A' alpha A = s^2 I, so e_{l+1} = beta/(s^2+beta) e_l.
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> sv(0.5, 3.0);
  const VectorXd alpha = (VectorXd(4) << 10, 1, 1, 5).finished();
  for (int n = 0; n < 20; ++n) {
    const MatrixXd u = random_matrix(rng, 4, 2).householderQr().householderQ() * MatrixXd::Identity(4, 2);
    const double s = sv(rng);
    const MatrixXd a = alpha.cwiseSqrt().cwiseInverse().asDiagonal() * u * s;
    const VectorXd w_star = 2.0 * random_matrix(rng, 2, 1);
    TunerConfig cfg;
    cfg.alpha = alpha;
    cfg.beta = 0.1 * s * s;
    cfg.ell_max = 100;
    const double rho = cfg.beta / (s * s + cfg.beta);
    const TuningHistory h = run_tuning(cfg, affine_rollout(a, w_star), wide(VectorXd::Zero(2)), &a);
    ASSERT_TRUE(h.converged);
    const double e0 = h.entries[0].result.error.e.norm();
    const int predicted = static_cast<int>(std::ceil(std::log(cfg.epsilon / e0) / std::log(rho))) + 1;
    EXPECT_LE(std::abs(h.repetitions() - predicted), 1);
    for (std::size_t l = 1; l < h.entries.size(); ++l) {
      const double ratio = h.entries[l].result.error.e.norm() / h.entries[l - 1].result.error.e.norm();
      EXPECT_NEAR(ratio, rho, 1e-9);
    }
    EXPECT_LE((h.final_entry().w.w - w_star).norm(), 0.05 * w_star.norm() + 0.05);
  }
}

TEST(Tuner, AlphaNormDecreasesWithExactSensitivity) {
  std::mt19937_64 rng(38);
  const VectorXd alpha = (VectorXd(4) << 10, 1, 1, 5).finished();
  for (int n = 0; n < 50; ++n) {
    const int nw = n % 2 == 0 ? 2 : 9;
    const MatrixXd a = random_matrix(rng, 4, nw);
    const VectorXd w_star = random_matrix(rng, nw, 1);
    TunerConfig cfg;
    cfg.ell_max = 30;
    const TuningHistory h = run_tuning(cfg, affine_rollout(a, w_star), wide(VectorXd::Zero(nw)), &a);
    EXPECT_LE(h.repetitions(), cfg.ell_max);
    for (std::size_t l = 1; l < h.entries.size(); ++l) {
      const Eigen::Vector4d e1 = h.entries[l].result.error.e, e0 = h.entries[l - 1].result.error.e;
      EXPECT_LE(e1.dot(alpha.cwiseProduct(e1)), e0.dot(alpha.cwiseProduct(e0)) + 1e-12);
    }
  }
}

TEST(Tuner, HistoryIsDeterministicAndBounded) {
  std::mt19937_64 rng(39);
  const MatrixXd a = random_matrix(rng, 4, 2);
  const VectorXd w_star = random_matrix(rng, 2, 1);
  TunerConfig cfg;
  cfg.ell_max = 5;
  cfg.epsilon = 1e-12;
  cfg.refresh_every = 2;
  const TuningHistory h1 = run_tuning(cfg, affine_rollout(a, w_star), wide(VectorXd::Zero(2)));
  const TuningHistory h2 = run_tuning(cfg, affine_rollout(a, w_star), wide(VectorXd::Zero(2)));
  ASSERT_EQ(h1.repetitions(), 5);
  EXPECT_FALSE(h1.converged);
  ASSERT_EQ(h1.repetitions(), h2.repetitions());
  for (int l = 0; l < h1.repetitions(); ++l) {
    EXPECT_EQ(h1.entries[l].w.w, h2.entries[l].w.w);
    EXPECT_EQ(h1.entries[l].result.error.e, h2.entries[l].result.error.e);
  }
  // Refresh due at rep 3; rep 5 is the last and never refreshes.
  EXPECT_EQ(h1.sensitivity.estimated_at_rep, 3);
  EXPECT_EQ(h1.rollouts, 3 + 4 + 2);
}

TEST(Tuner, TargetsStopRule) {
  // e(w) = (1 - w0, -1, -1, 1 - w0): all targets met once w0 >= 1. The supplied S halves the
  // true slope so the first step overshoots past w0 = 1.
  const Rollout r = [](const WeightVector& w) {
    return from_error(Eigen::Vector4d(1.0 - w.w[0], -1.0, -1.0, 1.0 - w.w[0]));
  };
  const MatrixXd s = (MatrixXd(4, 2) << -0.5, 0, 0, 0, 0, 0, -0.5, 0).finished();
  TunerConfig cfg;
  cfg.stop_rule = StopRule::Targets;
  const TuningHistory h = run_tuning(cfg, r, wide(VectorXd::Zero(2)), &s);
  EXPECT_TRUE(h.converged);
  EXPECT_EQ(h.repetitions(), 2);
  EXPECT_TRUE(targets_met(h.final_entry().result.error));
  cfg.stop_rule = StopRule::Norm;
  EXPECT_FALSE(run_tuning(cfg, r, wide(VectorXd::Zero(2)), &s).converged);  // |e| >= sqrt(2) always
}

TEST(Tuner, ConfigValidation) {
  TunerConfig cfg;
  EXPECT_NO_THROW(cfg.validate(2));
  cfg.beta = 0.0;
  EXPECT_THROW(cfg.validate(2), ConfigError);
  cfg = TunerConfig{};
  cfg.alpha[0] = -1.0;
  EXPECT_THROW(cfg.validate(2), ConfigError);
  cfg = TunerConfig{};
  cfg.ell_max = 0;
  EXPECT_THROW(cfg.validate(2), ConfigError);
  cfg = TunerConfig{};
  cfg.beta_diag = VectorXd::Ones(3);
  EXPECT_THROW(cfg.validate(2), ConfigError);
}

TEST(Tuner, CsvLayout) {
  const Rollout zero = [](const WeightVector&) { return from_error(Eigen::Vector4d::Zero()); };
  const TuningHistory h =
      run_tuning(TunerConfig{}, zero, WeightVector::encode(WeightMatrices::identity(), WeightLayout::Shared));
  std::ostringstream os;
  write_tuning_csv(h, os);
  EXPECT_EQ(os.str(),
            "rep,q1,q2,q3,r1,r2,r3,r4,r5,r6,control_effort,rmse_m,rms_du,sat_ratio,max_ee_m,e_rmse,e_du,e_sat,e_maxee\n"
            "1,1,1,1,1,1,1,1,1,1,0,0,0,0,0,0,0,0,0\n");
}
