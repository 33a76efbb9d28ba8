#pragma once
// Receding-horizon tracking controller for the kinematic manipulator model.
//
// Each control step solves
//
//   min_U  sum_{k=0}^{N-1} |p_k - r_k|^2_Q + w_k |p_k - v_k|^2 + |u_k - u_{k-1}|^2_R
//          + rho |q_{k+1} - clamp(q_{k+1})|^2
//   s.t.   q_{k+1} = q_k + Ts u_k,   p_k = h(q_{k+1}),   qdot_min <= u_k <= qdot_max
//
// with a projected Gauss-Newton method over the stacked input sequence U. Input bounds
// are enforced by projection; position bounds by the exterior penalty rho. The stopping
// test is on the diagonally scaled projected gradient step, max_i |u_i - P(u_i - g_i/H_ii)|.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "nmpc_tune/errors.hpp"
#include "nmpc_tune/robot.hpp"

namespace nmpc_tune {

struct WeightBounds {
  double q_min = 1.0;
  double q_max = 1e6;
  double r_min = 1e-6;
  double r_max = 1.0;
};

struct WeightMatrices {
  Vec3 q_diag = Vec3::Ones();  // position tracking, 1/m^2
  Vec6 r_diag = Vec6::Ones();  // input rate, s^2/rad^2

  static WeightMatrices identity() { return {}; }
  static WeightMatrices uniform(double q, double r) {
    WeightMatrices w;
    w.q_diag.setConstant(q);
    w.r_diag.setConstant(r);
    return w;
  }

  void validate(const WeightBounds& b = {}) const {
    for (int i = 0; i < 3; ++i) {
      if (!(q_diag[i] >= b.q_min && q_diag[i] <= b.q_max))
        throw OutOfBounds("Q entry " + std::to_string(q_diag[i]) + " outside [" + std::to_string(b.q_min) +
                          ", " + std::to_string(b.q_max) + "]");
    }
    for (int i = 0; i < 6; ++i) {
      if (!(r_diag[i] >= b.r_min && r_diag[i] <= b.r_max))
        throw OutOfBounds("R entry " + std::to_string(r_diag[i]) + " outside [" + std::to_string(b.r_min) +
                          ", " + std::to_string(b.r_max) + "]");
    }
  }
};

struct SolverSettings {
  double kkt_tol = 1e-6;
  int max_sqp_iters = 30;
  double armijo_c = 1e-4;
  double backtrack = 0.5;
  double min_step = 1e-8;
  double state_penalty = 1e6;
};

struct NmpcConfig {
  int horizon = 10;
  double ts = 0.008;  // s
  JointLimits limits = JointLimits::ur10e();
  SolverSettings solver;
  WeightBounds weight_bounds;

  void validate() const {
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (!(ts > 0.0)) throw ConfigError("ts_s must be > 0");
    if (!(solver.kkt_tol > 0.0)) throw ConfigError("kkt_tol must be > 0");
    if (solver.max_sqp_iters < 1) throw ConfigError("max_sqp_iters must be >= 1");
    if (!(solver.backtrack > 0.0 && solver.backtrack < 1.0)) throw ConfigError("backtrack must be in (0,1)");
    limits.validate();
  }
};

// Output maps p = h(q). Any type with `void eval(const JointState&, Vec3&, Mat36&) const`
// and `Vec3 position(const JointState&) const` can drive the solver.
struct DhOutputModel {
  DhParameters dh;
  void eval(const JointState& q, Vec3& p, Mat36& jac) const { position_and_jacobian(dh, q, p, jac); }
  Vec3 position(const JointState& q) const { return fk_position(dh, q); }
};

struct LinearOutputModel {
  Mat36 c = Mat36::Zero();
  Vec3 offset = Vec3::Zero();
  void eval(const JointState& q, Vec3& p, Mat36& jac) const {
    p = c * q + offset;
    jac = c;
  }
  Vec3 position(const JointState& q) const { return c * q + offset; }
};

// Horizon data: N position references and, optionally, N vertex attractors with weights.
struct TrackingWindow {
  std::vector<Vec3> p_ref;
  std::vector<Vec3> vertex;
  std::vector<double> vertex_weight;

  bool has_vertex_term() const { return !vertex_weight.empty(); }
};

enum class SolveStatus { Converged, MaxIterations, Stalled };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Converged: return "converged";
    case SolveStatus::MaxIterations: return "max_iterations";
    case SolveStatus::Stalled: return "stalled";
  }
  return "unknown";
}

struct CftocSolution {
  std::vector<JointCommand> u;       // N inputs
  std::vector<JointState> q_pred;    // N + 1 states, q_pred[0] = q0
  std::vector<Vec3> p_pred;          // N outputs, p_pred[k] = h(q_pred[k + 1])
  double objective = 0.0;
  std::vector<double> objective_trace;  // objective after every accepted step (first entry: start)
  SolveStatus status = SolveStatus::Converged;
  int iterations = 0;
  double kkt_residual = 0.0;
  double wall_ms = 0.0;
};

namespace detail {

using Eigen::MatrixXd;
using Eigen::VectorXd;

template <typename Model>
class CftocEvaluator {
 public:
  CftocEvaluator(const Model& model, const NmpcConfig& cfg, const WeightMatrices& w, const JointState& q0,
                 const JointCommand& u_prev, const TrackingWindow& window)
      : model_(model), cfg_(cfg), w_(w), q0_(q0), u_prev_(u_prev), window_(window), n_(cfg.horizon) {}

  int size() const { return 6 * n_; }

  double objective(const VectorXd& u) const {
    JointState q = q0_;
    JointCommand prev = u_prev_;
    double f = 0.0;
    for (int k = 0; k < n_; ++k) {
      const JointCommand uk = u.segment<6>(6 * k);
      q += cfg_.ts * uk;
      const Vec3 p = model_.position(q);
      const Vec3 e = p - window_.p_ref[k];
      f += e.dot(w_.q_diag.cwiseProduct(e));
      if (window_.has_vertex_term()) f += window_.vertex_weight[k] * (p - window_.vertex[k]).squaredNorm();
      const Vec6 du = uk - prev;
      f += du.dot(w_.r_diag.cwiseProduct(du));
      const Vec6 viol = q - cfg_.limits.clamp_position(q);
      f += cfg_.solver.state_penalty * viol.squaredNorm();
      prev = uk;
    }
    return f;
  }

  // Gauss-Newton model: gradient g and Hessian approximation h of the objective at u.
  double linearize(const VectorXd& u, VectorXd& g, MatrixXd& h) const {
    const int m = size();
    const double ts = cfg_.ts;
    const double rho = cfg_.solver.state_penalty;
    g.setZero(m);
    h.setZero(m, m);

    // Per-stage curvature A_k and gradient b_k of the output/penalty terms with respect to
    // q_{k+1}; u_j (j <= k) enters q_{k+1} with factor ts, so the blocks are suffix sums.
    std::vector<Eigen::Matrix<double, 6, 6>> a(n_);
    std::vector<Vec6> b(n_);
    JointState q = q0_;
    double f = 0.0;
    for (int k = 0; k < n_; ++k) {
      q += ts * u.segment<6>(6 * k);
      Vec3 p;
      Mat36 jac;
      model_.eval(q, p, jac);
      const Vec3 e = p - window_.p_ref[k];
      Vec3 wdiag = w_.q_diag;
      Vec3 we = w_.q_diag.cwiseProduct(e);
      f += e.dot(we);
      if (window_.has_vertex_term()) {
        const double wv = window_.vertex_weight[k];
        const Vec3 ev = p - window_.vertex[k];
        wdiag.array() += wv;
        we += wv * ev;
        f += wv * ev.squaredNorm();
      }
      a[k] = jac.transpose() * wdiag.asDiagonal() * jac;
      b[k] = jac.transpose() * we;
      const Vec6 viol = q - cfg_.limits.clamp_position(q);
      f += rho * viol.squaredNorm();
      for (int i = 0; i < 6; ++i) {
        if (viol[i] != 0.0) {
          a[k](i, i) += rho;
          b[k][i] += rho * viol[i];
        }
      }
    }
    for (int k = n_ - 2; k >= 0; --k) {
      a[k] += a[k + 1];
      b[k] += b[k + 1];
    }
    for (int i = 0; i < n_; ++i) {
      g.segment<6>(6 * i) = 2.0 * ts * b[i];
      for (int j = 0; j < n_; ++j) h.block<6, 6>(6 * i, 6 * j) = 2.0 * ts * ts * a[std::max(i, j)];
    }

    // Input-rate term with u_{-1} fixed.
    const Vec6 r2 = 2.0 * w_.r_diag;
    for (int k = 0; k < n_; ++k) {
      const JointCommand uk = u.segment<6>(6 * k);
      const Vec6 prev = k == 0 ? Vec6(u_prev_) : Vec6(u.segment<6>(6 * (k - 1)));
      const Vec6 du = uk - prev;
      f += du.dot(w_.r_diag.cwiseProduct(du));
      g.segment<6>(6 * k) += r2.cwiseProduct(du);
      h.block<6, 6>(6 * k, 6 * k).diagonal() += r2;
      if (k > 0) {
        g.segment<6>(6 * (k - 1)) -= r2.cwiseProduct(du);
        h.block<6, 6>(6 * (k - 1), 6 * (k - 1)).diagonal() += r2;
        h.block<6, 6>(6 * k, 6 * (k - 1)).diagonal() -= r2;
        h.block<6, 6>(6 * (k - 1), 6 * k).diagonal() -= r2;
      }
    }
    return f;
  }

 private:
  const Model& model_;
  const NmpcConfig& cfg_;
  const WeightMatrices& w_;
  JointState q0_;
  JointCommand u_prev_;
  const TrackingWindow& window_;
  int n_;
};

}  // namespace detail

// Solve one receding-horizon subproblem. `u_init` (6N, optional) seeds the iteration and
// is projected onto the input box; an empty vector means a cold start from zero.
template <typename Model>
CftocSolution solve_cftoc(const Model& model, const NmpcConfig& cfg, const WeightMatrices& w,
                          const JointState& q0, const JointCommand& u_prev, const TrackingWindow& window,
                          const Eigen::VectorXd& u_init = {}) {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const auto t_start = std::chrono::steady_clock::now();
  const int n = cfg.horizon;
  if (static_cast<int>(window.p_ref.size()) != n)
    throw ConfigError("reference window must hold exactly N points");
  if (window.has_vertex_term() &&
      (static_cast<int>(window.vertex.size()) != n || static_cast<int>(window.vertex_weight.size()) != n))
    throw ConfigError("vertex window must hold exactly N points");

  const int m = 6 * n;
  VectorXd lb(m), ub(m);
  for (int k = 0; k < n; ++k) {
    lb.segment<6>(6 * k) = cfg.limits.qdot_min;
    ub.segment<6>(6 * k) = cfg.limits.qdot_max;
  }
  auto project = [&](const VectorXd& x) -> VectorXd { return x.cwiseMax(lb).cwiseMin(ub); };

  detail::CftocEvaluator<Model> eval(model, cfg, w, q0, u_prev, window);
  VectorXd u = u_init.size() == m ? project(u_init) : VectorXd::Zero(m);

  CftocSolution sol;
  sol.status = SolveStatus::MaxIterations;
  VectorXd g(m);
  MatrixXd h(m, m);
  double f = eval.linearize(u, g, h);
  sol.objective_trace.push_back(f);
  const auto& s = cfg.solver;

  int it = 0;
  for (;; ++it) {
    // Projected step with diagonal scaling, in rad/s; invariant to a common scaling of Q and R.
    const VectorXd scaled = g.cwiseQuotient(h.diagonal().cwiseMax(1e-300));
    const double kkt = (u - project(u - scaled)).cwiseAbs().maxCoeff();
    sol.kkt_residual = kkt;
    if (kkt <= s.kkt_tol) {
      sol.status = SolveStatus::Converged;
      break;
    }
    if (it >= s.max_sqp_iters) break;

    // Bound-active set: at a bound with the gradient pointing outward.
    const double eps = std::min(1e-8, kkt);
    std::vector<int> free_idx;
    std::vector<char> active(m, 0);
    for (int i = 0; i < m; ++i) {
      if ((u[i] <= lb[i] + eps && g[i] > 0.0) || (u[i] >= ub[i] - eps && g[i] < 0.0))
        active[i] = 1;
      else
        free_idx.push_back(i);
    }
    VectorXd d = VectorXd::Zero(m);
    const int nf = static_cast<int>(free_idx.size());
    if (nf > 0) {
      MatrixXd hf(nf, nf);
      VectorXd gf(nf);
      for (int a = 0; a < nf; ++a) {
        gf[a] = g[free_idx[a]];
        for (int b = 0; b < nf; ++b) hf(a, b) = h(free_idx[a], free_idx[b]);
      }
      Eigen::LLT<MatrixXd> llt(hf);
      VectorXd df;
      if (llt.info() == Eigen::Success) {
        df = -llt.solve(gf);
      } else {
        df = -hf.ldlt().solve(gf);
      }
      if (!df.allFinite()) df = -gf;
      for (int a = 0; a < nf; ++a) d[free_idx[a]] = df[a];
    }
    for (int i = 0; i < m; ++i) {
      if (active[i]) d[i] = -g[i] / std::max(h(i, i), 1e-12);
    }

    // Armijo backtracking along the projection arc.
    double t = 1.0;
    bool accepted = false;
    VectorXd u_try;
    double f_try = f;
    while (t >= s.min_step) {
      u_try = project(u + t * d);
      double decrease = 0.0;
      for (int i = 0; i < m; ++i) {
        if (active[i])
          decrease += g[i] * (u[i] - u_try[i]);
        else
          decrease += -t * g[i] * d[i];
      }
      f_try = eval.objective(u_try);
      if (std::isfinite(f_try) && f_try <= f - s.armijo_c * decrease && f_try <= f) {
        accepted = true;
        break;
      }
      t *= s.backtrack;
    }
    if (!accepted) {
      sol.status = SolveStatus::Stalled;
      break;
    }
    u = u_try;
    eval.linearize(u, g, h);
    f = f_try;  // the value the line search accepted, so the trace is monotone bit for bit
    sol.objective_trace.push_back(f);
  }
  sol.iterations = it;
  sol.objective = f;
  if (!std::isfinite(f) || !u.allFinite()) throw SolverFailure("CFTOC produced a non-finite iterate");

  sol.u.resize(n);
  sol.q_pred.resize(n + 1);
  sol.p_pred.resize(n);
  sol.q_pred[0] = q0;
  for (int k = 0; k < n; ++k) {
    sol.u[k] = u.segment<6>(6 * k);
    // Reported through the clamping plant; the penalty only shapes the optimizer.
    sol.q_pred[k + 1] = plant_step(sol.q_pred[k], sol.u[k], cfg.ts, cfg.limits);
    sol.p_pred[k] = model.position(sol.q_pred[k + 1]);
  }
  sol.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
  return sol;
}

struct StepTelemetry {
  int iterations = 0;
  double kkt_residual = 0.0;
  double wall_ms = 0.0;
  bool degraded = false;
};

// Closed-loop controller: holds u_{-1} and the warm-start sequence between steps.
template <typename Model>
class NmpcController {
 public:
  NmpcController(Model model, NmpcConfig cfg, WeightMatrices weights)
      : model_(std::move(model)), cfg_(std::move(cfg)) {
    cfg_.validate();
    set_weights(weights);
    reset();
  }

  void set_weights(const WeightMatrices& w) {
    w.validate(cfg_.weight_bounds);
    weights_ = w;
  }

  void reset(const JointCommand& u_prev = JointCommand::Zero()) {
    u_prev_ = u_prev;
    warm_.resize(0);
  }

  // Apply-first-input step. On a stalled solve the best feasible iterate found is used and
  // the step is flagged as degraded.
  JointCommand control_step(const JointState& q_measured, const TrackingWindow& window) {
    const int n = cfg_.horizon;
    Eigen::VectorXd init;
    if (warm_.size() == 6 * n) {
      init.resize(6 * n);
      init.head(6 * (n - 1)) = warm_.tail(6 * (n - 1));
      init.tail<6>() = warm_.tail<6>();
    }
    const CftocSolution sol = solve_cftoc(model_, cfg_, weights_, q_measured, u_prev_, window, init);
    last_.iterations = sol.iterations;
    last_.kkt_residual = sol.kkt_residual;
    last_.wall_ms = sol.wall_ms;
    last_.degraded = sol.status == SolveStatus::Stalled;
    warm_.resize(6 * n);
    for (int k = 0; k < n; ++k) warm_.segment<6>(6 * k) = sol.u[k];
    const JointCommand u0 = cfg_.limits.clamp_velocity(sol.u.front());
    u_prev_ = u0;
    return u0;
  }

  const StepTelemetry& last_telemetry() const { return last_; }
  const WeightMatrices& weights() const { return weights_; }
  const NmpcConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }
  const JointCommand& u_prev() const { return u_prev_; }

 private:
  Model model_;
  NmpcConfig cfg_;
  WeightMatrices weights_;
  JointCommand u_prev_ = JointCommand::Zero();
  Eigen::VectorXd warm_;
  StepTelemetry last_;
};

}  // namespace nmpc_tune
