#pragma once
// Outer-loop weight tuning across task repetitions.
//
// The KPI error is modelled locally as e_{l+1} = e_l + S dW, with S estimated from
// perturbed closed-loop rollouts. Each repetition applies the minimizer of
//   |e_l + S dW|^2_alpha + |dW|^2_beta,   dW* = -(S' alpha S + beta)^{-1} S' alpha e_l,
// on log10-weights, followed by clipping to the weight bounds.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <future>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "nmpc_tune/errors.hpp"
#include "nmpc_tune/kpi.hpp"
#include "nmpc_tune/nmpc.hpp"

namespace nmpc_tune {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class WeightLayout {
  Shared,       // (log10 q, log10 r): one scalar per matrix
  PerDiagonal,  // 3 Q entries then 6 R entries
  Generic,      // arbitrary parameter vector, no decoding
};

inline const char* to_string(WeightLayout l) {
  switch (l) {
    case WeightLayout::Shared: return "shared";
    case WeightLayout::PerDiagonal: return "per_diagonal";
    case WeightLayout::Generic: return "generic";
  }
  return "unknown";
}

// Log10-domain parameter vector together with its element-wise bounds.
struct WeightVector {
  WeightLayout layout = WeightLayout::Shared;
  VectorXd w;
  VectorXd lower;
  VectorXd upper;

  int size() const { return static_cast<int>(w.size()); }

  static WeightVector encode(const WeightMatrices& m, WeightLayout layout, const WeightBounds& b = {}) {
    WeightVector v;
    v.layout = layout;
    if (layout == WeightLayout::Shared) {
      // Shared layout requires uniform diagonals; the first entries are taken.
      v.w.resize(2);
      v.w << std::log10(m.q_diag[0]), std::log10(m.r_diag[0]);
      v.lower.resize(2);
      v.upper.resize(2);
      v.lower << std::log10(b.q_min), std::log10(b.r_min);
      v.upper << std::log10(b.q_max), std::log10(b.r_max);
    } else if (layout == WeightLayout::PerDiagonal) {
      v.w.resize(9);
      v.lower.resize(9);
      v.upper.resize(9);
      for (int i = 0; i < 3; ++i) {
        v.w[i] = std::log10(m.q_diag[i]);
        v.lower[i] = std::log10(b.q_min);
        v.upper[i] = std::log10(b.q_max);
      }
      for (int i = 0; i < 6; ++i) {
        v.w[3 + i] = std::log10(m.r_diag[i]);
        v.lower[3 + i] = std::log10(b.r_min);
        v.upper[3 + i] = std::log10(b.r_max);
      }
    } else {
      throw ConfigError("generic weight vectors cannot be encoded from weight matrices");
    }
    return v;
  }

  static WeightVector generic(VectorXd w, VectorXd lower, VectorXd upper) {
    if (w.size() != lower.size() || w.size() != upper.size())
      throw ConfigError("weight vector and bounds must have equal length");
    return {WeightLayout::Generic, std::move(w), std::move(lower), std::move(upper)};
  }

  WeightMatrices decode() const {
    WeightMatrices m;
    if (layout == WeightLayout::Shared) {
      m.q_diag.setConstant(std::pow(10.0, w[0]));
      m.r_diag.setConstant(std::pow(10.0, w[1]));
    } else if (layout == WeightLayout::PerDiagonal) {
      for (int i = 0; i < 3; ++i) m.q_diag[i] = std::pow(10.0, w[i]);
      for (int i = 0; i < 6; ++i) m.r_diag[i] = std::pow(10.0, w[3 + i]);
    } else {
      throw ConfigError("generic weight vectors do not decode to weight matrices");
    }
    return m;
  }

  WeightVector with(VectorXd values) const {
    WeightVector v = *this;
    v.w = std::move(values);
    return v;
  }
};

struct ClipResult {
  WeightVector w;
  std::vector<bool> clipped;
  bool any() const {
    for (bool c : clipped)
      if (c) return true;
    return false;
  }
};

inline ClipResult clip_to_bounds(const WeightVector& proposed) {
  ClipResult out{proposed, std::vector<bool>(proposed.size(), false)};
  for (int i = 0; i < proposed.size(); ++i) {
    const double v = std::min(std::max(proposed.w[i], proposed.lower[i]), proposed.upper[i]);
    out.clipped[i] = v != proposed.w[i];
    out.w.w[i] = v;
  }
  return out;
}

// Outcome of one closed-loop repetition, as seen by the tuner.
struct RolloutResult {
  KpiReport report;
  KpiError error;
  double control_effort = 0.0;
};

using Rollout = std::function<RolloutResult(const WeightVector&)>;

struct SensitivityMatrix {
  MatrixXd s;                // n_e x n_w, per log-decade
  VectorXd step;             // signed perturbation actually used per column
  int estimated_at_rep = 0;  // 1-based repetition whose weights were the base point
};

struct SensitivityEstimate {
  SensitivityMatrix sensitivity;
  RolloutResult base;
  int rollouts = 0;
};

namespace detail {

inline RolloutResult checked_rollout(const Rollout& rollout, const WeightVector& w) {
  RolloutResult r;
  try {
    r = rollout(w);
  } catch (const RolloutFailure&) {
    throw;
  } catch (const std::exception& e) {
    throw RolloutFailure(std::string("closed-loop rollout failed: ") + e.what());
  }
  if (!r.error.e.allFinite()) throw NonFinite("rollout produced a non-finite KPI error");
  return r;
}

}  // namespace detail

// Forward differences in the log domain; a component closer than `delta` to its upper
// bound is differenced backwards instead. Consumes exactly n_w + 1 rollouts.
inline SensitivityEstimate estimate_sensitivity(const Rollout& rollout, const WeightVector& w, const VectorXd& delta,
                                                bool parallel = false) {
  const int nw = w.size();
  if (delta.size() != nw) throw ConfigError("perturbation vector must match the weight vector length");
  VectorXd step(nw);
  for (int j = 0; j < nw; ++j) {
    if (!(delta[j] > 0.0)) throw ConfigError("perturbation sizes must be > 0");
    step[j] = w.w[j] + delta[j] <= w.upper[j] ? delta[j] : -delta[j];
  }
  auto perturbed = [&](int j) {
    VectorXd v = w.w;
    v[j] += step[j];
    return detail::checked_rollout(rollout, w.with(v));
  };

  SensitivityEstimate out;
  std::vector<RolloutResult> cols(nw);
  if (parallel) {
    std::vector<std::future<RolloutResult>> jobs;
    auto base_job = std::async(std::launch::async, [&] { return detail::checked_rollout(rollout, w); });
    for (int j = 0; j < nw; ++j) jobs.push_back(std::async(std::launch::async, perturbed, j));
    out.base = base_job.get();
    for (int j = 0; j < nw; ++j) cols[j] = jobs[j].get();
  } else {
    out.base = detail::checked_rollout(rollout, w);
    for (int j = 0; j < nw; ++j) cols[j] = perturbed(j);
  }
  out.rollouts = nw + 1;
  out.sensitivity.s.resize(out.base.error.e.size(), nw);
  for (int j = 0; j < nw; ++j) out.sensitivity.s.col(j) = (cols[j].error.e - out.base.error.e) / step[j];
  out.sensitivity.step = step;
  return out;
}

inline SensitivityEstimate estimate_sensitivity(const Rollout& rollout, const WeightVector& w, double delta,
                                                bool parallel = false) {
  return estimate_sensitivity(rollout, w, VectorXd::Constant(w.size(), delta), parallel);
}

// dW* = -(S' alpha S + beta)^{-1} S' alpha e, with alpha and beta diagonal.
inline VectorXd norm_optimal_update(const VectorXd& e, const MatrixXd& s, const VectorXd& alpha, const VectorXd& beta) {
  if (s.rows() != e.size() || alpha.size() != e.size() || beta.size() != s.cols())
    throw ConfigError("norm_optimal_update: dimension mismatch");
  const MatrixXd sta = s.transpose() * alpha.asDiagonal();
  MatrixXd lhs = sta * s;
  lhs.diagonal() += beta;
  return -lhs.llt().solve(sta * e);
}

// |e + S dW|^2_alpha + |dW|^2_beta
inline double update_objective(const VectorXd& e, const MatrixXd& s, const VectorXd& alpha, const VectorXd& beta,
                               const VectorXd& dw) {
  const VectorXd r = e + s * dw;
  return r.dot(alpha.cwiseProduct(r)) + dw.dot(beta.cwiseProduct(dw));
}

enum class StopRule {
  Norm,     // |e| <= epsilon
  Targets,  // every KPI at or better than its target (e_i <= 0)
};

struct TunerConfig {
  VectorXd alpha = (VectorXd(4) << 10.0, 1.0, 1.0, 5.0).finished();
  double beta = 0.1;  // beta = beta * I unless beta_diag is set
  VectorXd beta_diag;
  double delta = 0.5;  // log10 decades
  double epsilon = 0.05;
  int ell_max = 10;
  int refresh_every = 0;  // re-estimate S every k repetitions; 0 keeps the initial estimate
  StopRule stop_rule = StopRule::Norm;
  bool parallel_sensitivity = false;

  VectorXd beta_vector(int nw) const {
    if (beta_diag.size() > 0) return beta_diag;
    return VectorXd::Constant(nw, beta);
  }

  void validate(int nw) const {
    if ((alpha.array() < 0.0).any()) throw ConfigError("alpha entries must be >= 0");
    const VectorXd b = beta_vector(nw);
    if (b.size() != nw) throw ConfigError("beta must have one entry per weight parameter");
    if (!(b.array() > 0.0).all()) throw ConfigError("beta entries must be > 0");
    if (!(delta > 0.0)) throw ConfigError("delta must be > 0");
    if (ell_max < 1) throw ConfigError("ell_max must be >= 1");
    if (refresh_every < 0) throw ConfigError("refresh_every must be >= 0");
  }
};

struct TuningEntry {
  int rep = 0;  // 1-based
  WeightVector w;
  RolloutResult result;
  VectorXd dw;        // applied increment after clipping (empty on the last entry)
  bool clipped = false;
};

struct TuningHistory {
  std::vector<TuningEntry> entries;
  SensitivityMatrix sensitivity;
  bool converged = false;
  int rollouts = 0;

  const TuningEntry& final_entry() const { return entries.back(); }
  int repetitions() const { return static_cast<int>(entries.size()); }
};

inline bool is_converged(const KpiError& e, const TunerConfig& cfg) {
  if (cfg.stop_rule == StopRule::Targets) return targets_met(e);
  return e.e.norm() <= cfg.epsilon;
}

// Repetition loop. The base rollout of the sensitivity estimate doubles as repetition 1.
// `given_s` bypasses estimation (and its n_w perturbation rollouts) when supplied.
inline TuningHistory run_tuning(const TunerConfig& cfg, const Rollout& rollout, const WeightVector& w0,
                                const MatrixXd* given_s = nullptr) {
  const int nw = w0.size();
  cfg.validate(nw);
  const VectorXd beta = cfg.beta_vector(nw);
  if (cfg.alpha.size() != 4) throw ConfigError("alpha must have 4 entries");

  TuningHistory hist;
  WeightVector w = clip_to_bounds(w0).w;
  RolloutResult current;
  if (given_s != nullptr) {
    if (given_s->rows() != 4 || given_s->cols() != nw) throw ConfigError("sensitivity matrix must be 4 x n_w");
    hist.sensitivity.s = *given_s;
    hist.sensitivity.estimated_at_rep = 0;
    current = detail::checked_rollout(rollout, w);
    hist.rollouts = 1;
  } else {
    SensitivityEstimate est = estimate_sensitivity(rollout, w, cfg.delta, cfg.parallel_sensitivity);
    hist.sensitivity = est.sensitivity;
    hist.sensitivity.estimated_at_rep = 1;
    current = est.base;
    hist.rollouts = est.rollouts;
  }

  for (int rep = 1;; ++rep) {
    TuningEntry entry;
    entry.rep = rep;
    entry.w = w;
    entry.result = current;
    if (is_converged(current.error, cfg)) {
      hist.converged = true;
      hist.entries.push_back(std::move(entry));
      break;
    }
    if (rep >= cfg.ell_max) {
      hist.entries.push_back(std::move(entry));
      break;
    }
    if (given_s == nullptr && cfg.refresh_every > 0 && rep > 1 && (rep - 1) % cfg.refresh_every == 0) {
      SensitivityEstimate est = estimate_sensitivity(rollout, w, cfg.delta, cfg.parallel_sensitivity);
      hist.sensitivity = est.sensitivity;
      hist.sensitivity.estimated_at_rep = rep;
      hist.rollouts += est.rollouts - 1;  // the base rollout repeats this repetition
    }
    const VectorXd dw = norm_optimal_update(current.error.e, hist.sensitivity.s, cfg.alpha, beta);
    ClipResult next = clip_to_bounds(w.with(w.w + dw));
    entry.dw = next.w.w - w.w;
    entry.clipped = next.any();
    hist.entries.push_back(std::move(entry));
    w = next.w;
    current = detail::checked_rollout(rollout, w);
    ++hist.rollouts;
  }
  return hist;
}

// One row per repetition: rep, Q entries, R entries, control effort, KPI columns.
inline void write_tuning_csv(const TuningHistory& hist, std::ostream& os) {
  os << "rep,q1,q2,q3,r1,r2,r3,r4,r5,r6,control_effort,rmse_m,rms_du,sat_ratio,max_ee_m,e_rmse,e_du,e_sat,e_maxee\n";
  const auto old = os.precision(17);
  for (const auto& en : hist.entries) {
    const WeightMatrices m = en.w.decode();
    os << en.rep;
    for (int i = 0; i < 3; ++i) os << ',' << m.q_diag[i];
    for (int i = 0; i < 6; ++i) os << ',' << m.r_diag[i];
    const auto& r = en.result.report;
    const auto& e = en.result.error.e;
    os << ',' << en.result.control_effort << ',' << r.rmse << ',' << r.rms_du << ',' << r.sat_ratio << ',' << r.max_ee
       << ',' << e[0] << ',' << e[1] << ',' << e[2] << ',' << e[3] << '\n';
  }
  os.precision(old);
}

}  // namespace nmpc_tune
