#pragma once
// Bayesian optimization baseline: GP surrogate with an ARD Matern 5/2 kernel, hyperparameters
// from multi-start Nelder-Mead on the negative log marginal likelihood, expected-improvement
// acquisition maximized over a seeded candidate set with a local polish.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <cstdint>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "nmpc_tune/errors.hpp"

namespace nmpc_tune {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct GpHyperparameters {
  VectorXd length_scales;
  double signal_variance = 1.0;
  double noise_variance = 1e-6;
};

// s2 * (1 + sqrt(5) r + 5 r^2 / 3) * exp(-sqrt(5) r), r = |(x1 - x2) ./ l|.
inline double matern52_ard(const VectorXd& x1, const VectorXd& x2, const GpHyperparameters& h) {
  const double r = (x1 - x2).cwiseQuotient(h.length_scales).norm();
  const double s5r = std::sqrt(5.0) * r;
  return h.signal_variance * (1.0 + s5r + 5.0 * r * r / 3.0) * std::exp(-s5r);
}

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

namespace detail {

// Minimal Nelder-Mead (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
inline VectorXd nelder_mead(const std::function<double(const VectorXd&)>& f, const VectorXd& x0, double scale,
                            int max_iters, double* f_out = nullptr) {
  const int n = static_cast<int>(x0.size());
  std::vector<VectorXd> pts(n + 1, x0);
  std::vector<double> vals(n + 1);
  for (int i = 0; i < n; ++i) pts[i + 1][i] += scale;
  for (int i = 0; i <= n; ++i) vals[i] = f(pts[i]);
  std::vector<int> idx(n + 1);
  for (int it = 0; it < max_iters; ++it) {
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return vals[a] < vals[b]; });
    const int best = idx.front(), worst = idx.back(), second = idx[n - 1];
    if (std::abs(vals[worst] - vals[best]) <= 1e-10 * (1.0 + std::abs(vals[best]))) break;
    VectorXd centroid = VectorXd::Zero(n);
    for (int i = 0; i <= n; ++i)
      if (i != worst) centroid += pts[i];
    centroid /= n;
    const VectorXd xr = centroid + (centroid - pts[worst]);
    const double fr = f(xr);
    if (fr < vals[best]) {
      const VectorXd xe = centroid + 2.0 * (centroid - pts[worst]);
      const double fe = f(xe);
      if (fe < fr) {
        pts[worst] = xe;
        vals[worst] = fe;
      } else {
        pts[worst] = xr;
        vals[worst] = fr;
      }
    } else if (fr < vals[second]) {
      pts[worst] = xr;
      vals[worst] = fr;
    } else {
      const bool outside = fr < vals[worst];
      const VectorXd xc = outside ? VectorXd(centroid + 0.5 * (xr - centroid))
                                  : VectorXd(centroid + 0.5 * (pts[worst] - centroid));
      const double fc = f(xc);
      if (fc < std::min(fr, vals[worst])) {
        pts[worst] = xc;
        vals[worst] = fc;
      } else {
        for (int i = 0; i <= n; ++i) {
          if (i == best) continue;
          pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
          vals[i] = f(pts[i]);
        }
      }
    }
  }
  int best = 0;
  for (int i = 1; i <= n; ++i)
    if (vals[i] < vals[best]) best = i;
  if (f_out != nullptr) *f_out = vals[best];
  return pts[best];
}

}  // namespace detail

struct GpFitOptions {
  int restarts = 8;
  int iterations = 200;
  std::uint64_t seed = 7;
  double min_noise = 1e-8;  // standardized units
};

class GpModel {
 public:
  GpModel() = default;

  // Fit to (x, y): outputs are standardized, hyperparameters minimize the NLML.
  static GpModel fit(const MatrixXd& x, const VectorXd& y, const GpFitOptions& opt = {}) {
    if (x.rows() < 2 || x.rows() != y.size()) throw ConfigError("gp_fit needs n >= 2 matching rows");
    if (!y.allFinite()) throw ConfigError("gp_fit observations must be finite");
    GpModel m;
    m.x_ = x;
    m.y_raw_ = y;
    m.mean_ = y.mean();
    const double var = (y.array() - m.mean_).square().sum() / static_cast<double>(y.size());
    m.scale_ = var > 1e-300 ? std::sqrt(var) : 1.0;
    m.ys_ = (y.array() - m.mean_) / m.scale_;

    const int d = static_cast<int>(x.cols());
    VectorXd range(d);
    for (int j = 0; j < d; ++j) {
      const double r = x.col(j).maxCoeff() - x.col(j).minCoeff();
      range[j] = r > 1e-12 ? r : 1.0;
    }
    // theta = (log l_1..d, log s2, log n2)
    VectorXd lo(d + 2), hi(d + 2);
    for (int j = 0; j < d; ++j) {
      lo[j] = std::log(1e-2 * range[j]);
      hi[j] = std::log(1e2 * range[j]);
    }
    lo[d] = std::log(1e-6);
    hi[d] = std::log(1e3);
    lo[d + 1] = std::log(opt.min_noise);
    hi[d + 1] = std::log(1.0);

    auto objective = [&](const VectorXd& theta) {
      double penalty = 0.0;
      VectorXd t = theta;
      for (int i = 0; i < t.size(); ++i) {
        if (t[i] < lo[i]) {
          penalty += 1e3 * (lo[i] - t[i]) * (lo[i] - t[i]);
          t[i] = lo[i];
        } else if (t[i] > hi[i]) {
          penalty += 1e3 * (t[i] - hi[i]) * (t[i] - hi[i]);
          t[i] = hi[i];
        }
      }
      const double v = m.nlml(unpack(t, d));
      return std::isfinite(v) ? v + penalty : 1e300;
    };

    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    VectorXd best_theta;
    double best_val = std::numeric_limits<double>::infinity();
    for (int r = 0; r < opt.restarts; ++r) {
      VectorXd start(d + 2);
      if (r == 0) {
        for (int j = 0; j < d; ++j) start[j] = std::log(0.3 * range[j]);
        start[d] = 0.0;
        start[d + 1] = std::log(1e-2);
      } else {
        for (int i = 0; i < d + 2; ++i) start[i] = lo[i] + unif(rng) * (hi[i] - lo[i]);
      }
      double val = 0.0;
      const VectorXd theta = detail::nelder_mead(objective, start, 0.5, opt.iterations, &val);
      if (val < best_val) {
        best_val = val;
        best_theta = theta;
      }
    }
    best_theta = best_theta.cwiseMax(lo).cwiseMin(hi);
    m.hyp_ = unpack(best_theta, d);
    if (!m.factorize(m.hyp_)) throw IllConditioned("kernel matrix could not be factorized with any jitter");
    return m;
  }

  // Fixed hyperparameters (standardized output units); no likelihood search.
  static GpModel with_hyperparameters(const MatrixXd& x, const VectorXd& y, const GpHyperparameters& h) {
    GpModel m;
    m.x_ = x;
    m.y_raw_ = y;
    m.mean_ = y.mean();
    const double var = (y.array() - m.mean_).square().sum() / static_cast<double>(y.size());
    m.scale_ = var > 1e-300 ? std::sqrt(var) : 1.0;
    m.ys_ = (y.array() - m.mean_) / m.scale_;
    m.hyp_ = h;
    if (!m.factorize(h)) throw IllConditioned("kernel matrix could not be factorized with any jitter");
    return m;
  }

  // Posterior mean and latent-function variance, in original output units.
  void predict(const VectorXd& xs, double& mean, double& variance) const {
    const int n = static_cast<int>(x_.rows());
    VectorXd k(n);
    for (int i = 0; i < n; ++i) k[i] = matern52_ard(x_.row(i).transpose(), xs, hyp_);
    mean = mean_ + scale_ * k.dot(alpha_);
    const VectorXd v = chol_.matrixL().solve(k);
    const double var_s = std::max(hyp_.signal_variance - v.squaredNorm(), 0.0);
    variance = scale_ * scale_ * var_s;
  }

  double negative_log_likelihood() const { return nlml(hyp_); }
  const GpHyperparameters& hyperparameters() const { return hyp_; }
  double signal_variance() const { return scale_ * scale_ * hyp_.signal_variance; }
  double noise_variance() const { return scale_ * scale_ * (hyp_.noise_variance + jitter_); }
  double output_scale() const { return scale_; }
  const MatrixXd& inputs() const { return x_; }
  const VectorXd& targets() const { return y_raw_; }

 private:
  static GpHyperparameters unpack(const VectorXd& theta, int d) {
    GpHyperparameters h;
    h.length_scales = theta.head(d).array().exp();
    h.signal_variance = std::exp(theta[d]);
    h.noise_variance = std::exp(theta[d + 1]);
    return h;
  }

  MatrixXd kernel_matrix(const GpHyperparameters& h) const {
    const int n = static_cast<int>(x_.rows());
    MatrixXd k(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j <= i; ++j) {
        k(i, j) = matern52_ard(x_.row(i).transpose(), x_.row(j).transpose(), h);
        k(j, i) = k(i, j);
      }
    }
    return k;
  }

  double nlml(const GpHyperparameters& h) const {
    MatrixXd k = kernel_matrix(h);
    k.diagonal().array() += h.noise_variance;
    Eigen::LLT<MatrixXd> llt(k);
    if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
    const VectorXd a = llt.solve(ys_);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return 0.5 * ys_.dot(a) + 0.5 * logdet + 0.5 * static_cast<double>(ys_.size()) * std::log(2.0 * M_PI);
  }

  bool factorize(const GpHyperparameters& h) {
    const MatrixXd k = kernel_matrix(h);
    double jitter = 0.0;
    for (int attempt = 0; attempt < 12; ++attempt) {
      MatrixXd kn = k;
      kn.diagonal().array() += h.noise_variance + jitter;
      chol_.compute(kn);
      if (chol_.info() == Eigen::Success) {
        jitter_ = jitter;
        alpha_ = chol_.solve(ys_);
        return alpha_.allFinite();
      }
      jitter = jitter == 0.0 ? 1e-10 * std::max(1.0, h.signal_variance) : jitter * 10.0;
    }
    return false;
  }

  MatrixXd x_;
  VectorXd y_raw_;
  VectorXd ys_;
  double mean_ = 0.0;
  double scale_ = 1.0;
  GpHyperparameters hyp_;
  double jitter_ = 0.0;
  Eigen::LLT<MatrixXd> chol_;
  VectorXd alpha_;
};

inline GpModel gp_fit(const MatrixXd& x, const VectorXd& y, const GpFitOptions& opt = {}) {
  return GpModel::fit(x, y, opt);
}

// EI for minimization; zero when the predictive standard deviation vanishes.
inline double expected_improvement(double mean, double stddev, double best_y, double jitter) {
  const double gain = best_y - mean - jitter;
  if (!(stddev > 0.0)) return 0.0;
  const double z = gain / stddev;
  return std::max(gain * normal_cdf(z) + stddev * normal_pdf(z), 0.0);
}

inline double expected_improvement(const GpModel& model, const VectorXd& x, double best_y, double jitter) {
  double mu = 0.0, var = 0.0;
  model.predict(x, mu, var);
  return expected_improvement(mu, std::sqrt(var), best_y, jitter);
}

struct BoConfig {
  VectorXd lower;
  VectorXd upper;
  int budget = 100;
  int init_design = 10;
  double jitter = 0.01;  // exploration margin, in standardized objective units
  std::uint64_t seed = 1;
  int candidates = 2048;
  int polish_iters = 60;
  GpFitOptions gp;

  void validate() const {
    if (lower.size() == 0 || lower.size() != upper.size()) throw ConfigError("BO bounds must be non-empty and match");
    if (!(upper.array() > lower.array()).all()) throw ConfigError("BO bounds must satisfy lower < upper");
    if (init_design < 2) throw ConfigError("BO init_design must be >= 2");
    if (budget < init_design) throw ConfigError("BO budget must be >= init_design");
    if (!(jitter >= 0.0)) throw ConfigError("BO jitter must be >= 0");
  }
};

struct BoEvaluation {
  VectorXd x;
  double objective = 0.0;
  double best_so_far = 0.0;
  double wall_s = 0.0;
  bool failed = false;
};

struct BoResult {
  VectorXd best_x;
  double best_objective = std::numeric_limits<double>::infinity();
  std::vector<BoEvaluation> history;
};

// Seeded Latin hypercube on the box.
inline MatrixXd latin_hypercube(int n, const VectorXd& lower, const VectorXd& upper, std::mt19937_64& rng) {
  const int d = static_cast<int>(lower.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  MatrixXd out(n, d);
  std::vector<int> perm(n);
  for (int j = 0; j < d; ++j) {
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      std::uniform_int_distribution<int> pick(0, i);
      std::swap(perm[i], perm[pick(rng)]);
    }
    for (int i = 0; i < n; ++i) {
      const double u = (perm[i] + unif(rng)) / static_cast<double>(n);
      out(i, j) = lower[j] + u * (upper[j] - lower[j]);
    }
  }
  return out;
}

// Objective exceptions and non-finite values are recorded as +inf; the surrogate sees them
// as the worst finite observation plus one output standard deviation.
inline BoResult bo_minimize(const std::function<double(const VectorXd&)>& objective, const BoConfig& cfg) {
  cfg.validate();
  const int d = static_cast<int>(cfg.lower.size());
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  BoResult res;

  auto evaluate = [&](const VectorXd& x) {
    const auto t0 = std::chrono::steady_clock::now();
    BoEvaluation ev;
    ev.x = x;
    try {
      ev.objective = objective(x);
    } catch (const std::exception& e) {
      std::cerr << "warning: objective failed at evaluation " << res.history.size() + 1 << ": " << e.what() << '\n';
      ev.objective = std::numeric_limits<double>::infinity();
    }
    if (!std::isfinite(ev.objective)) {
      ev.objective = std::numeric_limits<double>::infinity();
      ev.failed = true;
    }
    ev.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (ev.objective < res.best_objective) {
      res.best_objective = ev.objective;
      res.best_x = x;
    }
    ev.best_so_far = res.best_objective;
    res.history.push_back(ev);
  };

  const MatrixXd design = latin_hypercube(cfg.init_design, cfg.lower, cfg.upper, rng);
  for (int i = 0; i < cfg.init_design; ++i) evaluate(design.row(i).transpose());

  auto clamp_box = [&](const VectorXd& x) -> VectorXd { return x.cwiseMax(cfg.lower).cwiseMin(cfg.upper); };

  for (int it = cfg.init_design; it < cfg.budget; ++it) {
    const int n = static_cast<int>(res.history.size());
    MatrixXd x(n, d);
    VectorXd y(n);
    double worst = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i)
      if (std::isfinite(res.history[i].objective)) worst = std::max(worst, res.history[i].objective);
    if (!std::isfinite(worst)) worst = 1.0;
    for (int i = 0; i < n; ++i) {
      x.row(i) = res.history[i].x.transpose();
      y[i] = std::isfinite(res.history[i].objective) ? res.history[i].objective : worst;
    }
    if (worst > y.minCoeff()) {
      const double sd = std::sqrt((y.array() - y.mean()).square().mean());
      for (int i = 0; i < n; ++i)
        if (res.history[i].failed) y[i] = worst + sd;
    }

    GpFitOptions gopt = cfg.gp;
    gopt.seed = cfg.gp.seed + static_cast<std::uint64_t>(it);
    const GpModel model = gp_fit(x, y, gopt);
    const double best_y = y.minCoeff();
    Eigen::Index best_i = 0;
    y.minCoeff(&best_i);

    const double xi = cfg.jitter * model.output_scale();
    double mu_inc = 0.0, var_inc = 0.0;
    model.predict(x.row(best_i).transpose(), mu_inc, var_inc);
    const bool escalate = var_inc < 1e-6 * model.output_scale() * model.output_scale();

    MatrixXd cands(cfg.candidates, d);
    for (int c = 0; c < cfg.candidates; ++c)
      for (int j = 0; j < d; ++j) cands(c, j) = cfg.lower[j] + unif(rng) * (cfg.upper[j] - cfg.lower[j]);

    // Best EI over the incumbent and the candidates, then a Nelder-Mead polish.
    auto search = [&](double margin, VectorXd& arg) {
      auto ei = [&](const VectorXd& c) { return expected_improvement(model, c, best_y, margin); };
      arg = x.row(best_i).transpose();
      double best = ei(arg);
      for (int c = 0; c < cfg.candidates; ++c) {
        const VectorXd cand = cands.row(c).transpose();
        const double v = ei(cand);
        if (v > best) {
          best = v;
          arg = cand;
        }
      }
      const double step = 0.05 * (cfg.upper - cfg.lower).maxCoeff();
      double neg = 0.0;
      const VectorXd polished = clamp_box(
          detail::nelder_mead([&](const VectorXd& c) { return -ei(clamp_box(c)); }, arg, step, cfg.polish_iters, &neg));
      const double vp = ei(polished);
      if (vp > best) {
        best = vp;
        arg = polished;
      }
      return best;
    };

    // Escalated margin first; if EI vanishes everywhere, relax it rather than re-sample the incumbent.
    VectorXd best_c;
    bool found = false;
    for (double margin : {escalate ? 10.0 * xi : xi, xi, 0.0}) {
      if (search(margin, best_c) > 0.0) {
        found = true;
        break;
      }
    }
    if (!found) {
      // Model is certain everywhere: take the least certain candidate.
      double widest = -1.0;
      for (int c = 0; c < cfg.candidates; ++c) {
        double mu = 0.0, var = 0.0;
        model.predict(cands.row(c).transpose(), mu, var);
        if (var > widest) {
          widest = var;
          best_c = cands.row(c).transpose();
        }
      }
    }
    evaluate(best_c);
  }
  return res;
}

inline void write_bo_history_csv(const BoResult& r, const std::vector<std::string>& names, std::ostream& os) {
  os << "eval";
  for (const auto& n : names) os << ',' << n;
  os << ",objective,best_so_far,wall_s\n";
  const auto old = os.precision(17);
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    const auto& ev = r.history[i];
    os << i + 1;
    for (int j = 0; j < ev.x.size(); ++j) os << ',' << ev.x[j];
    os << ',' << ev.objective << ',' << ev.best_so_far << ',' << ev.wall_s << '\n';
  }
  os.precision(old);
}

}  // namespace nmpc_tune
