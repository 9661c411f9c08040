#pragma once

// Local NLP solver used for data generation and warm-start evaluation:
// augmented Lagrangian over (g, h) with a spectral projected-gradient inner
// minimizer on the box-constrained decision vector.

#include <Eigen/QR>

#include <chrono>
#include <deque>

#include "trajdiff/common.hpp"
#include "trajdiff/problems.hpp"

namespace trajdiff {

enum class SolveStatus { LocallyOptimal, Infeasible, IterLimit, TimeLimit };

inline const char* status_name(SolveStatus s) {
  switch (s) {
    case SolveStatus::LocallyOptimal: return "locally_optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::IterLimit: return "iter_limit";
    case SolveStatus::TimeLimit: return "time_limit";
  }
  return "unknown";
}

struct SolveOptions {
  int max_outer_iters = 30;
  int max_inner_iters = 200;
  double kkt_tol = 1e-4;   // on the projected gradient, scaled by 1 + |mult|
  double feas_tol = 1e-6;  // on V(x)
  double penalty_init = 10.0;
  double penalty_growth = 5.0;
  double time_limit = 120.0;  // seconds

  void validate() const {
    require(kkt_tol > 0 && feas_tol > 0 && penalty_init > 0 && time_limit > 0,
            Errc::invalid_argument, "solver tolerances must be positive");
    require(penalty_growth > 1.0, Errc::invalid_argument,
            "penalty_growth must exceed 1");
    require(max_outer_iters >= 0 && max_inner_iters >= 1,
            Errc::invalid_argument, "iteration limits");
  }

  std::string digest_string() const {
    return std::to_string(max_outer_iters) + "," +
           std::to_string(max_inner_iters) + "," + std::to_string(kkt_tol) +
           "," + std::to_string(feas_tol) + "," + std::to_string(penalty_init) +
           "," + std::to_string(penalty_growth);
  }
};

struct SolveResult {
  SolveStatus status = SolveStatus::IterLimit;
  DecisionVector x_star;
  int iterations = 0;        // outer (multiplier) iterations executed
  long inner_iterations = 0; // total projected-gradient steps
  double wall_time = 0.0;
  double final_violation = 0.0;
  double final_stationarity = 0.0;  // scaled projected-gradient norm
};

namespace detail {

struct AlState {
  Vec lambda;  // equality multipliers
  Vec mu;      // inequality multipliers (>= 0)
  double rho = 0.0;

  double mult_norm() const {
    double m = 0.0;
    if (lambda.size()) m = std::max(m, lambda.cwiseAbs().maxCoeff());
    if (mu.size()) m = std::max(m, mu.maxCoeff());
    return m;
  }
};

// Value and gradient of the PHR augmented Lagrangian.
inline double al_value(const Vec& x, const ProblemParams& y, const Task& task,
                       const AlState& st, ConstraintValues* cv_out) {
  const ConstraintValues cv = constraints(x, y, task);
  double val = x[0];
  for (Eigen::Index j = 0; j < cv.h.size(); ++j)
    val += st.lambda[j] * cv.h[j] + 0.5 * st.rho * cv.h[j] * cv.h[j];
  for (Eigen::Index i = 0; i < cv.g.size(); ++i) {
    const double m = std::max(0.0, st.mu[i] + st.rho * cv.g[i]);
    val += (m * m - st.mu[i] * st.mu[i]) / (2.0 * st.rho);
  }
  if (cv_out) *cv_out = cv;
  return val;
}

inline Vec al_gradient(const Vec& x, const ProblemParams& y, const Task& task,
                       const AlState& st, const ConstraintValues& cv) {
  Vec w_h = st.lambda + st.rho * cv.h;
  Vec w_g(cv.g.size());
  for (Eigen::Index i = 0; i < cv.g.size(); ++i)
    w_g[i] = std::max(0.0, st.mu[i] + st.rho * cv.g[i]);
  Vec grad = constraint_backward(x, y, task, w_g, w_h);
  grad[0] += 1.0;  // objective J = t
  return grad;
}

// Least-squares KKT multiplier estimate at a near-feasible point, so warm
// starts from converged solutions do not have to rebuild the multipliers
// from scratch. Only coordinates strictly inside the box participate; bound
// coordinates carry bound multipliers of their own.
inline void estimate_multipliers(const Vec& x, const ProblemParams& y,
                                 const Task& task, const ConstraintValues& cv,
                                 const Vec& lo, const Vec& hi,
                                 double bound_margin, AlState& st) {
  std::vector<int> active;
  for (Eigen::Index i = 0; i < cv.g.size(); ++i)
    if (cv.g[i] > -1e-2) active.push_back(static_cast<int>(i));
  // Coordinates within bound_margin of a bound are treated as bound: their
  // projected-gradient contribution is capped by the distance anyway.
  std::vector<int> interior;
  for (Eigen::Index d = 0; d < x.size(); ++d)
    if (x[d] - lo[d] > bound_margin && hi[d] - x[d] > bound_margin)
      interior.push_back(static_cast<int>(d));
  if (interior.empty()) return;

  const int m = static_cast<int>(cv.h.size());
  const int p = m + static_cast<int>(active.size());
  Mat A(static_cast<int>(interior.size()), p);
  Vec unit_g = Vec::Zero(cv.g.size());
  Vec unit_h = Vec::Zero(cv.h.size());
  auto fill_col = [&](int col) {
    const Vec full = constraint_backward(x, y, task, unit_g, unit_h);
    for (size_t r = 0; r < interior.size(); ++r)
      A(static_cast<int>(r), col) = full[interior[r]];
  };
  for (int j = 0; j < m; ++j) {
    unit_h[j] = 1.0;
    fill_col(j);
    unit_h[j] = 0.0;
  }
  for (size_t a = 0; a < active.size(); ++a) {
    unit_g[active[a]] = 1.0;
    fill_col(m + static_cast<int>(a));
    unit_g[active[a]] = 0.0;
  }
  Vec b = Vec::Zero(static_cast<int>(interior.size()));
  for (size_t r = 0; r < interior.size(); ++r)
    if (interior[r] == 0) b[static_cast<int>(r)] = -1.0;

  // Sign-constrained fit: drop inequality columns whose multiplier comes out
  // negative and re-solve (NNLS by active-set pruning).
  std::vector<char> keep(active.size(), 1);
  Vec z;
  for (int round = 0; round < 16; ++round) {
    std::vector<int> cols;
    for (int j = 0; j < m; ++j) cols.push_back(j);
    for (size_t a = 0; a < active.size(); ++a)
      if (keep[a]) cols.push_back(m + static_cast<int>(a));
    Mat Ak(A.rows(), static_cast<int>(cols.size()));
    for (size_t cidx = 0; cidx < cols.size(); ++cidx)
      Ak.col(static_cast<int>(cidx)) = A.col(cols[cidx]);
    const Vec zk = Ak.colPivHouseholderQr().solve(b);
    if (!zk.allFinite() || (zk.size() && zk.cwiseAbs().maxCoeff() > 1e3))
      return;
    z = Vec::Zero(p);
    for (size_t cidx = 0; cidx < cols.size(); ++cidx)
      z[cols[cidx]] = zk[static_cast<int>(cidx)];
    bool changed = false;
    for (size_t a = 0; a < active.size(); ++a)
      if (keep[a] && z[m + static_cast<int>(a)] < 0.0) {
        keep[a] = 0;
        changed = true;
      }
    if (!changed) break;
  }
  st.lambda = z.head(m);
  for (size_t a = 0; a < active.size(); ++a)
    st.mu[active[a]] = std::max(0.0, z[m + static_cast<int>(a)]);
}

}  // namespace detail

// Deterministic given (y, task, x0, opts). x0 is projected onto the box
// before anything else runs.
inline SolveResult solve(const ProblemParams& y, const Task& task,
                         const DecisionVector& x0, const SolveOptions& opts) {
  opts.validate();
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t_start)
        .count();
  };

  const Vec lo = task.x_lower();
  const Vec hi = task.x_upper();
  auto project = [&](const Vec& v) -> Vec {
    return v.cwiseMax(lo).cwiseMin(hi);
  };

  SolveResult res;
  Vec x = project(x0);
  res.x_star = x;

  detail::AlState st;
  st.lambda = Vec::Zero(task.num_equalities());
  st.mu = Vec::Zero(task.num_inequalities());
  st.rho = opts.penalty_init;

  auto viol_of = [](const ConstraintValues& cv) {
    return cv.g.cwiseMax(0.0).sum() + cv.h.cwiseAbs().sum();
  };

  ConstraintValues cv;
  double f = detail::al_value(x, y, task, st, &cv);
  if (!std::isfinite(f)) {
    res.status = SolveStatus::Infeasible;
    res.final_violation = std::numeric_limits<double>::infinity();
    res.wall_time = elapsed();
    return res;
  }
  res.final_violation = viol_of(cv);
  auto pg_norm = [&](const Vec& xx, const Vec& gg) {
    return (xx - project(xx - gg)).cwiseAbs().maxCoeff();
  };
  if (res.final_violation <= 1e-3) {
    detail::estimate_multipliers(x, y, task, cv, lo, hi, opts.kkt_tol, st);
    // Entry certificate: already feasible and first-order stationary with
    // the fitted multipliers means there is nothing to solve.
    Vec lag = constraint_backward(x, y, task, st.mu, st.lambda);
    lag[0] += 1.0;
    const double entry_stat = pg_norm(x, lag) / (1.0 + st.mult_norm());
    if (res.final_violation <= opts.feas_tol && entry_stat <= opts.kkt_tol) {
      res.status = SolveStatus::LocallyOptimal;
      res.final_stationarity = entry_stat;
      res.wall_time = elapsed();
      return res;
    }
  }

  Vec grad = detail::al_gradient(x, y, task, st, cv);
  res.final_stationarity = pg_norm(x, grad) / (1.0 + st.mult_norm());

  double inner_tol = res.final_violation <= opts.feas_tol ? opts.kkt_tol : 1e-2;
  double prev_feas = std::max(res.final_violation, opts.feas_tol);
  bool hit_time = false;
  int stalled = 0;

  for (int outer = 0; outer < opts.max_outer_iters; ++outer) {
    res.iterations = outer + 1;
    const double target =
        std::max(inner_tol, opts.kkt_tol * (1.0 + st.mult_norm()));

    // --- spectral projected gradient on the augmented Lagrangian
    f = detail::al_value(x, y, task, st, &cv);
    grad = detail::al_gradient(x, y, task, st, cv);
    std::deque<double> recent{f};
    double alpha = 1.0 / std::max(1e-8, grad.cwiseAbs().maxCoeff());
    double pg = pg_norm(x, grad);
    for (int inner = 0; inner < opts.max_inner_iters && pg > target; ++inner) {
      res.inner_iterations++;
      if (elapsed() > opts.time_limit) {
        hit_time = true;
        break;
      }
      const Vec d = project(x - alpha * grad) - x;
      const double gd = grad.dot(d);
      double f_ref = *std::max_element(recent.begin(), recent.end());
      double step = 1.0;
      Vec x_new;
      ConstraintValues cv_new;
      double f_new = 0.0;
      bool ok = false;
      for (int ls = 0; ls < 30; ++ls) {
        x_new = x + step * d;
        f_new = detail::al_value(x_new, y, task, st, &cv_new);
        if (std::isfinite(f_new) && f_new <= f_ref + 1e-4 * step * gd) {
          ok = true;
          break;
        }
        step *= 0.5;
      }
      if (!ok || d.cwiseAbs().maxCoeff() <= 1e-15) break;

      Vec grad_new = detail::al_gradient(x_new, y, task, st, cv_new);

      // Barzilai-Borwein step, safeguarded
      const Vec s = x_new - x;
      const Vec yv = grad_new - grad;
      const double sy = s.dot(yv);
      alpha = sy > 1e-14 ? clip(s.squaredNorm() / sy, 1e-6, 1e6) : 1e3;

      x = x_new;
      f = f_new;
      grad = grad_new;
      cv = cv_new;
      recent.push_back(f);
      if (recent.size() > 10) recent.pop_front();
      pg = pg_norm(x, grad);
    }

    if (!std::isfinite(f)) {
      res.status = SolveStatus::Infeasible;
      res.x_star = x;
      res.wall_time = elapsed();
      return res;
    }

    // First-order multiplier update; the inner-final AL gradient equals the
    // plain Lagrangian gradient at the updated multipliers.
    st.lambda += st.rho * cv.h;
    for (Eigen::Index i = 0; i < st.mu.size(); ++i)
      st.mu[i] = std::max(0.0, st.mu[i] + st.rho * cv.g[i]);

    const double feas = viol_of(cv);
    res.x_star = x;
    res.final_violation = feas;
    res.final_stationarity = pg / (1.0 + st.mult_norm());

    if (feas <= opts.feas_tol && res.final_stationarity <= opts.kkt_tol) {
      res.status = SolveStatus::LocallyOptimal;
      res.wall_time = elapsed();
      return res;
    }
    if (hit_time || elapsed() > opts.time_limit) {
      res.status = SolveStatus::TimeLimit;
      res.wall_time = elapsed();
      return res;
    }

    // Stationary but clearly infeasible with no progress under a huge
    // penalty: an infeasible stationary point (e.g. the two-car v = 0 dead
    // zone). Near-tolerance crawls keep iterating instead.
    stalled = feas > 0.9 * prev_feas ? stalled + 1 : 0;
    if (stalled >= 4 && st.rho >= 1e6 && pg <= target &&
        feas > 10.0 * opts.feas_tol) {
      res.status = SolveStatus::Infeasible;
      res.wall_time = elapsed();
      return res;
    }

    if (feas > 0.5 * prev_feas) st.rho *= opts.penalty_growth;
    prev_feas = feas;
    inner_tol = feas <= opts.feas_tol ? opts.kkt_tol
                                      : std::max(0.3 * inner_tol, opts.kkt_tol);
  }

  res.status = hit_time ? SolveStatus::TimeLimit : SolveStatus::IterLimit;
  res.wall_time = elapsed();
  return res;
}

// Identical to solve; separate entry point so evaluation can track the
// provenance of the initial guess.
inline SolveResult warm_start(const ProblemParams& y, const Task& task,
                              const DecisionVector& x_sample,
                              const SolveOptions& opts) {
  return solve(y, task, x_sample, opts);
}

}  // namespace trajdiff
