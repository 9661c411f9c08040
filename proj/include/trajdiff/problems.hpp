#pragma once

// Parameterized trajectory-optimization tasks: dynamics rollout, objective,
// constraints, the scalar violation V and its gradient, plus problem and
// initial-guess sampling.
//
// Decision vector layout (physical coordinates):
//   tabletop:  x = (t, u_x^1, u_y^1, ..., u_x^T, u_y^T)
//   two-car:   x = (t, a_1^1, w_1^1, a_2^1, w_2^1, ..., a_1^T, w_1^T, a_2^T, w_2^T)
//
// Condition vector layout:
//   tabletop:  y = (goal_x, goal_y, c_1..c_4 (xy each), r_1..r_4)
//   two-car:   y = (c_1, c_2 (xy each), r_1, r_2)

#include <array>
#include <atomic>
#include <string>
#include <vector>

#include "trajdiff/common.hpp"

namespace trajdiff {

enum class TaskKind { Tabletop, TwoCar };

inline const char* task_name(TaskKind k) {
  return k == TaskKind::Tabletop ? "tabletop" : "twocar";
}

inline TaskKind task_from_name(const std::string& s) {
  if (s == "tabletop") return TaskKind::Tabletop;
  if (s == "twocar") return TaskKind::TwoCar;
  throw Error(Errc::invalid_argument, "unknown task '" + s + "'");
}

// Workspace geometry and bounds. Every field can be overridden; defaults are
// the values used throughout the tests and experiments.
struct TaskGeometry {
  double workspace_lo = -1.0;
  double workspace_hi = 1.0;

  // tabletop
  Eigen::Vector2d tabletop_start{0.0, 0.0};
  double goal_center = 0.8;      // corner goals at (+-goal_center, +-goal_center)
  double goal_half_width = 0.1;  // side half-width of each corner goal region

  // two-car (fixed starts/goals, crossing paths)
  Eigen::Vector2d car1_start{-0.8, -0.8};
  Eigen::Vector2d car2_start{0.8, -0.8};
  double car1_heading = M_PI / 4.0;
  double car2_heading = 3.0 * M_PI / 4.0;
  Eigen::Vector2d car1_goal{0.8, 0.8};
  Eigen::Vector2d car2_goal{-0.8, 0.8};

  // obstacles
  double r_lo = 0.05;
  double r_hi = 0.15;
  double r_safe = 0.0;
  double d_min = 0.1;              // inter-car clearance
  double placement_margin = 0.05;  // start/goal clearance when sampling

  // decision bounds
  double t_min = 0.1;
  double t_max = 4.0;
  double u_max = 1.0;  // tabletop, per axis
  double a_max = 1.0;
  double w_max = 2.0;
  double v_max = 1.0;
};

struct Task {
  TaskKind kind = TaskKind::Tabletop;
  int timesteps = 80;
  TaskGeometry geom;

  static Task tabletop(int T = 80, TaskGeometry g = {}) {
    return Task{TaskKind::Tabletop, T, g};
  }
  static Task twocar(int T = 40, TaskGeometry g = {}) {
    return Task{TaskKind::TwoCar, T, g};
  }

  int controls_per_step() const { return kind == TaskKind::Tabletop ? 2 : 4; }
  int decision_dim() const { return 1 + controls_per_step() * timesteps; }
  int num_obstacles() const { return kind == TaskKind::Tabletop ? 4 : 2; }
  int condition_dim() const {
    return kind == TaskKind::Tabletop ? 2 + 3 * num_obstacles()
                                      : 3 * num_obstacles();
  }
  int state_dim() const { return kind == TaskKind::Tabletop ? 2 : 8; }
  int num_inequalities() const {
    // per timestep: one term per (point, obstacle) pair, plus inter-car
    return kind == TaskKind::Tabletop ? timesteps * num_obstacles()
                                      : timesteps * (2 * num_obstacles() + 1);
  }
  int num_equalities() const { return kind == TaskKind::Tabletop ? 2 : 4; }

  Vec x_lower() const {
    Vec lo(decision_dim());
    lo[0] = geom.t_min;
    if (kind == TaskKind::Tabletop) {
      lo.tail(decision_dim() - 1).setConstant(-geom.u_max);
    } else {
      for (int s = 0; s < timesteps; ++s)
        for (int c = 0; c < 2; ++c) {
          lo[1 + 4 * s + 2 * c + 0] = -geom.a_max;
          lo[1 + 4 * s + 2 * c + 1] = -geom.w_max;
        }
    }
    return lo;
  }

  Vec x_upper() const {
    Vec hi(decision_dim());
    hi[0] = geom.t_max;
    if (kind == TaskKind::Tabletop) {
      hi.tail(decision_dim() - 1).setConstant(geom.u_max);
    } else {
      for (int s = 0; s < timesteps; ++s)
        for (int c = 0; c < 2; ++c) {
          hi[1 + 4 * s + 2 * c + 0] = geom.a_max;
          hi[1 + 4 * s + 2 * c + 1] = geom.w_max;
        }
    }
    return hi;
  }

  Vec y_lower() const {
    Vec lo(condition_dim());
    int o = 0;
    if (kind == TaskKind::Tabletop) {
      lo[o++] = geom.workspace_lo;
      lo[o++] = geom.workspace_lo;
    }
    for (int i = 0; i < num_obstacles(); ++i) {
      lo[o++] = geom.workspace_lo;
      lo[o++] = geom.workspace_lo;
    }
    for (int i = 0; i < num_obstacles(); ++i) lo[o++] = geom.r_lo;
    return lo;
  }

  Vec y_upper() const {
    Vec hi(condition_dim());
    int o = 0;
    if (kind == TaskKind::Tabletop) {
      hi[o++] = geom.workspace_hi;
      hi[o++] = geom.workspace_hi;
    }
    for (int i = 0; i < num_obstacles(); ++i) {
      hi[o++] = geom.workspace_hi;
      hi[o++] = geom.workspace_hi;
    }
    for (int i = 0; i < num_obstacles(); ++i) hi[o++] = geom.r_hi;
    return hi;
  }
};

// Flat decision vector; index 0 holds the duration t.
using DecisionVector = Vec;

struct Obstacle {
  Eigen::Vector2d center;
  double radius = 0.0;
};

struct ProblemParams {
  Eigen::Vector2d goal{0.0, 0.0};  // tabletop only; two-car goals are fixed
  std::vector<Obstacle> obstacles;

  Vec to_vector(const Task& task) const {
    Vec y(task.condition_dim());
    int o = 0;
    if (task.kind == TaskKind::Tabletop) {
      y[o++] = goal.x();
      y[o++] = goal.y();
    }
    for (const auto& ob : obstacles) {
      y[o++] = ob.center.x();
      y[o++] = ob.center.y();
    }
    for (const auto& ob : obstacles) y[o++] = ob.radius;
    return y;
  }

  static ProblemParams from_vector(const Task& task, const Vec& y) {
    require(y.size() == task.condition_dim(), Errc::dimension_mismatch,
            "condition vector");
    ProblemParams p;
    int o = 0;
    if (task.kind == TaskKind::Tabletop) {
      p.goal = {y[o], y[o + 1]};
      o += 2;
    }
    const int m = task.num_obstacles();
    p.obstacles.resize(m);
    for (int i = 0; i < m; ++i) {
      p.obstacles[i].center = {y[o], y[o + 1]};
      o += 2;
    }
    for (int i = 0; i < m; ++i) p.obstacles[i].radius = y[o++];
    return p;
  }
};

// Rows 0..T; tabletop columns (px, py); two-car columns
// (px1, py1, v1, th1, px2, py2, v2, th2).
struct StateTrajectory {
  Mat states;
};

struct ViolationReport {
  Vec inequality_terms;  // max(g_i, 0)
  Vec equality_terms;    // |h_j|
  double total = 0.0;
};

// Call counters (nfev-style); tests use them to assert code-path isolation.
struct EvalCounters {
  static std::atomic<std::uint64_t>& violations() {
    static std::atomic<std::uint64_t> n{0};
    return n;
  }
  static std::atomic<std::uint64_t>& gradients() {
    static std::atomic<std::uint64_t> n{0};
    return n;
  }
  static void reset() {
    violations() = 0;
    gradients() = 0;
  }
};

namespace detail {

inline void check_decision(const Task& task, const Vec& x) {
  require(x.size() == task.decision_dim(), Errc::dimension_mismatch,
          "decision vector has " + std::to_string(x.size()) + " entries, task needs " +
              std::to_string(task.decision_dim()));
  require(x.allFinite(), Errc::non_finite_input, "decision vector");
}

}  // namespace detail

// Forward-Euler rollout with dt = t / T from the task's fixed start state.
inline StateTrajectory rollout(const DecisionVector& x, const Task& task) {
  detail::check_decision(task, x);
  const int T = task.timesteps;
  const double dt = x[0] / T;
  StateTrajectory traj;
  traj.states.resize(T + 1, task.state_dim());
  if (task.kind == TaskKind::Tabletop) {
    Eigen::Vector2d p = task.geom.tabletop_start;
    traj.states.row(0) = p.transpose();
    for (int s = 1; s <= T; ++s) {
      p.x() += dt * x[1 + 2 * (s - 1) + 0];
      p.y() += dt * x[1 + 2 * (s - 1) + 1];
      traj.states.row(s) = p.transpose();
    }
  } else {
    std::array<Eigen::Vector4d, 2> z;  // (px, py, v, th) per car
    z[0] << task.geom.car1_start.x(), task.geom.car1_start.y(), 0.0,
        task.geom.car1_heading;
    z[1] << task.geom.car2_start.x(), task.geom.car2_start.y(), 0.0,
        task.geom.car2_heading;
    traj.states.row(0) << z[0].transpose(), z[1].transpose();
    for (int s = 1; s <= T; ++s) {
      for (int c = 0; c < 2; ++c) {
        const double a = x[1 + 4 * (s - 1) + 2 * c + 0];
        const double w = x[1 + 4 * (s - 1) + 2 * c + 1];
        const double cth = std::cos(z[c][3]);
        const double sth = std::sin(z[c][3]);
        z[c][0] += dt * z[c][2] * cth;
        z[c][1] += dt * z[c][2] * sth;
        z[c][2] = clip(z[c][2] + dt * a, 0.0, task.geom.v_max);
        z[c][3] += dt * w;
      }
      traj.states.row(s) << z[0].transpose(), z[1].transpose();
    }
  }
  if (!traj.states.allFinite()) {
    for (int s = 0; s <= T; ++s)
      if (!traj.states.row(s).allFinite())
        throw Error(Errc::non_finite_input,
                    "state at timestep " + std::to_string(s));
  }
  return traj;
}

// J = duration (minimum-time objective for both tasks).
inline double objective(const DecisionVector& x, const ProblemParams&) {
  require(std::isfinite(x[0]), Errc::non_finite_input, "duration");
  return x[0];
}

inline Vec objective_gradient(const DecisionVector& x, const ProblemParams&) {
  Vec g = Vec::Zero(x.size());
  g[0] = 1.0;
  return g;
}

// Inequality/equality residuals. g uses the smooth squared-distance form
// (r_obs + r_safe)^2 - |p - c|^2 per timestep 1..T per obstacle; two-car adds
// d_min^2 - |p1 - p2|^2 per timestep. h is the final-position goal residual.
struct ConstraintValues {
  Vec g;
  Vec h;
};

inline ConstraintValues constraints(const DecisionVector& x,
                                    const ProblemParams& y, const Task& task) {
  require(static_cast<int>(y.obstacles.size()) == task.num_obstacles(),
          Errc::dimension_mismatch, "obstacle count");
  const StateTrajectory traj = rollout(x, task);
  const int T = task.timesteps;
  ConstraintValues out;
  out.g.resize(task.num_inequalities());
  out.h.resize(task.num_equalities());
  if (task.kind == TaskKind::Tabletop) {
    for (int s = 1; s <= T; ++s) {
      const Eigen::Vector2d p = traj.states.row(s).transpose();
      for (int o = 0; o < 4; ++o) {
        const double R = y.obstacles[o].radius + task.geom.r_safe;
        out.g[(s - 1) * 4 + o] =
            R * R - (p - y.obstacles[o].center).squaredNorm();
      }
    }
    const Eigen::Vector2d pT = traj.states.row(T).transpose();
    out.h = pT - y.goal;
  } else {
    for (int s = 1; s <= T; ++s) {
      const Eigen::Vector2d p1 = traj.states.row(s).segment<2>(0).transpose();
      const Eigen::Vector2d p2 = traj.states.row(s).segment<2>(4).transpose();
      const int base = (s - 1) * 5;
      for (int c = 0; c < 2; ++c) {
        const Eigen::Vector2d& p = c == 0 ? p1 : p2;
        for (int o = 0; o < 2; ++o) {
          const double R = y.obstacles[o].radius + task.geom.r_safe;
          out.g[base + 2 * c + o] =
              R * R - (p - y.obstacles[o].center).squaredNorm();
        }
      }
      out.g[base + 4] =
          task.geom.d_min * task.geom.d_min - (p1 - p2).squaredNorm();
    }
    out.h.segment<2>(0) =
        traj.states.row(T).segment<2>(0).transpose() - task.geom.car1_goal;
    out.h.segment<2>(2) =
        traj.states.row(T).segment<2>(4).transpose() - task.geom.car2_goal;
  }
  return out;
}

// V(x, y) = sum max(g_i, 0) + sum |h_j|.
inline ViolationReport violation(const DecisionVector& x,
                                 const ProblemParams& y, const Task& task) {
  EvalCounters::violations()++;
  const ConstraintValues cv = constraints(x, y, task);
  ViolationReport rep;
  rep.inequality_terms = cv.g.cwiseMax(0.0);
  rep.equality_terms = cv.h.cwiseAbs();
  rep.total = rep.inequality_terms.sum() + rep.equality_terms.sum();
  return rep;
}

// Gradient of w_g . g(x) + w_h . h(x) via the adjoint of the Euler rollout.
// Shared by the violation gradient (indicator/sign weights) and the
// augmented-Lagrangian solver (multiplier weights).
inline Vec constraint_backward(const DecisionVector& x, const ProblemParams& y,
                               const Task& task, const Vec& w_g,
                               const Vec& w_h) {
  detail::check_decision(task, x);
  require(w_g.size() == task.num_inequalities() &&
              w_h.size() == task.num_equalities(),
          Errc::dimension_mismatch, "constraint weights");
  const StateTrajectory traj = rollout(x, task);
  const int T = task.timesteps;
  const double dt = x[0] / T;
  Vec grad = Vec::Zero(task.decision_dim());
  double dt_adj = 0.0;

  if (task.kind == TaskKind::Tabletop) {
    Eigen::Vector2d lam = Eigen::Vector2d::Zero();
    for (int s = T; s >= 1; --s) {
      const Eigen::Vector2d p = traj.states.row(s).transpose();
      if (s == T) lam += Eigen::Vector2d(w_h[0], w_h[1]);
      for (int o = 0; o < 4; ++o) {
        const double w = w_g[(s - 1) * 4 + o];
        if (w != 0.0) lam -= 2.0 * w * (p - y.obstacles[o].center);
      }
      const Eigen::Vector2d u(x[1 + 2 * (s - 1)], x[1 + 2 * (s - 1) + 1]);
      grad[1 + 2 * (s - 1) + 0] = dt * lam.x();
      grad[1 + 2 * (s - 1) + 1] = dt * lam.y();
      dt_adj += lam.dot(u);
    }
  } else {
    // adjoint per car over (px, py, v, th)
    std::array<Eigen::Vector4d, 2> lam{Eigen::Vector4d::Zero(),
                                       Eigen::Vector4d::Zero()};
    for (int s = T; s >= 1; --s) {
      const Eigen::Vector2d p1 = traj.states.row(s).segment<2>(0).transpose();
      const Eigen::Vector2d p2 = traj.states.row(s).segment<2>(4).transpose();
      if (s == T) {
        lam[0][0] += w_h[0];
        lam[0][1] += w_h[1];
        lam[1][0] += w_h[2];
        lam[1][1] += w_h[3];
      }
      const int base = (s - 1) * 5;
      for (int c = 0; c < 2; ++c) {
        const Eigen::Vector2d& p = c == 0 ? p1 : p2;
        for (int o = 0; o < 2; ++o) {
          const double w = w_g[base + 2 * c + o];
          if (w != 0.0) {
            lam[c][0] -= 2.0 * w * (p.x() - y.obstacles[o].center.x());
            lam[c][1] -= 2.0 * w * (p.y() - y.obstacles[o].center.y());
          }
        }
      }
      {
        const double w = w_g[base + 4];
        if (w != 0.0) {
          const Eigen::Vector2d d = p1 - p2;
          lam[0][0] -= 2.0 * w * d.x();
          lam[0][1] -= 2.0 * w * d.y();
          lam[1][0] += 2.0 * w * d.x();
          lam[1][1] += 2.0 * w * d.y();
        }
      }
      for (int c = 0; c < 2; ++c) {
        const double v0 = traj.states(s - 1, 4 * c + 2);
        const double th0 = traj.states(s - 1, 4 * c + 3);
        const double a = x[1 + 4 * (s - 1) + 2 * c + 0];
        const double w = x[1 + 4 * (s - 1) + 2 * c + 1];
        const double cth = std::cos(th0);
        const double sth = std::sin(th0);
        const double v_pre = v0 + dt * a;
        const double cg = (v_pre >= 0.0 && v_pre <= task.geom.v_max) ? 1.0 : 0.0;
        grad[1 + 4 * (s - 1) + 2 * c + 0] = lam[c][2] * cg * dt;
        grad[1 + 4 * (s - 1) + 2 * c + 1] = lam[c][3] * dt;
        dt_adj += lam[c][0] * v0 * cth + lam[c][1] * v0 * sth +
                  lam[c][2] * cg * a + lam[c][3] * w;
        Eigen::Vector4d nl;
        nl[0] = lam[c][0];
        nl[1] = lam[c][1];
        nl[2] = lam[c][0] * dt * cth + lam[c][1] * dt * sth + lam[c][2] * cg;
        nl[3] = -lam[c][0] * dt * v0 * sth + lam[c][1] * dt * v0 * cth +
                lam[c][3];
        lam[c] = nl;
      }
    }
  }
  grad[0] = dt_adj / T;
  require(grad.allFinite(), Errc::non_finite_input, "constraint gradient");
  return grad;
}

// Exact reverse-mode gradient of V; subgradient 0 at max/abs kinks.
inline Vec violation_gradient(const DecisionVector& x, const ProblemParams& y,
                              const Task& task) {
  EvalCounters::gradients()++;
  const ConstraintValues cv = constraints(x, y, task);
  Vec w_g(cv.g.size());
  for (Eigen::Index i = 0; i < cv.g.size(); ++i)
    w_g[i] = cv.g[i] > 0.0 ? 1.0 : 0.0;
  Vec w_h(cv.h.size());
  for (Eigen::Index j = 0; j < cv.h.size(); ++j)
    w_h[j] = cv.h[j] > 0.0 ? 1.0 : (cv.h[j] < 0.0 ? -1.0 : 0.0);
  return constraint_backward(x, y, task, w_g, w_h);
}

// Uniformly samples a problem instance; obstacles land in the box spanned by
// start and goal and are rejected while any start/goal point lies within
// radius + placement_margin of the obstacle center.
inline ProblemParams sample_problem(const Task& task, Rng& rng) {
  const TaskGeometry& g = task.geom;
  ProblemParams p;
  std::vector<Eigen::Vector2d> keepout;
  Eigen::Vector2d box_lo, box_hi;
  if (task.kind == TaskKind::Tabletop) {
    const double sx = rng.uniform_int(2) == 0 ? -1.0 : 1.0;
    const double sy = rng.uniform_int(2) == 0 ? -1.0 : 1.0;
    p.goal.x() = sx * g.goal_center + rng.uniform(-g.goal_half_width, g.goal_half_width);
    p.goal.y() = sy * g.goal_center + rng.uniform(-g.goal_half_width, g.goal_half_width);
    keepout = {g.tabletop_start, p.goal};
  } else {
    keepout = {g.car1_start, g.car1_goal, g.car2_start, g.car2_goal};
  }
  box_lo = keepout[0];
  box_hi = keepout[0];
  for (const auto& q : keepout) {
    box_lo = box_lo.cwiseMin(q);
    box_hi = box_hi.cwiseMax(q);
  }
  p.obstacles.resize(task.num_obstacles());
  for (auto& ob : p.obstacles) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      ob.center.x() = rng.uniform(box_lo.x(), box_hi.x());
      ob.center.y() = rng.uniform(box_lo.y(), box_hi.y());
      ob.radius = rng.uniform(g.r_lo, g.r_hi);
      placed = true;
      for (const auto& q : keepout)
        if ((ob.center - q).norm() <= ob.radius + g.placement_margin) {
          placed = false;
          break;
        }
    }
    require(placed, Errc::cannot_place_obstacles,
            std::string("task ") + task_name(task.kind));
  }
  return p;
}

// Uniform draw inside the decision box; doubles as the "uniform" baseline.
inline DecisionVector sample_initial_guess(const Task& task, Rng& rng) {
  const Vec lo = task.x_lower();
  const Vec hi = task.x_upper();
  Vec x(task.decision_dim());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    x[i] = rng.uniform(lo[i], hi[i]);
  return x;
}

}  // namespace trajdiff
