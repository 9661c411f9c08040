#pragma once

// Generates, normalizes, persists, and splits (x*, y) training pairs.
//
// On-disk layout: a directory holding `meta.json` plus `data.f32`, the latter
// row-major little-endian float32 with one row per pair, condition y first,
// then the decision vector x, both normalized to [-1, 1].

#include <filesystem>
#include <string>
#include <vector>

#include "trajdiff/common.hpp"
#include "trajdiff/io.hpp"
#include "trajdiff/problems.hpp"
#include "trajdiff/solver.hpp"

namespace trajdiff {

constexpr int kDatasetFormatVersion = 1;

inline json geometry_to_json(const TaskGeometry& g) {
  return json{{"workspace_lo", g.workspace_lo},
              {"workspace_hi", g.workspace_hi},
              {"tabletop_start", {g.tabletop_start.x(), g.tabletop_start.y()}},
              {"goal_center", g.goal_center},
              {"goal_half_width", g.goal_half_width},
              {"car1_start", {g.car1_start.x(), g.car1_start.y()}},
              {"car2_start", {g.car2_start.x(), g.car2_start.y()}},
              {"car1_heading", g.car1_heading},
              {"car2_heading", g.car2_heading},
              {"car1_goal", {g.car1_goal.x(), g.car1_goal.y()}},
              {"car2_goal", {g.car2_goal.x(), g.car2_goal.y()}},
              {"r_lo", g.r_lo},
              {"r_hi", g.r_hi},
              {"r_safe", g.r_safe},
              {"d_min", g.d_min},
              {"placement_margin", g.placement_margin},
              {"t_min", g.t_min},
              {"t_max", g.t_max},
              {"u_max", g.u_max},
              {"a_max", g.a_max},
              {"w_max", g.w_max},
              {"v_max", g.v_max}};
}

inline TaskGeometry geometry_from_json(const json& j) {
  TaskGeometry g;
  g.workspace_lo = j.at("workspace_lo");
  g.workspace_hi = j.at("workspace_hi");
  g.tabletop_start = Eigen::Vector2d(j.at("tabletop_start")[0], j.at("tabletop_start")[1]);
  g.goal_center = j.at("goal_center");
  g.goal_half_width = j.at("goal_half_width");
  g.car1_start = Eigen::Vector2d(j.at("car1_start")[0], j.at("car1_start")[1]);
  g.car2_start = Eigen::Vector2d(j.at("car2_start")[0], j.at("car2_start")[1]);
  g.car1_heading = j.at("car1_heading");
  g.car2_heading = j.at("car2_heading");
  g.car1_goal = Eigen::Vector2d(j.at("car1_goal")[0], j.at("car1_goal")[1]);
  g.car2_goal = Eigen::Vector2d(j.at("car2_goal")[0], j.at("car2_goal")[1]);
  g.r_lo = j.at("r_lo");
  g.r_hi = j.at("r_hi");
  g.r_safe = j.at("r_safe");
  g.d_min = j.at("d_min");
  g.placement_margin = j.at("placement_margin");
  g.t_min = j.at("t_min");
  g.t_max = j.at("t_max");
  g.u_max = j.at("u_max");
  g.a_max = j.at("a_max");
  g.w_max = j.at("w_max");
  g.v_max = j.at("v_max");
  return g;
}

// Affine [lo, hi] <-> [-1, 1] maps; the ranges come from the physical box
// bounds, never from data extremes, so stats are identical across datasets
// of the same task/config.
struct NormalizationStats {
  Vec x_lo, x_hi;
  Vec y_lo, y_hi;

  static NormalizationStats from_task(const Task& task) {
    NormalizationStats s;
    s.x_lo = task.x_lower();
    s.x_hi = task.x_upper();
    s.y_lo = task.y_lower();
    s.y_hi = task.y_upper();
    require(((s.x_hi - s.x_lo).array() > 0).all() &&
                ((s.y_hi - s.y_lo).array() > 0).all(),
            Errc::invalid_argument, "normalization ranges must be nonempty");
    return s;
  }

  static Vec normalize(const Vec& v, const Vec& lo, const Vec& hi) {
    require(v.size() == lo.size(), Errc::dimension_mismatch, "normalize");
    return (2.0 * (v - lo).array() / (hi - lo).array() - 1.0).matrix();
  }
  static Vec denormalize(const Vec& v, const Vec& lo, const Vec& hi) {
    require(v.size() == lo.size(), Errc::dimension_mismatch, "denormalize");
    return (lo.array() + (v.array() + 1.0) * 0.5 * (hi - lo).array()).matrix();
  }

  Vec normalize_x(const Vec& x) const { return normalize(x, x_lo, x_hi); }
  Vec denormalize_x(const Vec& x) const { return denormalize(x, x_lo, x_hi); }
  Vec normalize_y(const Vec& y) const { return normalize(y, y_lo, y_hi); }
  Vec denormalize_y(const Vec& y) const { return denormalize(y, y_lo, y_hi); }

  bool operator==(const NormalizationStats& o) const {
    return x_lo == o.x_lo && x_hi == o.x_hi && y_lo == o.y_lo && y_hi == o.y_hi;
  }
};

struct DatasetProvenance {
  std::uint64_t seed = 0;
  std::string solver_digest;
  double feas_tol = 1e-6;
  int n_problems_requested = 0;
  int n_guesses = 0;
  long n_solves = 0;
  long n_locally_optimal = 0;
};

struct TrajectoryDataset {
  Task task;
  // row i: normalized condition and decision, f32-exact values
  Eigen::MatrixXf y;  // n_pairs x condition_dim
  Eigen::MatrixXf x;  // n_pairs x decision_dim
  std::vector<int> problem_index;  // groups rows that share one condition
  NormalizationStats stats;
  DatasetProvenance provenance;

  long size() const { return y.rows(); }
  int n_problems() const {
    return problem_index.empty()
               ? 0
               : *std::max_element(problem_index.begin(), problem_index.end()) +
                     1;
  }

  Vec x_row(long i) const { return x.row(i).cast<double>(); }
  Vec y_row(long i) const { return y.row(i).cast<double>(); }
};

// Samples problems, solves each from uniform initial guesses, and keeps the
// locally optimal solutions. Solves run in parallel; reduction order is fixed
// by (problem, guess) index.
inline TrajectoryDataset generate(const Task& task, int n_problems,
                                  int n_guesses, std::uint64_t seed,
                                  const SolveOptions& opts) {
  require(n_problems >= 1 && n_guesses >= 1, Errc::invalid_argument,
          "n_problems and n_guesses must be >= 1");
  TrajectoryDataset ds;
  ds.task = task;
  ds.stats = NormalizationStats::from_task(task);
  ds.provenance.seed = seed;
  ds.provenance.solver_digest =
      std::to_string(fnv1a(opts.digest_string()));
  ds.provenance.feas_tol = opts.feas_tol;
  ds.provenance.n_problems_requested = n_problems;
  ds.provenance.n_guesses = n_guesses;

  Rng rng(seed);
  std::vector<ProblemParams> problems(n_problems);
  std::vector<Vec> guesses(static_cast<size_t>(n_problems) * n_guesses);
  for (int i = 0; i < n_problems; ++i) {
    problems[i] = sample_problem(task, rng);
    for (int j = 0; j < n_guesses; ++j)
      guesses[static_cast<size_t>(i) * n_guesses + j] =
          sample_initial_guess(task, rng);
  }

  const long total = static_cast<long>(guesses.size());
  std::vector<SolveResult> results(total);
  parallel_chunks(total, 4, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t s = b; s < e; ++s)
      results[s] = solve(problems[s / n_guesses], task, guesses[s], opts);
  });

  std::vector<Eigen::RowVectorXf> rows_y, rows_x;
  std::vector<int> row_problem;
  int kept_problems = 0;
  int last_problem = -1;
  for (long s = 0; s < total; ++s) {
    ds.provenance.n_solves++;
    const SolveResult& res = results[s];
    if (res.status != SolveStatus::LocallyOptimal) continue;
    ds.provenance.n_locally_optimal++;
    const int prob = static_cast<int>(s / n_guesses);
    const Vec yn = round_to_f32(ds.stats.normalize_y(problems[prob].to_vector(task)));
    const Vec xn = round_to_f32(ds.stats.normalize_x(res.x_star));
    // float32 rounding perturbs both sides of the pair; keep only pairs that
    // still check out as feasible exactly as a consumer will see them
    const Vec x_round = ds.stats.denormalize_x(xn);
    const ProblemParams y_round =
        ProblemParams::from_vector(task, ds.stats.denormalize_y(yn));
    if (violation(x_round, y_round, task).total > opts.feas_tol) continue;
    if (prob != last_problem) {
      last_problem = prob;
      kept_problems++;
    }
    rows_y.push_back(yn.cast<float>().transpose());
    rows_x.push_back(xn.cast<float>().transpose());
    row_problem.push_back(kept_problems - 1);
  }
  require(!rows_y.empty(), Errc::empty_dataset,
          "no locally optimal solutions found");

  ds.y.resize(static_cast<long>(rows_y.size()), task.condition_dim());
  ds.x.resize(static_cast<long>(rows_x.size()), task.decision_dim());
  for (size_t r = 0; r < rows_y.size(); ++r) {
    ds.y.row(static_cast<long>(r)) = rows_y[r];
    ds.x.row(static_cast<long>(r)) = rows_x[r];
  }
  ds.problem_index = std::move(row_problem);
  return ds;
}

// Problem-level split: every pair sharing one condition lands on one side,
// so test conditions are unseen during training.
inline std::pair<TrajectoryDataset, TrajectoryDataset> split(
    const TrajectoryDataset& ds, double test_fraction, std::uint64_t seed) {
  require(test_fraction > 0.0 && test_fraction < 1.0, Errc::invalid_argument,
          "test_fraction must be in (0, 1)");
  const int P = ds.n_problems();
  require(P >= 2, Errc::too_few_problems,
          "split needs at least 2 distinct problems");

  std::vector<int> order(P);
  for (int i = 0; i < P; ++i) order[i] = i;
  Rng rng(seed);
  for (int i = P - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
  long n_test = std::llround(test_fraction * P);
  n_test = std::max<long>(1, std::min<long>(P - 1, n_test));
  std::vector<bool> is_test(P, false);
  for (long i = 0; i < n_test; ++i) is_test[order[i]] = true;

  auto take = [&](bool test_side) {
    TrajectoryDataset out;
    out.task = ds.task;
    out.stats = ds.stats;
    out.provenance = ds.provenance;
    std::vector<long> rows;
    for (long r = 0; r < ds.size(); ++r)
      if (is_test[ds.problem_index[r]] == test_side) rows.push_back(r);
    out.y.resize(static_cast<long>(rows.size()), ds.y.cols());
    out.x.resize(static_cast<long>(rows.size()), ds.x.cols());
    out.problem_index.reserve(rows.size());
    int next_id = -1, last_src = -1;
    for (size_t r = 0; r < rows.size(); ++r) {
      out.y.row(static_cast<long>(r)) = ds.y.row(rows[r]);
      out.x.row(static_cast<long>(r)) = ds.x.row(rows[r]);
      if (ds.problem_index[rows[r]] != last_src) {
        last_src = ds.problem_index[rows[r]];
        next_id++;
      }
      out.problem_index.push_back(next_id);
    }
    return out;
  };
  return {take(false), take(true)};
}

inline void save(const TrajectoryDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["format_version"] = kDatasetFormatVersion;
  meta["kind"] = "dataset";
  meta["task"] = task_name(ds.task.kind);
  meta["timesteps"] = ds.task.timesteps;
  meta["geometry"] = geometry_to_json(ds.task.geom);
  meta["decision_dim"] = ds.task.decision_dim();
  meta["condition_dim"] = ds.task.condition_dim();
  meta["n_pairs"] = ds.size();
  meta["n_problems"] = ds.n_problems();
  meta["stats"] = {{"x_lo", io::vec_to_json(ds.stats.x_lo)},
                   {"x_hi", io::vec_to_json(ds.stats.x_hi)},
                   {"y_lo", io::vec_to_json(ds.stats.y_lo)},
                   {"y_hi", io::vec_to_json(ds.stats.y_hi)}};
  meta["provenance"] = {{"seed", ds.provenance.seed},
                        {"solver_options_digest", ds.provenance.solver_digest},
                        {"feas_tol", ds.provenance.feas_tol},
                        {"n_problems_requested", ds.provenance.n_problems_requested},
                        {"n_guesses", ds.provenance.n_guesses},
                        {"n_solves", ds.provenance.n_solves},
                        {"n_locally_optimal", ds.provenance.n_locally_optimal}};
  io::write_atomic(dir / "meta.json",
                   [&](const std::filesystem::path& p) { io::write_json(p, meta); });

  std::vector<float> blob;
  blob.reserve(static_cast<size_t>(ds.size()) * (ds.y.cols() + ds.x.cols()));
  for (long r = 0; r < ds.size(); ++r) {
    for (long c = 0; c < ds.y.cols(); ++c) blob.push_back(ds.y(r, c));
    for (long c = 0; c < ds.x.cols(); ++c) blob.push_back(ds.x(r, c));
  }
  io::write_atomic(dir / "data.f32",
                   [&](const std::filesystem::path& p) { io::write_f32(p, blob); });
}

inline TrajectoryDataset load(const std::filesystem::path& dir) {
  const json meta = io::read_json(dir / "meta.json");
  require(meta.value("format_version", -1) == kDatasetFormatVersion,
          Errc::version_mismatch,
          "dataset format " + meta.value("format_version", json()).dump());
  TrajectoryDataset ds;
  ds.task = Task{task_from_name(meta.at("task")), meta.at("timesteps"),
                 geometry_from_json(meta.at("geometry"))};
  const long n_pairs = meta.at("n_pairs");
  const int ky = meta.at("condition_dim");
  const int n = meta.at("decision_dim");
  require(ky == ds.task.condition_dim() && n == ds.task.decision_dim(),
          Errc::shape_mismatch, "dataset dims do not match task");
  ds.stats.x_lo = io::vec_from_json(meta.at("stats").at("x_lo"));
  ds.stats.x_hi = io::vec_from_json(meta.at("stats").at("x_hi"));
  ds.stats.y_lo = io::vec_from_json(meta.at("stats").at("y_lo"));
  ds.stats.y_hi = io::vec_from_json(meta.at("stats").at("y_hi"));
  require(ds.stats.x_lo.size() == n && ds.stats.y_lo.size() == ky,
          Errc::shape_mismatch, "stats dims");
  const json& prov = meta.at("provenance");
  ds.provenance.seed = prov.value("seed", 0ull);
  ds.provenance.solver_digest = prov.value("solver_options_digest", "");
  ds.provenance.feas_tol = prov.value("feas_tol", 1e-6);
  ds.provenance.n_problems_requested = prov.value("n_problems_requested", 0);
  ds.provenance.n_guesses = prov.value("n_guesses", 0);
  ds.provenance.n_solves = prov.value("n_solves", 0l);
  ds.provenance.n_locally_optimal = prov.value("n_locally_optimal", 0l);

  const std::vector<float> blob = io::read_f32(dir / "data.f32");
  require(static_cast<long>(blob.size()) == n_pairs * (ky + n),
          Errc::row_count_mismatch,
          "data.f32 holds " + std::to_string(blob.size()) + " floats, meta claims " +
              std::to_string(n_pairs * (ky + n)));
  ds.y.resize(n_pairs, ky);
  ds.x.resize(n_pairs, n);
  size_t off = 0;
  for (long r = 0; r < n_pairs; ++r) {
    for (int c = 0; c < ky; ++c) ds.y(r, c) = blob[off++];
    for (int c = 0; c < n; ++c) ds.x(r, c) = blob[off++];
  }
  // regroup rows into problems by exact condition equality
  ds.problem_index.resize(n_pairs);
  int next_id = -1;
  for (long r = 0; r < n_pairs; ++r) {
    if (r == 0 || ds.y.row(r) != ds.y.row(r - 1)) next_id++;
    ds.problem_index[r] = next_id;
  }
  return ds;
}

}  // namespace trajdiff
