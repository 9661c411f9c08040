#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "trajdiff/evaluation.hpp"

using namespace trajdiff;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("trajdiff_ev_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Zero-control trajectories with goals placed to make V exactly {0,1,2,3}.
std::tuple<Mat, Mat, Task, NormalizationStats> crafted_violations() {
  TaskGeometry geom;
  geom.workspace_lo = -2.0;
  geom.workspace_hi = 2.0;
  Task task = Task::tabletop(2, geom);
  const NormalizationStats stats = NormalizationStats::from_task(task);
  const std::vector<Eigen::Vector2d> goals = {
      {0.0, 0.0}, {-0.5, -0.5}, {1.0, 1.0}, {-1.5, -1.5}};
  Mat xs(4, task.decision_dim()), ys(4, task.condition_dim());
  for (int i = 0; i < 4; ++i) {
    ProblemParams y;
    y.goal = goals[i];
    y.obstacles.resize(4);
    for (int o = 0; o < 4; ++o) {
      y.obstacles[o].center = {-1.8 + 0.1 * o, 1.8};
      y.obstacles[o].radius = 0.05;
    }
    Vec x = Vec::Zero(task.decision_dim());
    x[0] = 1.0;
    xs.row(i) = stats.normalize_x(x).transpose();
    ys.row(i) = stats.normalize_y(y.to_vector(task)).transpose();
  }
  return {xs, ys, task, stats};
}

}  // namespace

TEST_CASE("violation_stats: hand-computed aggregate over V = {0,1,2,3}") {
  auto [xs, ys, task, stats] = crafted_violations();
  const std::vector<double> v = violation_values(xs, ys, task, stats);
  CHECK(v[0] == Approx(0.0).margin(1e-12));
  CHECK(v[1] == Approx(1.0));
  CHECK(v[2] == Approx(2.0));
  CHECK(v[3] == Approx(3.0));

  const ViolationStats s = violation_stats(xs, ys, task, stats);
  CHECK(s.mean == Approx(1.5));
  CHECK(s.std == Approx(1.29099).margin(1e-5));
  CHECK(s.quantile_25 == Approx(0.75));
  CHECK(s.feasible_per_mille == Approx(250.0));
  CHECK(s.n_samples == 4);
}

TEST_CASE("violation_stats: all-feasible set and ordering invariance") {
  auto [xs, ys, task, stats] = crafted_violations();
  Mat xs_feas = xs, ys_feas = ys;
  for (int i = 1; i < 4; ++i) ys_feas.row(i) = ys_feas.row(0);
  const ViolationStats s = violation_stats(xs_feas, ys_feas, task, stats);
  CHECK(s.mean == Approx(0.0).margin(1e-12));
  CHECK(s.feasible_per_mille == 1000.0);

  // permuting rows leaves the statistics unchanged
  Mat xs_perm(4, xs.cols()), ys_perm(4, ys.cols());
  const int perm[4] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i) {
    xs_perm.row(i) = xs.row(perm[i]);
    ys_perm.row(i) = ys.row(perm[i]);
  }
  const ViolationStats a = violation_stats(xs, ys, task, stats);
  const ViolationStats b = violation_stats(xs_perm, ys_perm, task, stats);
  CHECK(b.mean == Approx(a.mean).margin(1e-12));
  CHECK(b.std == Approx(a.std).margin(1e-12));
  CHECK(b.quantile_25 == Approx(a.quantile_25).margin(1e-12));
  CHECK(b.feasible_per_mille == a.feasible_per_mille);
}

TEST_CASE("violation_stats: the training dataset itself is fully feasible") {
  const TrajectoryDataset ds = generate(Task::tabletop(4), 5, 4, 3, SolveOptions{});
  const ViolationStats s =
      violation_stats(ds.x.cast<double>(), ds.y.cast<double>(), ds.task, ds.stats);
  CHECK(s.mean <= ds.provenance.feas_tol);
  CHECK(s.feasible_per_mille == 1000.0);
}

TEST_CASE("warm_start_stats: converged samples all succeed quickly") {
  const Task task = Task::tabletop(5);
  SolveOptions opts;
  const TrajectoryDataset ds = generate(task, 6, 3, 11, opts);
  const WarmStartStats s = warm_start_stats(
      ds.x.cast<double>(), ds.y.cast<double>(), task, ds.stats, opts);
  CHECK(s.locally_optimal_ratio == 1.0);
  CHECK(s.n_attempts == ds.size());
  CHECK(s.iters_success.n == s.n_attempts);

  // uniform guesses on the same problems need far more work
  Rng rng(5);
  const SampleSet uni =
      uniform_baseline(ds.y.cast<double>(), task, 1, rng, ds.stats);
  const WarmStartStats u =
      warm_start_stats(uni.x, uni.y, task, ds.stats, opts);
  CHECK(s.iters_all.median < u.iters_all.median);
}

TEST_CASE("warm_start_stats: zero budget counts only already-solved inputs") {
  const Task task = Task::tabletop(4);
  const NormalizationStats stats = NormalizationStats::from_task(task);
  Rng rng(7);
  Mat ys(6, task.condition_dim());
  for (int i = 0; i < 6; ++i)
    ys.row(i) =
        stats.normalize_y(sample_problem(task, rng).to_vector(task)).transpose();
  const SampleSet uni = uniform_baseline(ys, task, 2, rng, stats);
  SolveOptions zero;
  zero.max_outer_iters = 0;
  const WarmStartStats s = warm_start_stats(uni.x, uni.y, task, stats, zero);
  CHECK(s.locally_optimal_ratio == 0.0);
}

TEST_CASE("gt_violation_curve: near zero early, rising trend, CI scaling") {
  const TrajectoryDataset ds = generate(Task::tabletop(4), 6, 4, 2, SolveOptions{});
  const NoiseSchedule sched = make_schedule(16, 1e-4, 0.2);
  Rng rng(3);
  const ViolationCurve curve =
      gt_violation_curve(ds, sched, std::min<long>(8, ds.size()), 16, rng);
  REQUIRE(curve.points.size() == 16);
  // alpha_bar_1 ~ 1, so the first step is nearly noiseless
  CHECK(curve.points.front().mean < 0.1 * curve.points.back().mean);
  CHECK(curve.points.front().mean < 0.05);
  std::vector<double> ks;
  for (const auto& p : curve.points) ks.push_back(p.k);
  CHECK(spearman(ks, curve.means()) > 0.9);

  // quadrupling the per-step samples roughly halves the CI
  Rng r1(9), r2(9);
  const ViolationCurve narrow = gt_violation_curve(ds, sched, 6, 32, r1);
  const ViolationCurve wide = gt_violation_curve(ds, sched, 6, 8, r2);
  const double ratio =
      narrow.points.back().ci_half / wide.points.back().ci_half;
  CHECK(ratio > 0.3);
  CHECK(ratio < 0.75);

  // deterministic given the seed, even with one sample per step
  Rng ra(21), rb(21);
  const ViolationCurve ca = gt_violation_curve(ds, sched, 4, 1, ra);
  const ViolationCurve cb = gt_violation_curve(ds, sched, 4, 1, rb);
  for (int k = 0; k < sched.K; ++k)
    CHECK(ca.points[k].mean == cb.points[k].mean);
}

TEST_CASE("uniform_baseline: deterministic, normalized, two-car infeasible") {
  const Task task = Task::twocar(4);
  const NormalizationStats stats = NormalizationStats::from_task(task);
  Rng rng(13);
  Mat ys(10, task.condition_dim());
  for (int i = 0; i < 10; ++i)
    ys.row(i) =
        stats.normalize_y(sample_problem(task, rng).to_vector(task)).transpose();

  Rng a(5), b(5);
  const SampleSet sa = uniform_baseline(ys, task, 3, a, stats);
  const SampleSet sb = uniform_baseline(ys, task, 3, b, stats);
  CHECK(sa.x == sb.x);
  CHECK(sa.size() == 30);
  CHECK((sa.x.array() >= -1.0).all());
  CHECK((sa.x.array() <= 1.0).all());

  const ViolationStats s = violation_stats(sa.x, sa.y, task, stats);
  CHECK(s.feasible_per_mille == 0.0);  // random two-car guesses never feasible
  CHECK(s.mean > 1.0);
}

TEST_CASE("samples: save/load round trip and errors") {
  const Task task = Task::tabletop(3);
  const NormalizationStats stats = NormalizationStats::from_task(task);
  Rng rng(2);
  Mat ys(3, task.condition_dim());
  for (int i = 0; i < 3; ++i)
    ys.row(i) =
        stats.normalize_y(sample_problem(task, rng).to_vector(task)).transpose();
  const SampleSet s = uniform_baseline(ys, task, 2, rng, stats);
  const fs::path dir = temp_dir("samples");
  save_samples(s, dir, {{"omega", 1.0}});
  const SampleSet back = load_samples(dir);
  CHECK(back.task.kind == s.task.kind);
  CHECK(back.problem_index == s.problem_index);
  CHECK((back.x.cast<float>() == s.x.cast<float>()));

  json meta = io::read_json(dir / "meta.json");
  meta["format_version"] = 9;
  io::write_json(dir / "meta.json", meta);
  CHECK_THROWS_MATCHES(load_samples(dir), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == Errc::version_mismatch;
                       }));
}

TEST_CASE("report: schema and lossless round trip") {
  auto [xs, ys, task, stats] = crafted_violations();
  MethodReport m;
  m.method = "uniform";
  m.violation = violation_stats(xs, ys, task, stats);
  SolveOptions zero;
  zero.max_outer_iters = 0;
  m.warm_start = warm_start_stats(xs, ys, task, stats, zero);
  m.has_warm_start = true;

  const json rep = report(task_name(task.kind), {m});
  const json back = json::parse(rep.dump());
  CHECK(back == rep);

  REQUIRE(back.at("violation_table").size() == 1);
  const json& row = back.at("violation_table")[0];
  std::vector<std::string> keys;
  for (auto it = row.begin(); it != row.end(); ++it) keys.push_back(it.key());
  std::sort(keys.begin(), keys.end());
  CHECK(keys == std::vector<std::string>{"feasible_per_mille", "mean",
                                         "method", "q25", "std"});
  CHECK(back.at("warm_start_table").size() == 1);
}

TEST_CASE("curve CSV has one row per step plus a header") {
  const TrajectoryDataset ds = generate(Task::tabletop(3), 3, 3, 5, SolveOptions{});
  const NoiseSchedule sched = make_schedule(12, 1e-4, 0.2);
  Rng rng(1);
  const ViolationCurve curve = gt_violation_curve(ds, sched, 2, 2, rng);
  const fs::path dir = temp_dir("curve");
  write_curve_csv(curve, dir / "curve.csv");
  std::ifstream in(dir / "curve.csv");
  std::string line;
  int rows = 0;
  std::getline(in, line);
  CHECK(line == "k,mean,ci_lo,ci_hi");
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == sched.K);
}
