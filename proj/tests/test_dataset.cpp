#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "trajdiff/dataset.hpp"

using namespace trajdiff;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("trajdiff_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Synthetic dataset with `P` distinct problems and `per` rows each.
TrajectoryDataset synthetic(int P, int per) {
  Task task = Task::tabletop(2);
  TrajectoryDataset ds;
  ds.task = task;
  ds.stats = NormalizationStats::from_task(task);
  ds.y.resize(P * per, task.condition_dim());
  ds.x.resize(P * per, task.decision_dim());
  Rng rng(99);
  long r = 0;
  for (int p = 0; p < P; ++p) {
    Eigen::RowVectorXf yrow(task.condition_dim());
    for (int c = 0; c < task.condition_dim(); ++c)
      yrow[c] = static_cast<float>(rng.uniform(-0.9, 0.9));
    for (int k = 0; k < per; ++k, ++r) {
      ds.y.row(r) = yrow;
      for (int c = 0; c < task.decision_dim(); ++c)
        ds.x(r, c) = static_cast<float>(rng.uniform(-1.0, 1.0));
      ds.problem_index.push_back(p);
    }
  }
  return ds;
}

}  // namespace

TEST_CASE("normalize: affine endpoints, midpoint, and round trip") {
  Task task = Task::twocar(3);
  const NormalizationStats stats = NormalizationStats::from_task(task);
  CHECK(stats.normalize_x(stats.x_lo).isApproxToConstant(-1.0));
  CHECK(stats.normalize_x(stats.x_hi).isApproxToConstant(1.0));
  const Vec mid = 0.5 * (stats.x_lo + stats.x_hi);
  CHECK(stats.normalize_x(mid).cwiseAbs().maxCoeff() < 1e-15);

  Rng rng(4);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    Vec x(stats.x_lo.size());
    for (Eigen::Index d = 0; d < x.size(); ++d)
      x[d] = rng.uniform(stats.x_lo[d], stats.x_hi[d]);
    worst = std::max(
        worst,
        (stats.denormalize_x(stats.normalize_x(x)) - x).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("generate: one easy problem, one guess, one pair") {
  Task task = Task::tabletop(4);
  SolveOptions opts;
  // seed picked so the single solve converges
  const TrajectoryDataset ds = generate(task, 1, 1, 7, opts);
  CHECK(ds.size() == 1);
  CHECK(ds.n_problems() == 1);
  CHECK((ds.x.array() >= -1.0f).all());
  CHECK((ds.x.array() <= 1.0f).all());
}

TEST_CASE("generate: identical seeds give byte-identical files") {
  Task task = Task::tabletop(4);
  SolveOptions opts;
  const TrajectoryDataset a = generate(task, 4, 3, 11, opts);
  const TrajectoryDataset b = generate(task, 4, 3, 11, opts);
  const fs::path da = temp_dir("gen_a"), db = temp_dir("gen_b");
  save(a, da);
  save(b, db);
  CHECK(slurp(da / "data.f32") == slurp(db / "data.f32"));
  CHECK(slurp(da / "meta.json") == slurp(db / "meta.json"));
}

TEST_CASE("generate: loaded pairs stay feasible after the f32 round trip") {
  Task task = Task::tabletop(5);
  SolveOptions opts;
  const TrajectoryDataset ds = generate(task, 6, 4, 2, opts);
  const fs::path dir = temp_dir("feas");
  save(ds, dir);
  const TrajectoryDataset back = load(dir);
  REQUIRE(back.size() == ds.size());
  for (long r = 0; r < back.size(); ++r) {
    const Vec x = back.stats.denormalize_x(back.x_row(r));
    const ProblemParams y = ProblemParams::from_vector(
        back.task, back.stats.denormalize_y(back.y_row(r)));
    CHECK(violation(x, y, back.task).total <= back.provenance.feas_tol);
  }
}

TEST_CASE("generate: zero successes raise empty_dataset") {
  Task task = Task::tabletop(4);
  SolveOptions opts;
  opts.max_outer_iters = 0;  // nothing can converge
  CHECK_THROWS_MATCHES(generate(task, 2, 2, 1, opts), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == Errc::empty_dataset;
                       }));
}

TEST_CASE("split: problem-level, exact counts, deterministic") {
  const TrajectoryDataset ds = synthetic(10, 3);
  auto [train, test] = split(ds, 0.2, 5);
  CHECK(test.n_problems() == 2);
  CHECK(train.n_problems() == 8);
  CHECK(train.size() + test.size() == ds.size());

  // no condition appears on both sides
  for (long i = 0; i < train.size(); ++i)
    for (long j = 0; j < test.size(); ++j)
      CHECK(train.y.row(i) != test.y.row(j));

  auto [train2, test2] = split(ds, 0.2, 5);
  CHECK(train2.x == train.x);
  CHECK(test2.x == test.x);

  CHECK_THROWS_AS(split(synthetic(1, 4), 0.5, 1), Error);
}

TEST_CASE("save/load: field-by-field round trip") {
  const TrajectoryDataset ds = synthetic(5, 2);
  const fs::path dir = temp_dir("roundtrip");
  save(ds, dir);
  const TrajectoryDataset back = load(dir);
  CHECK(back.task.kind == ds.task.kind);
  CHECK(back.task.timesteps == ds.task.timesteps);
  CHECK(back.y == ds.y);
  CHECK(back.x == ds.x);
  CHECK(back.problem_index == ds.problem_index);
  CHECK(back.stats == ds.stats);
}

TEST_CASE("load: corruption raises the designated errors") {
  const TrajectoryDataset ds = synthetic(4, 2);
  const fs::path dir = temp_dir("corrupt");
  save(ds, dir);

  SECTION("truncated data.f32 -> row-count mismatch") {
    const auto full = slurp(dir / "data.f32");
    std::ofstream out(dir / "data.f32", std::ios::binary | std::ios::trunc);
    out.write(full.data(), static_cast<long>(full.size()) - 8);
    out.close();
    CHECK_THROWS_MATCHES(load(dir), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == Errc::row_count_mismatch;
                         }));
  }
  SECTION("unknown version -> version mismatch") {
    json meta = io::read_json(dir / "meta.json");
    meta["format_version"] = 999;
    io::write_json(dir / "meta.json", meta);
    CHECK_THROWS_MATCHES(load(dir), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == Errc::version_mismatch;
                         }));
  }
  SECTION("missing file") {
    fs::remove(dir / "data.f32");
    CHECK_THROWS_MATCHES(load(dir), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == Errc::missing_file;
                         }));
  }
}

TEST_CASE("generate: desk-scale tabletop success rate") {
  Task task = Task::tabletop(20);
  SolveOptions opts;
  const TrajectoryDataset ds = generate(task, 100, 25, 0, opts);
  const double rate = static_cast<double>(ds.provenance.n_locally_optimal) /
                      static_cast<double>(ds.provenance.n_solves);
  CHECK(rate >= 0.6);
}

TEST_CASE("stats derive from bounds, not data") {
  Task task = Task::tabletop(4);
  SolveOptions opts;
  const TrajectoryDataset a = generate(task, 2, 2, 1, opts);
  const TrajectoryDataset b = generate(task, 2, 2, 123, opts);
  CHECK(a.stats == b.stats);
}
