#pragma once

// Violation statistics, warm-start solver statistics, and the ground-truth
// violation curve, plus the machine-readable report they feed.

#include <filesystem>
#include <string>
#include <vector>

#include "trajdiff/common.hpp"
#include "trajdiff/dataset.hpp"
#include "trajdiff/diffusion.hpp"
#include "trajdiff/io.hpp"
#include "trajdiff/problems.hpp"
#include "trajdiff/solver.hpp"

namespace trajdiff {

constexpr double kFeasibleEps = 1e-6;  // "feasible (no violation)" threshold
constexpr int kSamplesFormatVersion = 1;

// ---------------------------------------------------------------------------
// Small statistics helpers (quantile: linear interpolation between closest
// ranks; std: n-1 denominator).

inline double quantile(std::vector<double> v, double p) {
  require(!v.empty(), Errc::invalid_argument, "quantile of empty set");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const size_t lo = static_cast<size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

inline double median(const std::vector<double>& v) { return quantile(v, 0.5); }

struct StatSummary {
  double mean = 0.0;
  double std = 0.0;
  double q25 = 0.0;
  double median = 0.0;
  long n = 0;

  static StatSummary of(const std::vector<double>& v) {
    StatSummary s;
    s.n = static_cast<long>(v.size());
    if (v.empty()) return s;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / s.n;
    if (s.n > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(ss / (s.n - 1));
    }
    s.q25 = quantile(v, 0.25);
    s.median = trajdiff::median(v);
    return s;
  }

  json to_json() const {
    return json{{"mean", mean}, {"std", std}, {"q25", q25},
                {"median", median}, {"n", n}};
  }
};

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a,
                       const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, Errc::invalid_argument,
          "spearman");
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](size_t i, size_t j) { return v[i] < v[j]; });
    std::vector<double> r(n);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (i + j) + 1.0;
      for (size_t t = i; t <= j; ++t) r[idx[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

// ---------------------------------------------------------------------------
// Sample sets: rows of (problem index, normalized y, normalized x). Also the
// on-disk format written by the sampling command: meta.json plus data.f32
// rows [idx | y | x].

struct SampleSet {
  Task task;
  Mat x;  // N x n, normalized
  Mat y;  // N x k_y, normalized
  std::vector<int> problem_index;

  long size() const { return x.rows(); }
};

inline void save_samples(const SampleSet& s, const std::filesystem::path& dir,
                         const json& provenance = json::object()) {
  std::filesystem::create_directories(dir);
  json meta;
  meta["format_version"] = kSamplesFormatVersion;
  meta["kind"] = "samples";
  meta["task"] = task_name(s.task.kind);
  meta["timesteps"] = s.task.timesteps;
  meta["geometry"] = geometry_to_json(s.task.geom);
  meta["decision_dim"] = s.task.decision_dim();
  meta["condition_dim"] = s.task.condition_dim();
  meta["n_samples"] = s.size();
  meta["provenance"] = provenance;
  io::write_atomic(dir / "meta.json", [&](const std::filesystem::path& p) {
    io::write_json(p, meta);
  });
  std::vector<float> blob;
  blob.reserve(static_cast<size_t>(s.size()) * (1 + s.y.cols() + s.x.cols()));
  for (long r = 0; r < s.size(); ++r) {
    blob.push_back(static_cast<float>(s.problem_index[r]));
    for (long c = 0; c < s.y.cols(); ++c)
      blob.push_back(static_cast<float>(s.y(r, c)));
    for (long c = 0; c < s.x.cols(); ++c)
      blob.push_back(static_cast<float>(s.x(r, c)));
  }
  io::write_atomic(dir / "data.f32", [&](const std::filesystem::path& p) {
    io::write_f32(p, blob);
  });
}

inline SampleSet load_samples(const std::filesystem::path& dir) {
  const json meta = io::read_json(dir / "meta.json");
  require(meta.value("format_version", -1) == kSamplesFormatVersion,
          Errc::version_mismatch, "samples format");
  SampleSet s;
  s.task = Task{task_from_name(meta.at("task")), meta.at("timesteps"),
                geometry_from_json(meta.at("geometry"))};
  const long N = meta.at("n_samples");
  const int ky = meta.at("condition_dim");
  const int n = meta.at("decision_dim");
  require(ky == s.task.condition_dim() && n == s.task.decision_dim(),
          Errc::shape_mismatch, "samples dims");
  const std::vector<float> blob = io::read_f32(dir / "data.f32");
  require(static_cast<long>(blob.size()) == N * (1 + ky + n),
          Errc::row_count_mismatch, "samples data.f32");
  s.x.resize(N, n);
  s.y.resize(N, ky);
  s.problem_index.resize(N);
  size_t off = 0;
  for (long r = 0; r < N; ++r) {
    s.problem_index[r] = static_cast<int>(blob[off++]);
    for (int c = 0; c < ky; ++c) s.y(r, c) = blob[off++];
    for (int c = 0; c < n; ++c) s.x(r, c) = blob[off++];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Table 1: violation statistics of raw samples.

struct ViolationStats {
  double mean = 0.0;
  double std = 0.0;
  double quantile_25 = 0.0;
  double feasible_per_mille = 0.0;
  long n_samples = 0;

  json to_json() const {
    return json{{"mean", mean},
                {"std", std},
                {"q25", quantile_25},
                {"feasible_per_mille", feasible_per_mille},
                {"n_samples", n_samples}};
  }
};

inline std::vector<double> violation_values(const Mat& xs, const Mat& ys,
                                            const Task& task,
                                            const NormalizationStats& stats) {
  require(xs.rows() == ys.rows(), Errc::dimension_mismatch,
          "samples/problems");
  require(xs.rows() > 0, Errc::empty_dataset, "no samples");
  std::vector<double> v(static_cast<size_t>(xs.rows()));
  parallel_chunks(xs.rows(), 32, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      const Vec xn = clip(Vec(xs.row(i).transpose()), -1.0, 1.0);
      const Vec x = stats.denormalize_x(xn);
      const ProblemParams y = ProblemParams::from_vector(
          task, stats.denormalize_y(ys.row(i).transpose()));
      v[i] = violation(x, y, task).total;
    }
  });
  return v;
}

inline ViolationStats violation_stats(const Mat& xs, const Mat& ys,
                                      const Task& task,
                                      const NormalizationStats& stats,
                                      double feasible_eps = kFeasibleEps) {
  const std::vector<double> v = violation_values(xs, ys, task, stats);
  const StatSummary s = StatSummary::of(v);
  ViolationStats out;
  out.mean = s.mean;
  out.std = s.std;
  out.quantile_25 = s.q25;
  out.n_samples = s.n;
  long feas = 0;
  for (double x : v)
    if (x <= feasible_eps) ++feas;
  out.feasible_per_mille = 1000.0 * feas / static_cast<double>(v.size());
  return out;
}

// ---------------------------------------------------------------------------
// Table 2: warm-start solver statistics.

struct WarmStartStats {
  double locally_optimal_ratio = 0.0;
  long n_attempts = 0;
  StatSummary time_all, time_success;    // seconds
  StatSummary iters_all, iters_success;  // inner (projected-gradient) steps

  json to_json() const {
    return json{{"locally_optimal_ratio", locally_optimal_ratio},
                {"n_attempts", n_attempts},
                {"time_all", time_all.to_json()},
                {"time_success", time_success.to_json()},
                {"iters_all", iters_all.to_json()},
                {"iters_success", iters_success.to_json()}};
  }
};

inline WarmStartStats warm_start_stats(const Mat& xs, const Mat& ys,
                                       const Task& task,
                                       const NormalizationStats& stats,
                                       const SolveOptions& opts) {
  require(xs.rows() == ys.rows(), Errc::dimension_mismatch,
          "samples/problems");
  require(xs.rows() > 0, Errc::empty_dataset, "no samples");
  std::vector<SolveResult> results(static_cast<size_t>(xs.rows()));
  parallel_chunks(xs.rows(), 4, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      const Vec xn = clip(Vec(xs.row(i).transpose()), -1.0, 1.0);
      const Vec x = stats.denormalize_x(xn);
      const ProblemParams y = ProblemParams::from_vector(
          task, stats.denormalize_y(ys.row(i).transpose()));
      results[i] = warm_start(y, task, x, opts);
    }
  });
  WarmStartStats out;
  out.n_attempts = static_cast<long>(results.size());
  std::vector<double> t_all, t_ok, i_all, i_ok;
  long ok = 0;
  for (const SolveResult& r : results) {
    t_all.push_back(r.wall_time);
    i_all.push_back(static_cast<double>(r.inner_iterations));
    if (r.status == SolveStatus::LocallyOptimal) {
      ++ok;
      t_ok.push_back(r.wall_time);
      i_ok.push_back(static_cast<double>(r.inner_iterations));
    }
  }
  out.locally_optimal_ratio = static_cast<double>(ok) / out.n_attempts;
  out.time_all = StatSummary::of(t_all);
  out.iters_all = StatSummary::of(i_all);
  if (ok > 0) {
    out.time_success = StatSummary::of(t_ok);
    out.iters_success = StatSummary::of(i_ok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fig. 2: ground-truth violation versus sampling step.

struct ViolationCurvePoint {
  int k = 0;
  double mean = 0.0;
  double ci_half = 0.0;  // 1.96 * stderr
};

struct ViolationCurve {
  std::vector<ViolationCurvePoint> points;
  int n_data = 0;
  int n_samples = 0;

  std::vector<double> means() const {
    std::vector<double> m;
    for (const auto& p : points) m.push_back(p.mean);
    return m;
  }
};

inline ViolationCurve gt_violation_curve(const TrajectoryDataset& ds,
                                         const NoiseSchedule& sched,
                                         int n_data, int n_samples, Rng& rng) {
  require(ds.size() > 0, Errc::empty_dataset, "curve over empty dataset");
  require(n_data >= 1 && n_data <= ds.size(), Errc::invalid_argument,
          "n_data exceeds dataset");
  require(n_samples >= 1, Errc::invalid_argument, "n_samples");
  ViolationCurve curve;
  curve.n_data = n_data;
  curve.n_samples = n_samples;
  curve.points.resize(sched.K);
  std::vector<std::uint64_t> seeds(sched.K);
  for (int k = 0; k < sched.K; ++k) seeds[k] = rng.raw();

  parallel_for(sched.K, [&](std::int64_t kidx) {
    Rng krng(seeds[kidx]);
    const int k = static_cast<int>(kidx) + 1;
    const double ab = sched.alpha_bar_at(k);
    double sum = 0.0, sumsq = 0.0;
    const long count = static_cast<long>(n_data) * n_samples;
    for (int i = 0; i < n_data; ++i) {
      const Vec x0 = ds.x_row(i);
      const ProblemParams y = ProblemParams::from_vector(
          ds.task, ds.stats.denormalize_y(ds.y_row(i)));
      for (int s = 0; s < n_samples; ++s) {
        const Vec xk = clip(Vec(std::sqrt(ab) * x0 +
                                std::sqrt(1.0 - ab) *
                                    krng.normal_vec(x0.size())),
                            -1.0, 1.0);
        const double v = violation(ds.stats.denormalize_x(xk), y, ds.task).total;
        sum += v;
        sumsq += v * v;
      }
    }
    const double mean = sum / count;
    const double var =
        count > 1 ? (sumsq - count * mean * mean) / (count - 1) : 0.0;
    curve.points[kidx] = {k, mean,
                          1.96 * std::sqrt(std::max(0.0, var) / count)};
  });
  return curve;
}

inline void write_curve_csv(const ViolationCurve& curve,
                            const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Errc::io_error, "cannot open " + path.string());
  out << "k,mean,ci_lo,ci_hi\n";
  for (const auto& p : curve.points)
    out << p.k << "," << p.mean << "," << (p.mean - p.ci_half) << ","
        << (p.mean + p.ci_half) << "\n";
}

// ---------------------------------------------------------------------------
// "Uniform" baseline: box-uniform guesses formatted like sampler output.

inline SampleSet uniform_baseline(const Mat& problems_y, const Task& task,
                                  int n_per_problem, Rng& rng,
                                  const NormalizationStats& stats) {
  require(n_per_problem >= 1, Errc::invalid_argument, "n_per_problem");
  SampleSet s;
  s.task = task;
  const long P = problems_y.rows();
  s.x.resize(P * n_per_problem, task.decision_dim());
  s.y.resize(P * n_per_problem, task.condition_dim());
  long r = 0;
  for (long p = 0; p < P; ++p)
    for (int i = 0; i < n_per_problem; ++i, ++r) {
      s.x.row(r) =
          stats.normalize_x(sample_initial_guess(task, rng)).transpose();
      s.y.row(r) = problems_y.row(p);
      s.problem_index.push_back(static_cast<int>(p));
    }
  return s;
}

// ---------------------------------------------------------------------------
// Report assembly. violation_table rows carry exactly the columns
// method, mean, std, q25, feasible_per_mille.

struct MethodReport {
  std::string method;
  ViolationStats violation;
  bool has_warm_start = false;
  WarmStartStats warm_start;
};

inline json report(const std::string& task, const std::vector<MethodReport>& methods) {
  json out;
  out["task"] = task;
  out["feasible_eps"] = kFeasibleEps;
  json table = json::array();
  json ws_table = json::array();
  json per_method = json::object();
  for (const auto& m : methods) {
    table.push_back({{"method", m.method},
                     {"mean", m.violation.mean},
                     {"std", m.violation.std},
                     {"q25", m.violation.quantile_25},
                     {"feasible_per_mille", m.violation.feasible_per_mille}});
    json entry;
    entry["violation"] = m.violation.to_json();
    if (m.has_warm_start) {
      entry["warm_start"] = m.warm_start.to_json();
      ws_table.push_back(
          {{"method", m.method},
           {"ratio", m.warm_start.locally_optimal_ratio},
           {"time_mean", m.warm_start.time_all.mean},
           {"time_std", m.warm_start.time_all.std},
           {"time_q25", m.warm_start.time_all.q25},
           {"time_median", m.warm_start.time_all.median},
           {"iters_median", m.warm_start.iters_all.median}});
    }
    per_method[m.method] = entry;
  }
  out["violation_table"] = table;
  out["warm_start_table"] = ws_table;
  out["methods"] = per_method;
  return out;
}

}  // namespace trajdiff
