// trajdiff command-line tool: dataset generation, diffusion-model training,
// sampling, and evaluation, wired together through a JSON experiment config
// (file values first, command-line flags win).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>

#include "trajdiff/dataset.hpp"
#include "trajdiff/denoiser.hpp"
#include "trajdiff/diffusion.hpp"
#include "trajdiff/evaluation.hpp"
#include "trajdiff/experiment.hpp"
#include "trajdiff/problems.hpp"
#include "trajdiff/solver.hpp"
#include "trajdiff/training.hpp"

namespace fs = std::filesystem;
using namespace trajdiff;

namespace {

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case Errc::invalid_argument:
    case Errc::missing_file:
    case Errc::version_mismatch:
    case Errc::shape_mismatch:
    case Errc::dimension_mismatch:
      return 2;
    default:
      return 1;
  }
}

struct CommonFlags {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> out;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON experiment config file");
    app->add_option("--seed", seed, "master RNG seed");
    app->add_option("--threads", threads,
                    "worker cap (default: TRAJDIFF_THREADS or hardware)");
    app->add_option("--out", out, "output directory");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg;
    if (config_path) cfg = load_experiment_config(*config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (out) cfg.out = *out;
    if (cfg.threads > 0) set_max_threads(cfg.threads);
    return cfg;
  }
};

Vec distinct_problem_rows(const Mat& y, const std::vector<int>& index,
                          std::vector<long>* first_rows) {
  first_rows->clear();
  int last = -1;
  for (long r = 0; r < y.rows(); ++r)
    if (index[r] != last) {
      last = index[r];
      first_rows->push_back(r);
    }
  return Vec();
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonFlags& common,
                 const std::optional<std::string>& task_name_opt,
                 const std::optional<int>& timesteps,
                 const std::optional<int>& problems,
                 const std::optional<int>& guesses) {
  ExperimentConfig cfg = common.resolve();
  if (task_name_opt) cfg.task = task_from_name(*task_name_opt);
  if (timesteps) cfg.timesteps = *timesteps;
  if (problems) cfg.dataset_problems = *problems;
  if (guesses) cfg.dataset_guesses = *guesses;
  require(!cfg.out.empty(), Errc::invalid_argument, "--out is required");
  require(cfg.dataset_problems >= 1 && cfg.dataset_guesses >= 1,
          Errc::invalid_argument, "--problems and --guesses must be >= 1");

  const Task task = cfg.make_task();
  const TrajectoryDataset ds = generate(task, cfg.dataset_problems,
                                        cfg.dataset_guesses, cfg.seed, cfg.solver);
  save(ds, cfg.out);
  write_provenance(cfg.out, "gen-data", cfg);
  std::printf("gen-data: %ld pairs from %d problems (%ld/%ld solves locally optimal)\n",
              ds.size(), ds.n_problems(), ds.provenance.n_locally_optimal,
              ds.provenance.n_solves);
  return 0;
}

int cmd_train(const CommonFlags& common, const std::string& data_dir,
              const std::optional<int>& epochs,
              const std::optional<double>& lambda, bool constraint_aware_flag,
              const std::optional<int>& batch_size,
              const std::optional<double>& lr, const std::optional<int>& K,
              const std::optional<double>& p_uncond,
              const std::optional<int>& n_gt,
              const std::optional<int>& ckpt_every) {
  ExperimentConfig cfg = common.resolve();
  if (epochs) cfg.train.epochs = *epochs;
  if (lambda) cfg.train.lambda = *lambda;
  cfg.train.constraint_aware = constraint_aware_flag;
  if (batch_size) cfg.train.batch_size = *batch_size;
  if (lr) cfg.train.learning_rate = *lr;
  if (K) cfg.train.K = *K;
  if (p_uncond) cfg.train.p_uncond = *p_uncond;
  if (n_gt) cfg.train.n_gt = *n_gt;
  if (ckpt_every) cfg.train.checkpoint_every = *ckpt_every;
  require(!cfg.out.empty(), Errc::invalid_argument, "--out is required");

  const TrajectoryDataset ds = load(data_dir);
  cfg.task = ds.task.kind;
  cfg.timesteps = ds.task.timesteps;
  cfg.geometry = ds.task.geom;
  cfg.train.seed = cfg.seed;
  cfg.train.K = K ? *K : cfg.schedule_K;
  cfg.train.beta_start = cfg.beta_start;
  cfg.train.beta_end = cfg.beta_end;

  Denoiser init = Denoiser::init(cfg.make_denoiser_config(), cfg.seed);
  const TrainResult result = train(ds, std::move(init), cfg.train, fs::path(cfg.out));
  write_provenance(cfg.out, "train", cfg);
  std::printf("train: %d epochs, final L_diff %.4f, L_vio/mu %.4f (%s)\n",
              cfg.train.epochs, result.log.back().l_diff,
              result.log.back().l_vio_norm,
              cfg.train.constraint_aware ? "constraint-aware" : "unconstrained");
  std::printf("train: checkpoint at %s\n",
              (fs::path(cfg.out) / "ckpt_final").string().c_str());
  return 0;
}

int cmd_sample(const CommonFlags& common, const std::string& ckpt_dir,
               const std::string& data_dir, const std::optional<int>& n,
               const std::optional<double>& omega,
               const std::optional<double>& test_fraction,
               const std::optional<std::uint64_t>& split_seed, bool no_clip) {
  ExperimentConfig cfg = common.resolve();
  if (n) cfg.eval.n_samples_per_problem = *n;
  if (omega) cfg.eval.omega = *omega;
  if (test_fraction) cfg.eval.test_fraction = *test_fraction;
  require(!cfg.out.empty(), Errc::invalid_argument, "--out is required");
  require(cfg.eval.n_samples_per_problem >= 1, Errc::invalid_argument,
          "--n must be >= 1");

  const TrajectoryDataset ds = load(data_dir);
  json ckpt_prov;
  const Denoiser denoiser = load_checkpoint(ckpt_dir, &ckpt_prov);
  ensure_compatible(denoiser.config(), ds.task);

  const int K = ckpt_prov.value("K", cfg.schedule_K);
  const double bs = ckpt_prov.value("beta_start", cfg.beta_start);
  const double be = ckpt_prov.value("beta_end", cfg.beta_end);
  const NoiseSchedule sched = make_schedule(K, bs, be);

  const std::uint64_t sseed = split_seed ? *split_seed : cfg.seed;
  auto [train_side, test_side] = split(ds, cfg.eval.test_fraction, sseed);

  std::vector<long> first_rows;
  distinct_problem_rows(test_side.y.cast<double>(), test_side.problem_index,
                        &first_rows);
  const long P = static_cast<long>(first_rows.size());
  const int per = cfg.eval.n_samples_per_problem;

  SampleSet out;
  out.task = ds.task;
  out.x.resize(P * per, ds.task.decision_dim());
  out.y.resize(P * per, ds.task.condition_dim());
  out.problem_index.resize(P * per);

  Rng rng(cfg.seed);
  std::vector<std::uint64_t> row_seeds(P * per);
  for (auto& s : row_seeds) s = rng.raw();
  parallel_chunks(P * per, 4, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t r = b; r < e; ++r) {
      const long p = r / per;
      const Vec y = test_side.y_row(first_rows[p]);
      Rng row_rng(row_seeds[r]);
      const Vec x = sample(denoiser, y, cfg.eval.omega, sched, row_rng,
                           /*clip_final=*/!no_clip);
      out.x.row(r) = x.transpose();
      out.y.row(r) = y.transpose();
      out.problem_index[r] = static_cast<int>(p);
    }
  });

  json prov{{"omega", cfg.eval.omega},
            {"n_per_problem", per},
            {"K", K},
            {"beta_start", bs},
            {"beta_end", be},
            {"seed", cfg.seed},
            {"split_seed", sseed},
            {"test_fraction", cfg.eval.test_fraction},
            {"checkpoint", ckpt_dir},
            {"clip_final", !no_clip}};
  save_samples(out, cfg.out, prov);
  write_provenance(cfg.out, "sample", cfg);
  std::printf("sample: %ld samples over %ld test problems (omega %.2f)\n",
              out.size(), P, cfg.eval.omega);
  return 0;
}

int cmd_eval(const CommonFlags& common,
             const std::vector<std::string>& samples_specs,
             const std::string& data_dir, bool with_warm_start,
             bool with_curves, bool with_uniform,
             const std::optional<int>& curve_K) {
  ExperimentConfig cfg = common.resolve();
  if (curve_K) cfg.schedule_K = *curve_K;
  require(!cfg.out.empty(), Errc::invalid_argument, "--out is required");
  const TrajectoryDataset ds = load(data_dir);
  fs::create_directories(cfg.out);

  std::vector<MethodReport> methods;
  Mat problems_y;  // distinct problems the uniform baseline runs on

  auto add_method = [&](const std::string& name, const Mat& xs, const Mat& ys,
                        const std::vector<int>& index) {
    MethodReport m;
    m.method = name;
    m.violation = violation_stats(xs, ys, ds.task, ds.stats);
    if (with_warm_start) {
      m.warm_start = warm_start_stats(xs, ys, ds.task, ds.stats, cfg.solver);
      m.has_warm_start = true;
    }
    methods.push_back(std::move(m));
    if (problems_y.rows() == 0) {
      std::vector<long> first_rows;
      distinct_problem_rows(ys, index, &first_rows);
      problems_y.resize(static_cast<long>(first_rows.size()), ys.cols());
      for (size_t i = 0; i < first_rows.size(); ++i)
        problems_y.row(static_cast<long>(i)) = ys.row(first_rows[i]);
    }
  };

  if (samples_specs.empty()) {
    // no samples given: evaluate the dataset's own pairs
    add_method("dataset", ds.x.cast<double>(), ds.y.cast<double>(),
               ds.problem_index);
  }
  for (const std::string& spec : samples_specs) {
    // "name=dir" or a bare directory (named "diffusion")
    std::string name = "diffusion", dir = spec;
    if (const auto pos = spec.find('='); pos != std::string::npos) {
      name = spec.substr(0, pos);
      dir = spec.substr(pos + 1);
    }
    const SampleSet s = load_samples(dir);
    require(s.task.kind == ds.task.kind &&
                s.task.timesteps == ds.task.timesteps,
            Errc::shape_mismatch, "samples/dataset task");
    add_method(name, s.x, s.y, s.problem_index);
  }

  if (with_uniform) {
    Rng rng(cfg.seed + 1);
    const SampleSet uni = uniform_baseline(
        problems_y, ds.task, cfg.eval.n_samples_per_problem, rng, ds.stats);
    MethodReport m;
    m.method = "uniform";
    m.violation = violation_stats(uni.x, uni.y, ds.task, ds.stats);
    if (with_warm_start) {
      m.warm_start =
          warm_start_stats(uni.x, uni.y, ds.task, ds.stats, cfg.solver);
      m.has_warm_start = true;
    }
    methods.push_back(std::move(m));
  }

  const json rep = report(task_name(ds.task.kind), methods);
  io::write_atomic(fs::path(cfg.out) / "report.json",
                   [&](const fs::path& p) { io::write_json(p, rep); });

  if (with_curves) {
    const NoiseSchedule sched =
        make_schedule(cfg.schedule_K, cfg.beta_start, cfg.beta_end);
    Rng rng(cfg.seed + 2);
    const ViolationCurve curve = gt_violation_curve(
        ds, sched, std::min<long>(cfg.eval.curve_n_data, ds.size()),
        cfg.eval.curve_n_samples, rng);
    write_curve_csv(curve, fs::path(cfg.out) / "curve.csv");
  }
  write_provenance(cfg.out, "eval", cfg);
  for (const auto& m : methods)
    std::printf("eval[%s]: mean %.4f  q25 %.4f  feasible %.1f permille\n",
                m.method.c_str(), m.violation.mean, m.violation.quantile_25,
                m.violation.feasible_per_mille);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"constraint-aware diffusion for trajectory optimization"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a solver dataset");
  CommonFlags gen_common;
  gen_common.attach(gen);
  std::optional<std::string> gen_task;
  std::optional<int> gen_T, gen_problems, gen_guesses;
  gen->add_option("--task", gen_task, "tabletop | twocar");
  gen->add_option("--timesteps", gen_T, "trajectory discretization steps");
  gen->add_option("--problems", gen_problems, "number of sampled problems");
  gen->add_option("--guesses", gen_guesses, "initial guesses per problem");

  // train
  auto* tr = app.add_subcommand("train", "train a denoiser on a dataset");
  CommonFlags tr_common;
  tr_common.attach(tr);
  std::string tr_data;
  std::optional<int> tr_epochs, tr_batch, tr_K, tr_ngt, tr_ckpt_every;
  std::optional<double> tr_lambda, tr_lr, tr_puncond;
  bool tr_ca = false;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_flag("--constraint-aware", tr_ca, "use the hybrid violation loss");
  tr->add_option("--lambda", tr_lambda, "violation loss weight");
  tr->add_option("--batch-size", tr_batch, "minibatch size");
  tr->add_option("--lr", tr_lr, "Adam learning rate");
  tr->add_option("--K", tr_K, "diffusion steps");
  tr->add_option("--p-uncond", tr_puncond, "condition dropout probability");
  tr->add_option("--n-gt", tr_ngt, "draws for the ground-truth violation mean");
  tr->add_option("--ckpt-every", tr_ckpt_every, "checkpoint cadence in epochs");

  // sample
  auto* sa = app.add_subcommand("sample", "sample trajectories from a checkpoint");
  CommonFlags sa_common;
  sa_common.attach(sa);
  std::string sa_ckpt, sa_data;
  std::optional<int> sa_n;
  std::optional<double> sa_omega, sa_frac;
  std::optional<std::uint64_t> sa_split_seed;
  bool sa_noclip = false;
  sa->add_option("--ckpt", sa_ckpt, "checkpoint directory")->required();
  sa->add_option("--data", sa_data, "dataset directory (test problems)")->required();
  sa->add_option("--n", sa_n, "samples per test problem");
  sa->add_option("--omega", sa_omega, "classifier-free guidance weight");
  sa->add_option("--test-fraction", sa_frac, "problem-level test fraction");
  sa->add_option("--split-seed", sa_split_seed, "seed for the train/test split");
  sa->add_flag("--no-clip", sa_noclip, "skip final clipping to [-1, 1]");

  // eval
  auto* ev = app.add_subcommand("eval", "violation / warm-start evaluation");
  CommonFlags ev_common;
  ev_common.attach(ev);
  std::vector<std::string> ev_samples;
  std::string ev_data;
  std::optional<int> ev_K;
  bool ev_ws = false, ev_curves = false, ev_uniform = false;
  ev->add_option("--samples", ev_samples,
                 "samples directory, optionally name=dir; repeatable "
                 "(default: evaluate the dataset pairs)");
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--K", ev_K, "schedule steps for --curves");
  ev->add_flag("--warm-start", ev_ws, "run warm-start solver statistics");
  ev->add_flag("--curves", ev_curves, "emit the ground-truth violation curve");
  ev->add_flag("--uniform-baseline", ev_uniform, "add the uniform baseline");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors exit 2
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_common, gen_task, gen_T, gen_problems, gen_guesses);
    if (tr->parsed())
      return cmd_train(tr_common, tr_data, tr_epochs, tr_lambda, tr_ca,
                       tr_batch, tr_lr, tr_K, tr_puncond, tr_ngt,
                       tr_ckpt_every);
    if (sa->parsed())
      return cmd_sample(sa_common, sa_ckpt, sa_data, sa_n, sa_omega, sa_frac,
                        sa_split_seed, sa_noclip);
    if (ev->parsed())
      return cmd_eval(ev_common, ev_samples, ev_data, ev_ws, ev_curves,
                      ev_uniform, ev_K);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
