#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "trajdiff/training.hpp"

using namespace trajdiff;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

Task toy_task() { return Task::tabletop(2); }

DenoiserConfig toy_net(const Task& task) {
  DenoiserConfig c = DenoiserConfig::for_task(task, /*desk=*/true);
  c.hidden_widths = {6, 6, 8};
  c.cond_widths = {4, 6};
  c.time_embed_dim = 8;
  return c;
}

// Dataset of uniform decision draws; good enough for loss plumbing.
TrajectoryDataset toy_dataset(int n_problems, int per, std::uint64_t seed) {
  const Task task = toy_task();
  TrajectoryDataset ds;
  ds.task = task;
  ds.stats = NormalizationStats::from_task(task);
  const long N = static_cast<long>(n_problems) * per;
  ds.y.resize(N, task.condition_dim());
  ds.x.resize(N, task.decision_dim());
  Rng rng(seed);
  long r = 0;
  for (int p = 0; p < n_problems; ++p) {
    const Vec yv =
        round_to_f32(ds.stats.normalize_y(sample_problem(task, rng).to_vector(task)));
    for (int j = 0; j < per; ++j, ++r) {
      ds.y.row(r) = yv.cast<float>().transpose();
      const Vec xv =
          round_to_f32(ds.stats.normalize_x(sample_initial_guess(task, rng)));
      ds.x.row(r) = xv.cast<float>().transpose();
      ds.problem_index.push_back(p);
    }
  }
  return ds;
}

TrainingBatch make_batch(const TrajectoryDataset& ds, long B, int K,
                         double p_uncond, bool with_vio, int n_gt,
                         std::uint64_t seed) {
  const int n = ds.task.decision_dim();
  TrainingBatch b;
  b.x0.resize(B, n);
  b.y.resize(B, ds.task.condition_dim());
  b.eps.resize(B, n);
  b.k.resize(B);
  b.uncond.resize(B);
  Rng rng(seed);
  for (long i = 0; i < B; ++i) {
    const long r = static_cast<long>(rng.uniform_int(ds.size()));
    b.x0.row(i) = ds.x.row(r).cast<double>();
    b.y.row(i) = ds.y.row(r).cast<double>();
    b.k[i] = 1 + static_cast<int>(rng.uniform_int(K));
    b.eps.row(i) = rng.normal_vec(n).transpose();
    b.uncond[i] = rng.uniform01() < p_uncond;
  }
  if (with_vio) {
    b.z.resize(B);
    b.mu_noise.resize(B);
    for (long i = 0; i < B; ++i) {
      b.z[i].setZero(1, n);
      if (b.k[i] > 1) b.z[i].row(0) = rng.normal_vec(n).transpose();
      b.mu_noise[i].resize(n_gt, n);
      for (int g = 0; g < n_gt; ++g)
        b.mu_noise[i].row(g) = rng.normal_vec(n).transpose();
    }
  }
  return b;
}

// A feasible tabletop instance hit exactly by a straight-line trajectory.
std::pair<Vec, ProblemParams> feasible_pair(const Task& task) {
  ProblemParams y;
  y.goal = {0.6, 0.0};
  y.obstacles.resize(task.num_obstacles());
  for (int i = 0; i < task.num_obstacles(); ++i) {
    y.obstacles[i].center = {-0.5 - 0.1 * i, 0.8};
    y.obstacles[i].radius = 0.06;
  }
  Vec x = Vec::Zero(task.decision_dim());
  x[0] = 1.2;
  const double dt = x[0] / task.timesteps;
  for (int s = 0; s < task.timesteps; ++s) {
    x[1 + 2 * s] = y.goal.x() / (dt * task.timesteps);
    x[1 + 2 * s + 1] = 0.0;
  }
  return {x, y};
}

}  // namespace

TEST_CASE("diffusion_loss: perfect predictor scores zero") {
  const TrajectoryDataset ds = toy_dataset(3, 4, 1);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  const TrainingBatch batch = make_batch(ds, 10, sched.K, 0.2, false, 0, 3);
  const double loss = diffusion_loss_with(
      [&](long i, const Vec&, int, const Vec*) {
        return Vec(batch.eps.row(i).transpose());
      },
      batch, sched);
  CHECK(loss == 0.0);
}

TEST_CASE("diffusion_loss: zero predictor scores about n") {
  const TrajectoryDataset ds = toy_dataset(4, 8, 2);
  const int n = ds.task.decision_dim();
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  const TrainingBatch batch = make_batch(ds, 512, sched.K, 0.0, false, 0, 5);
  const double loss = diffusion_loss_with(
      [&](long, const Vec& xk, int, const Vec*) {
        return Vec(Vec::Zero(xk.size()));
      },
      batch, sched);
  // per-sample ||eps||^2 has mean n and variance 2n
  const double tol = 4.0 * std::sqrt(2.0 * n / 512.0);
  CHECK(loss == Approx(n).margin(tol));
}

TEST_CASE("diffusion_loss: p_uncond = 0 never hits the unconditional branch") {
  const TrajectoryDataset ds = toy_dataset(3, 4, 1);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  const TrainingBatch batch = make_batch(ds, 32, sched.K, 0.0, false, 0, 7);
  long uncond_calls = 0, cond_calls = 0;
  diffusion_loss_with(
      [&](long, const Vec& xk, int, const Vec* y) {
        (y == nullptr ? uncond_calls : cond_calls)++;
        return Vec(Vec::Zero(xk.size()));
      },
      batch, sched);
  CHECK(uncond_calls == 0);
  CHECK(cond_calls == 32);
}

TEST_CASE("violation_loss: prediction landing on a feasible solution is zero") {
  const Task task = toy_task();
  const NormalizationStats stats = NormalizationStats::from_task(task);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  auto [x_phys, yp] = feasible_pair(task);
  REQUIRE(violation(x_phys, yp, task).total == 0.0);
  const Vec x_target = stats.normalize_x(x_phys);
  const Vec y = stats.normalize_y(yp.to_vector(task));
  Rng rng(4);
  const Vec x0 = rng.normal_vec(task.decision_dim()).cwiseMin(1.0).cwiseMax(-1.0);
  const Vec eps = rng.normal_vec(task.decision_dim());
  const int k = 5;
  // eps_hat chosen so reverse_step(x_k, k, eps_hat, 0) = x_target:
  // eps_hat = (x_k - sqrt(alpha_k) x_target) sqrt(1 - abar_k) / beta_k
  const Vec xk = forward_sample(x0, k, eps, sched);
  const Vec eps_hat = (xk - std::sqrt(sched.alpha_at(k)) * x_target) *
                      (std::sqrt(1.0 - sched.alpha_bar_at(k)) / sched.beta_at(k));
  const double loss = violation_loss_with(
      [&](const Vec&, int, const Vec*) { return eps_hat; }, x0, y, k, eps,
      Vec::Zero(task.decision_dim()), sched, task, stats);
  CHECK(loss == Approx(0.0).margin(1e-9));
}

TEST_CASE("violation_loss: doubling obstacle radii weakly increases the loss") {
  const Task task = toy_task();
  const NormalizationStats stats = NormalizationStats::from_task(task);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    ProblemParams yp = sample_problem(task, rng);
    const Vec y1 = stats.normalize_y(yp.to_vector(task));
    ProblemParams yp2 = yp;
    for (auto& ob : yp2.obstacles) ob.radius *= 2.0;
    const Vec y2 = stats.normalize_y(yp2.to_vector(task));
    const Vec x0 = rng.normal_vec(task.decision_dim()).cwiseMin(1.0).cwiseMax(-1.0);
    const Vec eps = rng.normal_vec(task.decision_dim());
    const Vec fixed_pred = rng.normal_vec(task.decision_dim());
    auto predict = [&](const Vec&, int, const Vec*) { return fixed_pred; };
    const int k = 1 + static_cast<int>(rng.uniform_int(sched.K));
    const Vec z = Vec::Zero(task.decision_dim());
    const double v1 =
        violation_loss_with(predict, x0, y1, k, eps, z, sched, task, stats);
    const double v2 =
        violation_loss_with(predict, x0, y2, k, eps, z, sched, task, stats);
    CHECK(v2 >= v1 - 1e-12);
  }
}

TEST_CASE("gt_violation_mean: noiseless at k = 1, non-negative everywhere") {
  const Task task = toy_task();
  const NormalizationStats stats = NormalizationStats::from_task(task);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  auto [x_phys, yp] = feasible_pair(task);
  const Vec x0 = stats.normalize_x(x_phys);
  const Vec y = stats.normalize_y(yp.to_vector(task));
  Rng rng(3);
  CHECK(gt_violation_mean(x0, y, 1, 5, sched, task, stats, rng) ==
        Approx(0.0).margin(1e-12));

  Rng rng2(4);
  double mu_first = -1.0, mu_last = -1.0;
  for (int k = 1; k <= sched.K; ++k) {
    const double mu = gt_violation_mean(x0, y, k, 16, sched, task, stats, rng2);
    CHECK(mu >= 0.0);
    if (k == 1) mu_first = mu;
    if (k == sched.K) mu_last = mu;
  }
  CHECK(mu_last > mu_first);  // noisier steps violate more on feasible data
}

TEST_CASE("hybrid_loss: lambda 0 equals the diffusion loss bit-for-bit") {
  const TrajectoryDataset ds = toy_dataset(3, 6, 9);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  const Denoiser d = Denoiser::init(toy_net(ds.task), 5);
  const TrainingBatch batch = make_batch(ds, 12, sched.K, 0.3, true, 3, 21);
  TrainConfig cfg;
  cfg.lambda = 0.0;
  cfg.constraint_aware = true;
  const HybridLossValue h = hybrid_loss(d, batch, cfg, sched, ds.task, ds.stats);
  CHECK(h.total == diffusion_loss(d, batch, sched, ds.task, ds.stats));
  CHECK(h.vio_norm == 0.0);
}

TEST_CASE("hybrid_loss: floor clamps the normalizer, penalty is non-negative") {
  const Task task = toy_task();
  const NormalizationStats stats = NormalizationStats::from_task(task);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  auto [x_phys, yp] = feasible_pair(task);

  TrajectoryDataset ds;
  ds.task = task;
  ds.stats = stats;
  ds.y.resize(1, task.condition_dim());
  ds.x.resize(1, task.decision_dim());
  ds.y.row(0) = stats.normalize_y(yp.to_vector(task)).cast<float>().transpose();
  ds.x.row(0) = stats.normalize_x(x_phys).cast<float>().transpose();
  ds.problem_index = {0};

  TrainingBatch batch = make_batch(ds, 1, 1, 0.0, true, 4, 2);
  batch.k[0] = 1;  // mu = V(x0) = 0 < mu_floor
  batch.z[0].setZero();
  const Denoiser d = Denoiser::init(toy_net(task), 8);
  TrainConfig cfg;
  cfg.lambda = 0.5;
  cfg.mu_floor = 1e-3;
  const HybridLossValue h = hybrid_loss(d, batch, cfg, sched, task, stats);

  const double v = violation_loss(d, ds.x_row(0), ds.y_row(0), 1,
                                  batch.eps.row(0).transpose(),
                                  Vec::Zero(task.decision_dim()), sched, task,
                                  stats);
  CHECK(h.vio_norm == Approx(v / cfg.mu_floor));
  CHECK(h.total >= h.diff);
}

TEST_CASE("hybrid_loss and violation_loss gradients match finite differences") {
  const TrajectoryDataset ds = toy_dataset(3, 5, 31);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  Denoiser d = Denoiser::init(toy_net(ds.task), 17);
  TrainConfig cfg;
  cfg.lambda = 0.7;
  cfg.n_gt = 3;
  const TrainingBatch batch = make_batch(ds, 6, sched.K, 0.2, true, cfg.n_gt, 8);

  SECTION("hybrid loss") {
    Vec grad = Vec::Zero(d.param_count());
    hybrid_loss(d, batch, cfg, sched, ds.task, ds.stats, &grad);
    const double h = 1e-5;
    double worst = 0.0;
    for (long i = 0; i < d.param_count(); ++i) {
      const double orig = d.params()[i];
      d.params()[i] = orig + h;
      const double fp =
          hybrid_loss(d, batch, cfg, sched, ds.task, ds.stats).total;
      d.params()[i] = orig - h;
      const double fm =
          hybrid_loss(d, batch, cfg, sched, ds.task, ds.stats).total;
      d.params()[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-5});
      worst = std::max(worst, std::abs(fd - grad[i]) / denom);
    }
    CHECK(worst < 1e-3);
  }

  SECTION("violation loss alone") {
    const Vec x0 = batch.x0.row(0).transpose();
    const Vec y = batch.y.row(0).transpose();
    const Vec eps = batch.eps.row(0).transpose();
    const Vec z = batch.z[0].row(0).transpose();
    const int k = batch.k[0];
    Vec grad = Vec::Zero(d.param_count());
    violation_loss_grad(d, x0, y, k, eps, z, sched, ds.task, ds.stats, grad);
    const double h = 1e-5;
    double worst = 0.0;
    for (long i = 0; i < d.param_count(); ++i) {
      const double orig = d.params()[i];
      d.params()[i] = orig + h;
      const double fp =
          violation_loss(d, x0, y, k, eps, z, sched, ds.task, ds.stats);
      d.params()[i] = orig - h;
      const double fm =
          violation_loss(d, x0, y, k, eps, z, sched, ds.task, ds.stats);
      d.params()[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-5});
      worst = std::max(worst, std::abs(fd - grad[i]) / denom);
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("train: smoke run, log structure, loss decreases") {
  const TrajectoryDataset ds = toy_dataset(8, 8, 77);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.K = 8;
  cfg.learning_rate = 5e-3;
  cfg.lambda = 0.05;
  cfg.n_gt = 2;
  cfg.seed = 5;
  const TrainResult two = train(ds, Denoiser::init(toy_net(ds.task), 1), cfg);
  REQUIRE(two.log.size() == 2);
  CHECK(two.log[0].epoch == 1);
  CHECK(two.log[1].epoch == 2);
  CHECK(two.log[1].step == 8);  // 64 pairs / batch 16, two epochs

  // per-epoch estimates are noisy, so judge progress on one fixed batch
  const NoiseSchedule sched = make_schedule(cfg.K, cfg.beta_start, cfg.beta_end);
  const TrainingBatch probe = make_batch(ds, 64, cfg.K, 0.0, false, 0, 123);
  const Denoiser before = Denoiser::init(toy_net(ds.task), 1);
  cfg.epochs = 30;
  const TrainResult longer = train(ds, Denoiser::init(toy_net(ds.task), 1), cfg);
  CHECK(diffusion_loss(longer.denoiser, probe, sched, ds.task, ds.stats) <
        diffusion_loss(before, probe, sched, ds.task, ds.stats));
}

TEST_CASE("train: deterministic and lambda-0-equivalent to unconstrained") {
  const TrajectoryDataset ds = toy_dataset(4, 4, 13);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.K = 8;
  cfg.seed = 9;
  cfg.lambda = 0.0;
  cfg.constraint_aware = true;

  const TrainResult a = train(ds, Denoiser::init(toy_net(ds.task), 2), cfg);
  const TrainResult b = train(ds, Denoiser::init(toy_net(ds.task), 2), cfg);
  CHECK(a.denoiser.params() == b.denoiser.params());

  TrainConfig uc = cfg;
  uc.constraint_aware = false;
  const TrainResult c = train(ds, Denoiser::init(toy_net(ds.task), 2), uc);
  CHECK(a.denoiser.params() == c.denoiser.params());
}

TEST_CASE("train: unconstrained path never evaluates the violation") {
  const TrajectoryDataset ds = toy_dataset(3, 4, 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.K = 8;
  cfg.constraint_aware = false;
  cfg.lambda = 0.3;

  EvalCounters::reset();
  train(ds, Denoiser::init(toy_net(ds.task), 3), cfg);
  CHECK(EvalCounters::violations() == 0);
  CHECK(EvalCounters::gradients() == 0);

  cfg.constraint_aware = true;
  EvalCounters::reset();
  train(ds, Denoiser::init(toy_net(ds.task), 3), cfg);
  CHECK(EvalCounters::violations() > 0);
  CHECK(EvalCounters::gradients() > 0);
}

TEST_CASE("train: non-finite loss aborts with location info") {
  const TrajectoryDataset ds = toy_dataset(3, 4, 5);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.K = 8;
  cfg.learning_rate = 1e308;  // guaranteed blow-up after the first step
  cfg.constraint_aware = false;
  CHECK_THROWS_MATCHES(train(ds, Denoiser::init(toy_net(ds.task), 3), cfg),
                       Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == Errc::non_finite_loss &&
                                std::string(e.what()).find("epoch") !=
                                    std::string::npos;
                       }));
}

TEST_CASE("violation gradient direction is invariant to the normalizer") {
  const TrajectoryDataset ds = toy_dataset(2, 3, 41);
  const NoiseSchedule sched = make_schedule(8, 1e-3, 0.1);
  const Denoiser d = Denoiser::init(toy_net(ds.task), 11);
  Rng rng(6);
  const Vec x0 = ds.x_row(0);
  const Vec y = ds.y_row(0);
  const Vec eps = rng.normal_vec(ds.task.decision_dim());
  const Vec z = rng.normal_vec(ds.task.decision_dim());

  Vec g = Vec::Zero(d.param_count());
  violation_loss_grad(d, x0, y, 4, eps, z, sched, ds.task, ds.stats, g);
  // the hybrid term scales this gradient by lambda / max(mu, floor); verify
  // pure scaling by comparing two manual scalings
  const Vec g1 = g / 0.7;
  const Vec g2 = g / 0.001;
  const double cosine = g1.dot(g2) / (g1.norm() * g2.norm());
  CHECK(cosine == Approx(1.0).margin(1e-12));
}
