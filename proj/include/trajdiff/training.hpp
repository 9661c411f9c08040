#pragma once

// Training losses and loop: the diffusion noise-matching loss, the violation
// loss evaluated through a one-step reverse prediction, the ground-truth
// violation normalizer, and the hybrid objective combining them.

#include <filesystem>
#include <optional>
#include <vector>

#include "trajdiff/common.hpp"
#include "trajdiff/dataset.hpp"
#include "trajdiff/denoiser.hpp"
#include "trajdiff/diffusion.hpp"
#include "trajdiff/problems.hpp"

namespace trajdiff {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double p_uncond = 0.1;  // condition-dropout probability
  double lambda = 0.01;   // violation weight
  int n_gt = 10;          // draws for the ground-truth violation mean
  int n_vio_z = 1;        // z draws averaged inside the violation loss
  double mu_floor = 1e-3;
  bool constraint_aware = true;
  // Implements the printed Eq.-6 indices instead of the forward-marginal
  // reading (mean index k, std index k-1); off by default.
  bool gt_marginal_literal = false;
  std::uint64_t seed = 0;
  int K = 64;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only

  void validate() const {
    require(epochs >= 1 && batch_size >= 1 && K >= 1, Errc::invalid_argument,
            "train sizes");
    require(p_uncond >= 0.0 && p_uncond < 1.0, Errc::invalid_argument,
            "p_uncond in [0, 1)");
    require(lambda >= 0.0, Errc::invalid_argument, "lambda must be >= 0");
    require(n_gt >= 1, Errc::invalid_argument, "n_gt must be >= 1");
    require(n_vio_z >= 1, Errc::invalid_argument, "n_vio_z must be >= 1");
    require(mu_floor > 0.0, Errc::invalid_argument, "mu_floor must be > 0");
    require(learning_rate > 0.0, Errc::invalid_argument, "learning rate");
  }

  std::string digest_string() const {
    return std::to_string(epochs) + "," + std::to_string(batch_size) + "," +
           std::to_string(learning_rate) + "," + std::to_string(p_uncond) +
           "," + std::to_string(lambda) + "," + std::to_string(n_gt) + "," +
           std::to_string(mu_floor) + "," + std::to_string(n_vio_z) + "," +
           std::to_string(constraint_aware) + "," + std::to_string(seed) +
           "," + std::to_string(K);
  }
};

// One batch of training draws. Everything random is drawn up front so the
// computation itself can run on any number of threads.
struct TrainingBatch {
  Mat x0;   // B x n, normalized
  Mat y;    // B x k_y, normalized
  std::vector<int> k;
  Mat eps;  // B x n
  std::vector<char> uncond;  // b draws
  // violation-path draws; empty when the violation term is off
  std::vector<Mat> z;         // per sample, n_vio_z x n (one row when k = 1)
  std::vector<Mat> mu_noise;  // per sample, n_gt x n

  long size() const { return x0.rows(); }
};

// ---------------------------------------------------------------------------
// Loss cores, templated over an indexed predictor so tests can substitute
// oracles: predict(i, x_k, k, y_or_null) -> Vec.

template <typename F>
double diffusion_loss_with(F&& predict, const TrainingBatch& batch,
                           const NoiseSchedule& sched) {
  double total = 0.0;
  for (long i = 0; i < batch.size(); ++i) {
    const Vec x0 = batch.x0.row(i).transpose();
    const Vec eps = batch.eps.row(i).transpose();
    const Vec xk = forward_sample(x0, batch.k[i], eps, sched);
    const Vec y = batch.y.row(i).transpose();
    const Vec* cond = batch.uncond[i] ? nullptr : &y;
    const Vec pred = predict(i, xk, batch.k[i], cond);
    total += (pred - eps).squaredNorm();
  }
  return total / static_cast<double>(batch.size());
}


// V of the clipped one-step reverse prediction, in physical coordinates.
template <typename F>
double violation_loss_with(F&& predict, const Vec& x0, const Vec& y, int k,
                           const Vec& eps, const Vec& z,
                           const NoiseSchedule& sched, const Task& task,
                           const NormalizationStats& stats) {
  const Vec xk = forward_sample(x0, k, eps, sched);
  const Vec pred = predict(xk, k, &y);
  const Vec x_tilde = clip(reverse_step(xk, k, pred, z, sched), -1.0, 1.0);
  const Vec x_phys = stats.denormalize_x(x_tilde);
  const ProblemParams yp =
      ProblemParams::from_vector(task, stats.denormalize_y(y));
  return violation(x_phys, yp, task).total;
}

inline double violation_loss(const Denoiser& d, const Vec& x0, const Vec& y,
                             int k, const Vec& eps, const Vec& z,
                             const NoiseSchedule& sched, const Task& task,
                             const NormalizationStats& stats) {
  return violation_loss_with(
      [&](const Vec& xk, int kk, const Vec* yy) {
        return d.predict(xk, kk, yy);
      },
      x0, y, k, eps, z, sched, task, stats);
}

// Average V over draws from the forward-process marginal at step k-1
// (alpha_bar_0 := 1, so k = 1 evaluates V(x0) exactly). No gradient flows
// through this value.
inline double gt_violation_mean_with_noise(
    const Vec& x0, const Vec& y, int k, const std::vector<Vec>& noise,
    const NoiseSchedule& sched, const Task& task,
    const NormalizationStats& stats, bool literal_marginal) {
  sched.check_step(k);
  const double ab_prev = sched.alpha_bar_before(k);
  const double mean_scale =
      literal_marginal ? std::sqrt(sched.alpha_bar_at(k)) : std::sqrt(ab_prev);
  const double noise_scale = std::sqrt(1.0 - ab_prev);
  const ProblemParams yp =
      ProblemParams::from_vector(task, stats.denormalize_y(y));
  double total = 0.0;
  for (const Vec& eps : noise) {
    const Vec xk1 = clip(mean_scale * x0 + noise_scale * eps, -1.0, 1.0);
    total += violation(stats.denormalize_x(xk1), yp, task).total;
  }
  return total / static_cast<double>(noise.size());
}

inline double gt_violation_mean(const Vec& x0, const Vec& y, int k, int n_gt,
                                const NoiseSchedule& sched, const Task& task,
                                const NormalizationStats& stats, Rng& rng,
                                bool literal_marginal = false) {
  require(n_gt >= 1, Errc::invalid_argument, "n_gt");
  std::vector<Vec> noise(n_gt);
  for (auto& v : noise) v = rng.normal_vec(x0.size());
  return gt_violation_mean_with_noise(x0, y, k, noise, sched, task, stats,
                                      literal_marginal);
}

namespace detail {

// Per-sample contribution of the hybrid loss with gradient accumulation.
// Shares one denoiser forward between the diffusion and violation terms.
struct SampleTerms {
  double diff = 0.0;
  double vio_norm = 0.0;
  bool has_vio = false;
};

inline SampleTerms hybrid_sample(const Denoiser& d, const TrainingBatch& batch,
                                 long i, const TrainConfig& cfg,
                                 const NoiseSchedule& sched, const Task& task,
                                 const NormalizationStats& stats,
                                 double inv_batch, double inv_cond,
                                 DenoiserCache& cache, Vec* grad) {
  SampleTerms out;
  const Vec x0 = batch.x0.row(i).transpose();
  const Vec eps = batch.eps.row(i).transpose();
  const int k = batch.k[i];
  const Vec xk = forward_sample(x0, k, eps, sched);
  const Vec y = batch.y.row(i).transpose();
  const Vec* cond = batch.uncond[i] ? nullptr : &y;

  const Vec pred = d.forward(xk, k, cond, cache);
  const Vec resid = pred - eps;
  out.diff = resid.squaredNorm();
  Vec d_eps = grad ? (2.0 * inv_batch) * resid : Vec();

  const bool vio_active =
      cfg.constraint_aware && cfg.lambda != 0.0 && cond != nullptr;
  if (vio_active) {
    const ProblemParams yp =
        ProblemParams::from_vector(task, stats.denormalize_y(y));
    const Mat& zs = batch.z[i];
    const double inv_z = 1.0 / static_cast<double>(zs.rows());
    double v_mean = 0.0;
    Vec dv_mean = grad ? Vec(Vec::Zero(x0.size())) : Vec();
    for (long r = 0; r < zs.rows(); ++r) {
      const Vec x_pre = reverse_step(xk, k, pred, zs.row(r).transpose(), sched);
      const Vec x_tilde = clip(x_pre, -1.0, 1.0);
      const Vec x_phys = stats.denormalize_x(x_tilde);
      v_mean += violation(x_phys, yp, task).total * inv_z;
      if (grad) {
        Vec dv = violation_gradient(x_phys, yp, task);
        dv.array() *= 0.5 * (stats.x_hi - stats.x_lo).array();  // d phys / d norm
        for (Eigen::Index j = 0; j < dv.size(); ++j)
          if (x_pre[j] < -1.0 || x_pre[j] > 1.0) dv[j] = 0.0;  // clip gate
        dv_mean += inv_z * dv;
      }
    }

    std::vector<Vec> noise;
    noise.reserve(batch.mu_noise[i].rows());
    for (long r = 0; r < batch.mu_noise[i].rows(); ++r)
      noise.push_back(batch.mu_noise[i].row(r).transpose());
    const double mu = gt_violation_mean_with_noise(
        x0, y, k, noise, sched, task, stats, cfg.gt_marginal_literal);
    const double denom = std::max(mu, cfg.mu_floor);
    out.vio_norm = v_mean / denom;
    out.has_vio = true;

    if (grad) {
      const double coef = reverse_step_noise_coef(k, sched);
      d_eps += (cfg.lambda * inv_cond / denom) * coef * dv_mean;
    }
  }
  if (grad) d.backward(cache, d_eps, *grad);
  return out;
}

}  // namespace detail

struct HybridLossValue {
  double diff = 0.0;
  double vio_norm = 0.0;  // mean of V / max(mu, floor) over conditioned samples
  double total = 0.0;
};

// Hybrid objective over one batch; accumulates parameter gradients when
// grad is non-null. Deterministic: work is chunked by sample index and
// chunk results are reduced in order.
inline HybridLossValue hybrid_loss(const Denoiser& d,
                                   const TrainingBatch& batch,
                                   const TrainConfig& cfg,
                                   const NoiseSchedule& sched, const Task& task,
                                   const NormalizationStats& stats,
                                   Vec* grad = nullptr) {
  const long B = batch.size();
  long n_cond = 0;
  if (cfg.constraint_aware && cfg.lambda != 0.0) {
    require(static_cast<long>(batch.z.size()) == B &&
                static_cast<long>(batch.mu_noise.size()) == B,
            Errc::shape_mismatch, "violation draws missing from batch");
    for (long i = 0; i < B; ++i)
      if (!batch.uncond[i]) n_cond++;
  }
  const double inv_batch = 1.0 / static_cast<double>(B);
  const double inv_cond = n_cond > 0 ? 1.0 / static_cast<double>(n_cond) : 0.0;

  const long chunk = 16;
  const long n_chunks = (B + chunk - 1) / chunk;
  std::vector<double> diff_sum(n_chunks, 0.0), vio_sum(n_chunks, 0.0);
  std::vector<Vec> grads;
  if (grad) grads.assign(n_chunks, Vec());

  parallel_chunks(B, chunk, [&](std::int64_t b, std::int64_t e) {
    const long c = b / chunk;
    DenoiserCache cache;
    Vec* gslot = nullptr;
    if (grad) {
      grads[c] = Vec::Zero(d.param_count());
      gslot = &grads[c];
    }
    for (std::int64_t i = b; i < e; ++i) {
      const auto terms = detail::hybrid_sample(d, batch, i, cfg, sched, task,
                                               stats, inv_batch, inv_cond,
                                               cache, gslot);
      diff_sum[c] += terms.diff;
      if (terms.has_vio) vio_sum[c] += terms.vio_norm;
    }
  });

  HybridLossValue out;
  for (long c = 0; c < n_chunks; ++c) {
    out.diff += diff_sum[c];
    out.vio_norm += vio_sum[c];
  }
  if (grad)
    for (long c = 0; c < n_chunks; ++c) *grad += grads[c];
  out.diff *= inv_batch;
  out.vio_norm = n_cond > 0 ? out.vio_norm * inv_cond : 0.0;
  out.total = out.diff + cfg.lambda * out.vio_norm;
  return out;
}

inline double diffusion_loss(const Denoiser& d, const TrainingBatch& batch,
                             const NoiseSchedule& sched,
                             const Task& task,
                             const NormalizationStats& stats) {
  TrainConfig off;
  off.constraint_aware = false;
  off.lambda = 0.0;
  return hybrid_loss(d, batch, off, sched, task, stats).diff;
}

// Per-sample violation loss with parameter-gradient accumulation; the
// standalone counterpart of the violation term inside hybrid_loss.
inline double violation_loss_grad(const Denoiser& d, const Vec& x0,
                                  const Vec& y, int k, const Vec& eps,
                                  const Vec& z, const NoiseSchedule& sched,
                                  const Task& task,
                                  const NormalizationStats& stats, Vec& grad) {
  DenoiserCache cache;
  const Vec xk = forward_sample(x0, k, eps, sched);
  const Vec pred = d.forward(xk, k, &y, cache);
  const Vec x_pre = reverse_step(xk, k, pred, z, sched);
  const Vec x_tilde = clip(x_pre, -1.0, 1.0);
  const Vec x_phys = stats.denormalize_x(x_tilde);
  const ProblemParams yp =
      ProblemParams::from_vector(task, stats.denormalize_y(y));
  const double v = violation(x_phys, yp, task).total;
  Vec dv = violation_gradient(x_phys, yp, task);
  dv.array() *= 0.5 * (stats.x_hi - stats.x_lo).array();
  for (Eigen::Index j = 0; j < dv.size(); ++j)
    if (x_pre[j] < -1.0 || x_pre[j] > 1.0) dv[j] = 0.0;
  const Vec d_eps = reverse_step_noise_coef(k, sched) * dv;
  d.backward(cache, d_eps, grad);
  return v;
}

// ---------------------------------------------------------------------------
// Adam

struct Adam {
  Vec m, v;
  long t = 0;

  explicit Adam(long n) : m(Vec::Zero(n)), v(Vec::Zero(n)) {}

  void step(Vec& params, const Vec& grad, const TrainConfig& cfg) {
    ++t;
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
    v = cfg.adam_beta2 * v.array().matrix() +
        (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    params.array() -= cfg.learning_rate * (m.array() / bc1) /
                      ((v.array() / bc2).sqrt() + cfg.adam_eps);
  }
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
  int epoch = 0;
  long step = 0;  // cumulative batches
  double l_diff = 0.0;
  double l_vio_norm = 0.0;
  double total = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  Denoiser denoiser;
  std::vector<TrainLogRow> log;
};

inline void write_loss_log(const std::vector<TrainLogRow>& log,
                           const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Errc::io_error, "cannot open " + path.string());
  out << "epoch,step,L_diff,L_vio_norm,total,wall_seconds\n";
  for (const auto& r : log)
    out << r.epoch << "," << r.step << "," << r.l_diff << "," << r.l_vio_norm
        << "," << r.total << "," << r.wall_seconds << "\n";
}

inline Denoiser make_denoiser_for(const TrajectoryDataset& ds, bool desk,
                                  std::uint64_t seed) {
  return Denoiser::init(DenoiserConfig::for_task(ds.task, desk), seed);
}

// Deterministic given (dataset, config, initial denoiser). The violation
// branch draws from its own per-batch stream, so constraint-aware training
// with lambda = 0 consumes exactly the unconstrained draw sequence.
inline TrainResult train(
    const TrajectoryDataset& ds, Denoiser denoiser, const TrainConfig& cfg,
    const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  cfg.validate();
  require(ds.size() >= 1, Errc::empty_dataset, "train");
  ensure_compatible(denoiser.config(), ds.task);
  const NoiseSchedule sched = make_schedule(cfg.K, cfg.beta_start, cfg.beta_end);
  const Task& task = ds.task;
  const int n = task.decision_dim();
  const int ky = task.condition_dim();
  const bool vio_on = cfg.constraint_aware && cfg.lambda != 0.0;

  if (out_dir) std::filesystem::create_directories(*out_dir);
  json prov{{"seed", cfg.seed},
            {"epochs", cfg.epochs},
            {"lambda", cfg.lambda},
            {"constraint_aware", cfg.constraint_aware},
            {"p_uncond", cfg.p_uncond},
            {"K", cfg.K},
            {"beta_start", cfg.beta_start},
            {"beta_end", cfg.beta_end},
            {"task", task_name(task.kind)},
            {"n_pairs", ds.size()},
            {"config_digest", std::to_string(fnv1a(cfg.digest_string()))}};

  Adam adam(denoiser.param_count());
  Rng rng(cfg.seed);
  std::vector<long> order(ds.size());
  for (long i = 0; i < ds.size(); ++i) order[i] = i;

  TrainResult result{std::move(denoiser), {}};
  const auto t0 = std::chrono::steady_clock::now();
  long step = 0;
  Vec grad(result.denoiser.param_count());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (long i = ds.size() - 1; i > 0; --i)
      std::swap(order[i],
                order[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);

    double ep_diff = 0.0, ep_vio = 0.0, ep_total = 0.0;
    long ep_samples = 0;
    for (long begin = 0; begin < ds.size(); begin += cfg.batch_size) {
      const long B = std::min<long>(cfg.batch_size, ds.size() - begin);
      TrainingBatch batch;
      batch.x0.resize(B, n);
      batch.y.resize(B, ky);
      batch.eps.resize(B, n);
      batch.k.resize(B);
      batch.uncond.resize(B);
      for (long i = 0; i < B; ++i) {
        const long r = order[begin + i];
        batch.x0.row(i) = ds.x.row(r).cast<double>();
        batch.y.row(i) = ds.y.row(r).cast<double>();
        batch.k[i] = 1 + static_cast<int>(rng.uniform_int(cfg.K));
        batch.eps.row(i) = rng.normal_vec(n).transpose();
        batch.uncond[i] = cfg.p_uncond > 0.0 && rng.uniform01() < cfg.p_uncond;
      }
      if (vio_on) {
        Rng vio_rng(fnv1a(std::to_string(cfg.seed) + ":" +
                          std::to_string(epoch) + ":" + std::to_string(step)));
        batch.z.resize(B);
        batch.mu_noise.resize(B);
        for (long i = 0; i < B; ++i) {
          if (batch.uncond[i]) continue;
          // z = 0 forced at k = 1, so one draw suffices there
          const int nz = batch.k[i] > 1 ? cfg.n_vio_z : 1;
          batch.z[i].setZero(nz, n);
          if (batch.k[i] > 1)
            for (int r = 0; r < nz; ++r)
              batch.z[i].row(r) = vio_rng.normal_vec(n).transpose();
          batch.mu_noise[i].resize(cfg.n_gt, n);
          for (int g = 0; g < cfg.n_gt; ++g)
            batch.mu_noise[i].row(g) = vio_rng.normal_vec(n).transpose();
        }
      }

      grad.setZero();
      const HybridLossValue loss = hybrid_loss(
          result.denoiser, batch, cfg, sched, task, ds.stats, &grad);
      if (!std::isfinite(loss.total))
        throw Error(Errc::non_finite_loss,
                    "epoch " + std::to_string(epoch) + " batch " +
                        std::to_string(begin / cfg.batch_size));
      adam.step(result.denoiser.params(), grad, cfg);
      ++step;
      ep_diff += loss.diff * B;
      ep_vio += loss.vio_norm * B;
      ep_total += loss.total * B;
      ep_samples += B;
    }

    TrainLogRow row;
    row.epoch = epoch;
    row.step = step;
    row.l_diff = ep_diff / ep_samples;
    row.l_vio_norm = ep_vio / ep_samples;
    row.total = ep_total / ep_samples;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.log.push_back(row);

    if (out_dir && cfg.checkpoint_every > 0 &&
        epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04d", epoch);
      prov["epoch"] = epoch;
      save_checkpoint(result.denoiser, *out_dir / name, prov);
    }
  }

  if (out_dir) {
    prov["epoch"] = cfg.epochs;
    save_checkpoint(result.denoiser, *out_dir / "ckpt_final", prov);
    write_loss_log(result.log, *out_dir / "loss_log.csv");
  }
  return result;
}

}  // namespace trajdiff
