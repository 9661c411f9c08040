#pragma once

// DDPM machinery: noise schedule, closed-form forward corruption, guided
// reverse sampling, and the one-step reverse prediction used by the
// violation loss. Step indices k are 1-based, 1 <= k <= K.

#include <optional>

#include "trajdiff/common.hpp"

namespace trajdiff {

struct NoiseSchedule {
  int K = 0;
  Vec beta;       // beta_k, strictly increasing in (0, 1)
  Vec alpha;      // 1 - beta_k
  Vec alpha_bar;  // prod_{i<=k} alpha_i, strictly decreasing
  Vec sigma;      // sigma_k = sqrt(beta_k)

  double beta_at(int k) const { return beta[k - 1]; }
  double alpha_at(int k) const { return alpha[k - 1]; }
  double alpha_bar_at(int k) const { return alpha_bar[k - 1]; }
  // alpha_bar_0 := 1 (zero accumulated noise before the first step)
  double alpha_bar_before(int k) const {
    return k <= 1 ? 1.0 : alpha_bar[k - 2];
  }
  double sigma_at(int k) const { return sigma[k - 1]; }

  void check_step(int k) const {
    require(k >= 1 && k <= K, Errc::invalid_argument,
            "step index " + std::to_string(k) + " outside [1, " +
                std::to_string(K) + "]");
  }
};

// Linear beta interpolation over K steps.
inline NoiseSchedule make_schedule(int K, double beta_start, double beta_end) {
  require(K >= 1, Errc::invalid_argument, "K must be >= 1");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          Errc::invalid_argument, "need 0 < beta_start <= beta_end < 1");
  require(K == 1 || beta_start < beta_end, Errc::invalid_argument,
          "K > 1 needs beta_start < beta_end for a strictly increasing schedule");
  NoiseSchedule s;
  s.K = K;
  s.beta.resize(K);
  for (int k = 0; k < K; ++k)
    s.beta[k] = K == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * k / (K - 1);
  s.alpha = (1.0 - s.beta.array()).matrix();
  s.alpha_bar.resize(K);
  double prod = 1.0;
  for (int k = 0; k < K; ++k) {
    prod *= s.alpha[k];
    s.alpha_bar[k] = prod;
  }
  s.sigma = s.beta.cwiseSqrt();
  return s;
}

// Default schedule endpoints; the step count is configuration (paper scale
// 500, desk scale 64).
constexpr double kDefaultBetaStart = 1e-4;
constexpr double kDefaultBetaEnd = 0.02;

// x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps
inline Vec forward_sample(const Vec& x0, int k, const Vec& eps,
                          const NoiseSchedule& sched) {
  sched.check_step(k);
  require(eps.size() == x0.size(), Errc::dimension_mismatch, "forward_sample");
  const double ab = sched.alpha_bar_at(k);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

// Classifier-free guidance: (w + 1) eps_cond - w eps_uncond.
inline Vec guided_noise(const Vec& eps_cond, const Vec& eps_uncond,
                        double omega) {
  require(eps_cond.size() == eps_uncond.size(), Errc::dimension_mismatch,
          "guided_noise");
  return (omega + 1.0) * eps_cond - omega * eps_uncond;
}

// x_{k-1} = (x_k - beta_k / sqrt(1 - abar_k) eps_hat) / sqrt(alpha_k) + sigma_k z
inline Vec reverse_step(const Vec& x_k, int k, const Vec& eps_hat, const Vec& z,
                        const NoiseSchedule& sched) {
  sched.check_step(k);
  require(eps_hat.size() == x_k.size() && z.size() == x_k.size(),
          Errc::dimension_mismatch, "reverse_step");
  const double ab = sched.alpha_bar_at(k);
  const double coef = sched.beta_at(k) / std::sqrt(1.0 - ab);
  return (x_k - coef * eps_hat) / std::sqrt(sched.alpha_at(k)) +
         sched.sigma_at(k) * z;
}

// d x_{k-1} / d eps_hat, a scalar since the map is diagonal.
inline double reverse_step_noise_coef(int k, const NoiseSchedule& sched) {
  sched.check_step(k);
  return -sched.beta_at(k) /
         (std::sqrt(1.0 - sched.alpha_bar_at(k)) *
          std::sqrt(sched.alpha_at(k)));
}

// Denoiser concept: predict(x_k, k, y) with y == nullptr for the
// unconditional branch; input_dim() names the decision dimension.
template <typename D>
concept NoisePredictor = requires(const D& d, const Vec& x, int k,
                                  const Vec* y) {
  { d.predict(x, k, y) } -> std::convertible_to<Vec>;
  { d.input_dim() } -> std::convertible_to<int>;
};

// Full reverse chain from x_K ~ N(0, I). Fresh z per step except z = 0 at
// k = 1. With omega == 0 the unconditional branch is never evaluated.
template <NoisePredictor D>
Vec sample(const D& denoiser, const Vec& y, double omega,
           const NoiseSchedule& sched, Rng& rng, bool clip_final = true) {
  Vec x_k = rng.normal_vec(denoiser.input_dim());
  for (int k = sched.K; k >= 1; --k) {
    const Vec eps_cond = denoiser.predict(x_k, k, &y);
    Vec eps_hat;
    if (omega == 0.0) {
      eps_hat = eps_cond;
    } else {
      const Vec eps_uncond = denoiser.predict(x_k, k, nullptr);
      eps_hat = guided_noise(eps_cond, eps_uncond, omega);
    }
    const Vec z =
        k > 1 ? rng.normal_vec(x_k.size()) : Vec(Vec::Zero(x_k.size()));
    x_k = reverse_step(x_k, k, eps_hat, z, sched);
  }
  if (clip_final) x_k = clip(x_k, -1.0, 1.0);
  return x_k;
}

// One-step reverse prediction used by the violation loss: conditional noise
// only, then clip to the normalized range. Gradients pass through the clip
// only where the pre-clip value lies inside [-1, 1].
template <NoisePredictor D>
Vec one_step_predict(const Vec& x_k, int k, const D& denoiser, const Vec* y,
                     const Vec& z, const NoiseSchedule& sched) {
  require(y != nullptr, Errc::null_condition,
          "violation loss requires condition");
  const Vec eps = denoiser.predict(x_k, k, y);
  return clip(reverse_step(x_k, k, eps, z, sched), -1.0, 1.0);
}

}  // namespace trajdiff
