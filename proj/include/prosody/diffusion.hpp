#pragma once

#include "prosody/common.hpp"
#include "prosody/rng.hpp"

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace prosody::diffusion {

// Fixed noise schedule over steps t = 1..T (1-based, matching the usual
// diffusion indexing). alpha_bar uses the empty-product convention
// alpha_bar(0) = 1, which makes the final reverse step deterministic.
template <class S>
struct NoiseSchedule {
  int steps = 0;
  Vec<S> beta;       // beta[t-1] in (0,1)
  Vec<S> alpha;      // 1 - beta
  Vec<S> alpha_bar;  // running product of alpha

  S alpha_at(int t) const {
    check_step(t);
    return alpha[t - 1];
  }
  S alpha_bar_at(int t) const {  // valid for t in [0, T]
    if (t == 0) return S(1);
    check_step(t);
    return alpha_bar[t - 1];
  }
  void check_step(int t) const {
    if (t < 1 || t > steps)
      throw NumericError("diffusion step " + std::to_string(t) +
                         " outside [1, " + std::to_string(steps) + "]");
  }
};

template <class S>
NoiseSchedule<S> linear_beta_schedule(int steps, S beta_start, S beta_end) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  if (!(beta_start >= S(0)) || !(beta_end < S(1)) || beta_start > beta_end)
    throw ConfigError("beta bounds must satisfy 0 <= beta_start <= beta_end < 1");
  NoiseSchedule<S> sched;
  sched.steps = steps;
  sched.beta.resize(steps);
  sched.alpha.resize(steps);
  sched.alpha_bar.resize(steps);
  S acc(1);
  for (int t = 0; t < steps; ++t) {
    S frac = steps == 1 ? S(0) : S(t) / S(steps - 1);
    sched.beta[t] = beta_start + (beta_end - beta_start) * frac;
    sched.alpha[t] = S(1) - sched.beta[t];
    acc *= sched.alpha[t];
    sched.alpha_bar[t] = acc;
  }
  if (!(sched.alpha_bar[steps - 1] > S(0)))
    throw NumericError("schedule destroys all signal (alpha_bar[T] == 0)");
  return sched;
}

// Rebuild derived tables from a stored beta vector (checkpoint load path).
template <class S>
NoiseSchedule<S> schedule_from_beta(const Vec<S>& beta) {
  if (beta.size() < 1) throw DataError("empty beta table");
  NoiseSchedule<S> sched;
  sched.steps = static_cast<int>(beta.size());
  sched.beta = beta;
  sched.alpha.resize(sched.steps);
  sched.alpha_bar.resize(sched.steps);
  S acc(1);
  for (int t = 0; t < sched.steps; ++t) {
    sched.alpha[t] = S(1) - beta[t];
    acc *= sched.alpha[t];
    sched.alpha_bar[t] = acc;
  }
  return sched;
}

// Forward corruption: z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps.
template <class S>
Vec<S> q_sample(const Vec<S>& z0, int t, const Vec<S>& eps,
                const NoiseSchedule<S>& sched) {
  sched.check_step(t);
  if (z0.size() != eps.size())
    throw DataError("q_sample: latent/noise shape mismatch");
  const S ab = sched.alpha_bar_at(t);
  return std::sqrt(ab) * z0 + std::sqrt(S(1) - ab) * eps;
}

// Reverse-process posterior variance
//   (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * (1 - alpha_t),
// zero at t = 1 under the alpha_bar(0) = 1 convention. Returns 0 by
// continuity if the schedule is entirely noiseless at t.
template <class S>
S posterior_variance(int t, const NoiseSchedule<S>& sched) {
  sched.check_step(t);
  const S ab_t = sched.alpha_bar_at(t);
  const S ab_prev = sched.alpha_bar_at(t - 1);
  const S denom = S(1) - ab_t;
  if (denom == S(0)) return S(0);
  return (S(1) - ab_prev) / denom * (S(1) - sched.alpha_at(t));
}

// One ancestral step from z_t to z_{t-1} given the predicted noise.
// The caller passes x = 0 at t = 1; the injected noise scale is the
// square root of the posterior variance.
template <class S>
Vec<S> denoise_step(const Vec<S>& z_t, int t, const Vec<S>& eps_hat,
                    const Vec<S>& x, const NoiseSchedule<S>& sched) {
  sched.check_step(t);
  if (z_t.size() != eps_hat.size() || z_t.size() != x.size())
    throw DataError("denoise_step: shape mismatch");
  const S a = sched.alpha_at(t);
  const S ab = sched.alpha_bar_at(t);
  const S one_minus_ab = S(1) - ab;
  Vec<S> mean;
  if (one_minus_ab == S(0)) {
    mean = z_t;  // noiseless schedule, eps coefficient vanishes with beta = 0
  } else {
    mean = (z_t - ((S(1) - a) / std::sqrt(one_minus_ab)) * eps_hat) /
           std::sqrt(a);
  }
  const S sigma = std::sqrt(posterior_variance(t, sched));
  return mean + sigma * x;
}

// Noise predictor interface used by loss and sampler: (z_t, t) -> eps_hat.
// Conditioning information is bound into the callable by the caller.
template <class S>
using NoisePredictor = std::function<Vec<S>(const Vec<S>&, int)>;

// Denoising objective: per element draw t ~ U[1,T] and eps ~ N(0,I), corrupt,
// and score the predictor with mean squared error, averaged over the batch.
template <class S>
S diffusion_loss(std::span<const Vec<S>> z0_batch,
                 const std::function<Vec<S>(const Vec<S>&, int, std::size_t)>&
                     predict,  // (z_t, t, batch index) -> eps_hat
                 const NoiseSchedule<S>& sched, Rng& rng) {
  if (z0_batch.empty()) throw DataError("diffusion_loss: empty batch");
  S total(0);
  for (std::size_t i = 0; i < z0_batch.size(); ++i) {
    const Vec<S>& z0 = z0_batch[i];
    const int t = 1 + static_cast<int>(rng.uniform_int(
                          static_cast<std::uint64_t>(sched.steps)));
    const Vec<S> eps = rng.normal_vec<S>(z0.size());
    const Vec<S> z_t = q_sample(z0, t, eps, sched);
    const Vec<S> eps_hat = predict(z_t, t, i);
    if (eps_hat.size() != eps.size())
      throw DataError("diffusion_loss: predictor shape mismatch");
    total += (eps - eps_hat).squaredNorm() / S(eps.size());
  }
  const S loss = total / S(z0_batch.size());
  if (!std::isfinite(static_cast<double>(loss)))
    throw NumericError("diffusion loss diverged (non-finite)");
  return loss;
}

// Full ancestral sampling loop: z_T ~ N(0,I), then denoise_step for
// t = T..1 with fresh noise per step and x = 0 at the last step.
template <class S>
Vec<S> sample_latent(const NoisePredictor<S>& predict, Index dim,
                     const NoiseSchedule<S>& sched, Rng& rng) {
  Vec<S> z = rng.normal_vec<S>(dim);
  for (int t = sched.steps; t >= 1; --t) {
    const Vec<S> eps_hat = predict(z, t);
    Vec<S> x = t > 1 ? rng.normal_vec<S>(dim) : Vec<S>::Zero(dim).eval();
    z = denoise_step(z, t, eps_hat, x, sched);
    if (!z.allFinite())
      throw NumericError("sampling diverged at step " + std::to_string(t) +
                         " (|z| = " + std::to_string(static_cast<double>(
                                          z.norm())) +
                         ")");
  }
  return z;
}

}  // namespace prosody::diffusion
