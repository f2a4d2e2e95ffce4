#pragma once

#include <vector>

#include "apt/rng.hpp"
#include "apt/tensor.hpp"

namespace apt {

// Discrete-time diffusion coefficients: per-step beta and cumulative
// alpha-bar products. Signal coefficient at t is sqrt(alpha_bars[t]),
// noise coefficient sqrt(1 - alpha_bars[t]).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    double signal_coef(int t) const;
    double noise_coef(int t) const;
    void check_t(int t, const char* where) const;
};

// Linear beta schedule. Canonical defaults: beta_start=1e-4, beta_end=0.02.
NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
Tensor q_sample(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched);

// x0_hat = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched);

// one ancestral reverse step; adds schedule-scaled Gaussian noise for t > 0
Tensor sample_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                   Rng& rng);

// eps_uncond + w * (eps_cond - eps_uncond)
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w);

} // namespace apt
