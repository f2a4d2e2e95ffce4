#include "apt/sched.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace apt {

double NoiseSchedule::signal_coef(int t) const { return std::sqrt(alpha_bars[size_t(t)]); }
double NoiseSchedule::noise_coef(int t) const { return std::sqrt(1.0 - alpha_bars[size_t(t)]); }

void NoiseSchedule::check_t(int t, const char* where) const {
    if (t < 0 || t >= T)
        throw std::out_of_range(std::string(where) + ": timestep " + std::to_string(t) +
                                " out of range [0, " + std::to_string(T) + ")");
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(size_t(T));
    s.alpha_bars.resize(size_t(T));
    double abar = 1.0;
    for (int t = 0; t < T; ++t) {
        const double beta = beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
        s.betas[size_t(t)] = beta;
        abar *= 1.0 - beta;
        s.alpha_bars[size_t(t)] = abar;
    }
    return s;
}

Tensor q_sample(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched) {
    check_same_shape(x0, eps, "q_sample");
    sched.check_t(t, "q_sample");
    const double a = sched.signal_coef(t);
    const double b = sched.noise_coef(t);
    Tensor out(x0.shape);
    const int64_t n = x0.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
    check_same_shape(x_t, eps_hat, "predict_x0");
    sched.check_t(t, "predict_x0");
    const double a = sched.signal_coef(t);
    const double b = sched.noise_coef(t);
    Tensor out(x_t.shape);
    const int64_t n = x_t.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = (x_t[i] - b * eps_hat[i]) / a;
    return out;
}

Tensor sample_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                   Rng& rng) {
    check_same_shape(x_t, eps_hat, "sample_step");
    sched.check_t(t, "sample_step");
    const double beta = sched.betas[size_t(t)];
    const double alpha = 1.0 - beta;
    const double abar = sched.alpha_bars[size_t(t)];
    const double abar_prev = t > 0 ? sched.alpha_bars[size_t(t - 1)] : 1.0;
    // posterior mean: (x_t - beta/sqrt(1-abar) * eps_hat) / sqrt(alpha)
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    const double eps_coef = beta / std::sqrt(1.0 - abar);
    const double post_var = (1.0 - abar_prev) / (1.0 - abar) * beta;
    const double sigma = t > 0 ? std::sqrt(post_var) : 0.0;
    Tensor out(x_t.shape);
    const int64_t n = x_t.numel();
    for (int64_t i = 0; i < n; ++i) {
        out[i] = inv_sqrt_alpha * (x_t[i] - eps_coef * eps_hat[i]);
        if (t > 0) out[i] += sigma * rng.normal();
    }
    return out;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w) {
    check_same_shape(eps_uncond, eps_cond, "cfg_combine");
    Tensor out(eps_uncond.shape);
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]);
    return out;
}

} // namespace apt
