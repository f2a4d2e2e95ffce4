#pragma once

#include <vector>

namespace apt {

// Partition of the T diffusion steps into B equal bins.
struct BinMap {
    int T = 0;
    int B = 0;

    BinMap() = default;
    BinMap(int t_total, int bins);

    int width() const { return T / B; }
    int bin_of(int t) const;
};

// gamma = max(0, 1 - exp(-temperature * (ema_phi - ema_theta)))
// Zero at zero gap, approaches 1 as the gap grows; negative gaps clamp to 0
// so "no overfitting" never up-weights training.
double compute_gamma(double ema_phi_b, double ema_theta_b, double temperature);

// clamp(gamma, 0, p_max)
double augment_probability(double gamma, double p_max);

// 1 - clamp(gamma, 0, 1)
double adaptive_weight(double gamma);

// Per-bin EMA pair of prior/fine-tuned denoising losses plus the derived
// gamma. gamma is always recomputed from the EMAs, never assigned.
class IndicatorState {
public:
    IndicatorState() = default;
    IndicatorState(int bins, double alpha, double temperature);

    // ema <- (1-alpha)*ema + alpha*loss per track; first observation seeds
    // the track; gamma for the bin is recomputed afterwards
    void ema_update(int bin, double loss_phi, double loss_theta);

    int bins() const { return int(gamma_.size()); }
    double alpha() const { return alpha_; }
    double temperature() const { return temperature_; }
    double ema_phi(int bin) const { return ema_phi_[size_t(bin)]; }
    double ema_theta(int bin) const { return ema_theta_[size_t(bin)]; }
    double gamma(int bin) const { return gamma_[size_t(bin)]; }
    bool initialized(int bin) const { return init_[size_t(bin)]; }

    const std::vector<double>& gammas() const { return gamma_; }

    // raw access for serialization
    std::vector<double>& raw_ema_phi() { return ema_phi_; }
    std::vector<double>& raw_ema_theta() { return ema_theta_; }
    std::vector<double>& raw_gamma() { return gamma_; }
    std::vector<char>& raw_init() { return init_; }

private:
    void check_bin(int bin) const;

    std::vector<double> ema_phi_;
    std::vector<double> ema_theta_;
    std::vector<double> gamma_;
    std::vector<char> init_;
    double alpha_ = 0.1;
    double temperature_ = 1000.0;
};

} // namespace apt
