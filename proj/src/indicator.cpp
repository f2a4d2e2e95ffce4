#include "apt/indicator.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace apt {

BinMap::BinMap(int t_total, int bins) : T(t_total), B(bins) {
    if (t_total < 1 || bins < 1)
        throw std::invalid_argument("BinMap: T and B must be positive");
    if (t_total % bins != 0)
        throw std::invalid_argument("BinMap: B=" + std::to_string(bins) + " must divide T=" +
                                    std::to_string(t_total));
}

int BinMap::bin_of(int t) const {
    if (t < 0 || t >= T)
        throw std::out_of_range("bin_of: timestep " + std::to_string(t) + " out of range [0, " +
                                std::to_string(T) + ")");
    return t / width();
}

double compute_gamma(double ema_phi_b, double ema_theta_b, double temperature) {
    if (!std::isfinite(ema_phi_b) || !std::isfinite(ema_theta_b))
        throw std::invalid_argument("compute_gamma: non-finite EMA input");
    if (!(temperature > 0.0))
        throw std::invalid_argument("compute_gamma: temperature must be > 0");
    const double raw = -std::expm1(-temperature * (ema_phi_b - ema_theta_b));
    if (!(raw > 0.0)) return 0.0;
    // keep gamma strictly below 1 even when the exponential underflows
    const double top = std::nextafter(1.0, 0.0);
    return raw < top ? raw : top;
}

double augment_probability(double gamma, double p_max) {
    if (!(p_max >= 0.0) || !(p_max <= 1.0))
        throw std::invalid_argument("augment_probability: p_max must be in [0, 1]");
    if (gamma < 0.0) return 0.0;
    return gamma < p_max ? gamma : p_max;
}

double adaptive_weight(double gamma) {
    double g = gamma;
    if (g < 0.0) g = 0.0;
    if (g > 1.0) g = 1.0;
    return 1.0 - g;
}

IndicatorState::IndicatorState(int bins, double alpha, double temperature)
    : ema_phi_(size_t(bins), 0.0),
      ema_theta_(size_t(bins), 0.0),
      gamma_(size_t(bins), 0.0),
      init_(size_t(bins), 0),
      alpha_(alpha),
      temperature_(temperature) {
    if (bins < 1) throw std::invalid_argument("IndicatorState: need at least one bin");
    if (!(alpha > 0.0) || !(alpha <= 1.0))
        throw std::invalid_argument("IndicatorState: alpha must be in (0, 1]");
    if (!(temperature > 0.0))
        throw std::invalid_argument("IndicatorState: temperature must be > 0");
}

void IndicatorState::check_bin(int bin) const {
    if (bin < 0 || bin >= bins())
        throw std::out_of_range("IndicatorState: bin " + std::to_string(bin) +
                                " out of range [0, " + std::to_string(bins()) + ")");
}

void IndicatorState::ema_update(int bin, double loss_phi, double loss_theta) {
    check_bin(bin);
    if (!std::isfinite(loss_phi) || !std::isfinite(loss_theta) || loss_phi < 0.0 ||
        loss_theta < 0.0)
        throw std::invalid_argument("IndicatorState: losses must be finite and >= 0");
    const size_t b = size_t(bin);
    if (!init_[b]) {
        ema_phi_[b] = loss_phi;
        ema_theta_[b] = loss_theta;
        init_[b] = 1;
    } else {
        ema_phi_[b] = (1.0 - alpha_) * ema_phi_[b] + alpha_ * loss_phi;
        ema_theta_[b] = (1.0 - alpha_) * ema_theta_[b] + alpha_ * loss_theta;
    }
    gamma_[b] = compute_gamma(ema_phi_[b], ema_theta_[b], temperature_);
}

} // namespace apt
