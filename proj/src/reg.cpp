#include "apt/reg.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace apt {

namespace {

void check_tap_ids(const TapBundle& a, const TapBundle& b, const char* where) {
    if (a.features.size() != b.features.size())
        throw std::invalid_argument(std::string(where) + ": tap mismatch, " +
                                    std::to_string(a.features.size()) + " vs " +
                                    std::to_string(b.features.size()) + " feature taps");
    for (const auto& [id, var] : a.features) {
        auto it = b.features.find(id);
        if (it == b.features.end())
            throw std::invalid_argument(std::string(where) + ": tap mismatch, level " +
                                        std::to_string(id) + " missing from one bundle");
        if (!var.value().same_shape(it->second.value()))
            throw std::invalid_argument(std::string(where) + ": tap mismatch at level " +
                                        std::to_string(id) + ": " + shape_str(var.value().shape) +
                                        " vs " + shape_str(it->second.value().shape));
    }
}

Var zero_scalar() { return constant(Tensor({1})); }

} // namespace

std::pair<Var, Var> stat_losses(const TapBundle& taps_theta, const TapBundle& taps_phi,
                                const RegOptions& opts) {
    check_tap_ids(taps_theta, taps_phi, "stat_losses");
    Var l_mu = zero_scalar();
    Var l_sigma = zero_scalar();
    for (const auto& [id, h_theta] : taps_theta.features) {
        const Var& h_phi = taps_phi.features.at(id);
        const int n = h_theta.value().dim(0);
        const double inv_n = 1.0 / double(n);
        Var mu_t, sd_t, mu_p, sd_p;
        if (opts.reduction == StatReduction::PerChannel) {
            mu_t = channel_mean(h_theta);
            sd_t = channel_std(h_theta, opts.std_eps);
            mu_p = channel_mean(h_phi);
            sd_p = channel_std(h_phi, opts.std_eps);
        } else {
            mu_t = global_mean(h_theta);
            sd_t = global_std(h_theta, opts.std_eps);
            mu_p = global_mean(h_phi);
            sd_p = global_std(h_phi, opts.std_eps);
        }
        l_mu = add(l_mu, scale(sum_all(square(sub(mu_t, mu_p))), inv_n));
        l_sigma = add(l_sigma, scale(sum_all(square(sub(sd_t, sd_p))), inv_n));
    }
    return {l_mu, l_sigma};
}

Var attn_align_loss(const TapBundle& taps_theta, const TapBundle& taps_phi) {
    if (taps_theta.attentions.size() != taps_phi.attentions.size())
        throw std::invalid_argument("attn_align_loss: tap mismatch, " +
                                    std::to_string(taps_theta.attentions.size()) + " vs " +
                                    std::to_string(taps_phi.attentions.size()) +
                                    " attention taps");
    Var total = zero_scalar();
    for (const auto& [id, a_theta] : taps_theta.attentions) {
        auto it = taps_phi.attentions.find(id);
        if (it == taps_phi.attentions.end())
            throw std::invalid_argument("attn_align_loss: tap mismatch, level " +
                                        std::to_string(id) + " missing from one bundle");
        const Var& a_phi = it->second;
        if (!a_theta.value().same_shape(a_phi.value()))
            throw std::invalid_argument("attn_align_loss: tap mismatch at level " +
                                        std::to_string(id) + ": " +
                                        shape_str(a_theta.value().shape) + " vs " +
                                        shape_str(a_phi.value().shape));
        const int n = a_theta.value().dim(0);
        const int heads = a_theta.value().dim(1);
        if (heads != a_phi.value().dim(1))
            throw std::invalid_argument("attn_align_loss: head count mismatch at level " +
                                        std::to_string(id));
        Var d = sub(sum_dim1(a_theta), sum_dim1(a_phi)); // (N, Q, S)
        total = add(total, scale(sum_all(square(d)), 1.0 / (double(heads) * double(n))));
    }
    return total;
}

Var total_loss(const Var& weighted_dm, const Var& l_mu, const Var& l_sigma, const Var& l_attn,
               const RegWeights& weights) {
    for (const Var* v : {&weighted_dm, &l_mu, &l_sigma, &l_attn}) {
        if (!v->defined() || v->value().numel() != 1)
            throw std::invalid_argument("total_loss: all terms must be defined scalars");
        if (!std::isfinite(v->value()[0]))
            throw std::invalid_argument("total_loss: non-finite loss term");
    }
    if (!(weights.lambda_dist >= 0.0) || !(weights.lambda_attn >= 0.0) ||
        !std::isfinite(weights.lambda_dist) || !std::isfinite(weights.lambda_attn))
        throw std::invalid_argument("total_loss: weights must be finite and non-negative");
    return add(weighted_dm,
               add(scale(add(l_mu, l_sigma), weights.lambda_dist),
                   scale(l_attn, weights.lambda_attn)));
}

double total_loss_value(double weighted_dm, double l_mu, double l_sigma, double l_attn,
                        const RegWeights& weights) {
    if (!std::isfinite(weighted_dm) || !std::isfinite(l_mu) || !std::isfinite(l_sigma) ||
        !std::isfinite(l_attn))
        throw std::invalid_argument("total_loss: non-finite loss term");
    return weighted_dm + weights.lambda_dist * (l_mu + l_sigma) + weights.lambda_attn * l_attn;
}

} // namespace apt
