#pragma once

#include "apt/autodiff.hpp"
#include "apt/net.hpp"

namespace apt {

struct RegWeights {
    double lambda_dist = 30.0;
    double lambda_attn = 3e-4;
};

enum class StatReduction {
    PerChannel, // mean/std per channel over spatial positions
    Global,     // mean/std over all activations of the layer
};

struct RegOptions {
    StatReduction reduction = StatReduction::PerChannel;
    double std_eps = 1e-8; // variance floor inside the square root
};

// Squared differences of activation means and standard deviations, summed
// over tapped layers (and averaged over the batch dimension). The prior-side
// bundle is treated as constant; only fine-tuned taps receive gradients.
std::pair<Var, Var> stat_losses(const TapBundle& taps_theta, const TapBundle& taps_phi,
                                const RegOptions& opts = {});

// Per layer: (1/H) * || sum_i A_theta_i - sum_i A_phi_i ||^2 over all
// queries and text-token columns, summed over layers (batch-averaged).
Var attn_align_loss(const TapBundle& taps_theta, const TapBundle& taps_phi);

// weighted_dm + lambda_dist * (L_mu + L_sigma) + lambda_attn * L_attn
Var total_loss(const Var& weighted_dm, const Var& l_mu, const Var& l_sigma, const Var& l_attn,
               const RegWeights& weights);
double total_loss_value(double weighted_dm, double l_mu, double l_sigma, double l_attn,
                        const RegWeights& weights);

} // namespace apt
