#pragma once

#include "apt/rng.hpp"
#include "apt/tensor.hpp"

namespace apt {

// Affine zoom-out/rotation policy. Zoom-out only (scale >= 1), rotation
// bounds symmetric about zero.
struct AugmentPolicy {
    double scale_min = 1.0;
    double scale_max = 3.0;
    double max_rotation_deg = 15.0;
    bool fill_with_mean = true; // fill exposed regions with the image mean
    double fill_value = 0.0;    // used when fill_with_mean is false

    void validate() const;
};

struct AugmentResult {
    Tensor image;
    bool applied = false;
    double scale = 1.0;
    double angle_deg = 0.0;
};

// Deterministic warp: zoom-out by `scale` (content shrinks, centered) then
// rotate by `angle_deg`, single-pass bilinear resample with constant fill.
Tensor apply_affine(const Tensor& x0, double scale, double angle_deg, const AugmentPolicy& policy);

// With probability p, samples scale ~ U[min,max] and angle ~ U[-r,+r] and
// warps; otherwise returns the input unchanged.
AugmentResult maybe_augment(const Tensor& x0, double p, const AugmentPolicy& policy, Rng& rng);

// applied-fraction of maybe_augment over n trials on a dummy image
double empirical_rate(double p, int n, const AugmentPolicy& policy, Rng& rng);

} // namespace apt
