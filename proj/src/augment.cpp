#include "apt/augment.hpp"

#include <cmath>
#include <stdexcept>

namespace apt {

void AugmentPolicy::validate() const {
    if (!(scale_min >= 1.0))
        throw std::invalid_argument("AugmentPolicy: scale_min must be >= 1 (zoom-out only)");
    if (!(scale_max >= scale_min))
        throw std::invalid_argument("AugmentPolicy: scale_max must be >= scale_min");
    if (!(max_rotation_deg >= 0.0))
        throw std::invalid_argument("AugmentPolicy: max_rotation_deg must be >= 0");
}

Tensor apply_affine(const Tensor& x0, double scale, double angle_deg,
                    const AugmentPolicy& policy) {
    if (x0.ndim() != 3) throw std::invalid_argument("apply_affine: need CHW image");
    const int c = x0.dim(0), h = x0.dim(1), w = x0.dim(2);

    double fill = policy.fill_value;
    if (policy.fill_with_mean) {
        double s = 0.0;
        for (int64_t i = 0; i < x0.numel(); ++i) s += x0[i];
        fill = s / double(x0.numel());
    }

    const double rad = angle_deg * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cx = (w - 1) * 0.5, cy = (h - 1) * 0.5;

    Tensor out({c, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            // output = rotate(zoom_out(input)); inverse map is scale * R(-angle)
            const double px = x - cx, py = y - cy;
            const double qx = scale * (cs * px + sn * py) + cx;
            const double qy = scale * (-sn * px + cs * py) + cy;
            const int x0i = int(std::floor(qx));
            const int y0i = int(std::floor(qy));
            const double fx = qx - x0i, fy = qy - y0i;
            for (int ch = 0; ch < c; ++ch) {
                const double* plane = x0.data() + size_t(ch) * h * w;
                auto tap = [&](int xi, int yi) {
                    return (xi >= 0 && xi < w && yi >= 0 && yi < h)
                               ? plane[size_t(yi) * w + xi]
                               : fill;
                };
                const double v = (1 - fy) * ((1 - fx) * tap(x0i, y0i) + fx * tap(x0i + 1, y0i)) +
                                 fy * ((1 - fx) * tap(x0i, y0i + 1) + fx * tap(x0i + 1, y0i + 1));
                out[(int64_t(ch) * h + y) * w + x] = v;
            }
        }
    }
    return out;
}

AugmentResult maybe_augment(const Tensor& x0, double p, const AugmentPolicy& policy, Rng& rng) {
    if (!(p >= 0.0 && p <= 1.0))
        throw std::invalid_argument("maybe_augment: probability must be in [0, 1]");
    policy.validate();
    AugmentResult res;
    if (rng.uniform() < p) {
        res.applied = true;
        res.scale = rng.uniform(policy.scale_min, policy.scale_max);
        res.angle_deg = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg);
        res.image = apply_affine(x0, res.scale, res.angle_deg, policy);
    } else {
        res.image = x0;
    }
    return res;
}

double empirical_rate(double p, int n, const AugmentPolicy& policy, Rng& rng) {
    if (n < 1) throw std::invalid_argument("empirical_rate: n must be >= 1");
    Tensor dummy = Tensor::full({1, 4, 4}, 0.5);
    int applied = 0;
    for (int i = 0; i < n; ++i)
        if (maybe_augment(dummy, p, policy, rng).applied) ++applied;
    return double(applied) / double(n);
}

} // namespace apt
