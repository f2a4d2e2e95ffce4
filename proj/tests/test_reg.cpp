#include <doctest.h>

#include <cmath>

#include "apt/reg.hpp"
#include "test_util.hpp"

using namespace apt;
using apt::test::gradcheck;

namespace {

TapBundle feature_bundle(const Tensor& t) {
    TapBundle b;
    b.features.emplace(0, Var(t));
    return b;
}

TapBundle attn_bundle(const Tensor& t) {
    TapBundle b;
    b.attentions.emplace(0, Var(t));
    return b;
}

} // namespace

TEST_CASE("stat losses vanish on identical taps") {
    Rng rng(1);
    const Tensor h = Tensor::randn({1, 3, 4, 4}, rng);
    const auto [mu, sig] = stat_losses(feature_bundle(h), feature_bundle(h));
    CHECK(mu.value()[0] == 0.0);
    CHECK(sig.value()[0] == 0.0);
}

TEST_CASE("constant shift moves only the mean") {
    // single tap, single channel, theta = phi + 0.5 everywhere
    Rng rng(2);
    Tensor phi = Tensor::randn({1, 1, 2, 2}, rng);
    Tensor theta = phi;
    for (int64_t i = 0; i < theta.numel(); ++i) theta[i] += 0.5;
    const auto [mu, sig] = stat_losses(feature_bundle(theta), feature_bundle(phi));
    CHECK(std::fabs(mu.value()[0] - 0.25) < 1e-8);
    CHECK(std::fabs(sig.value()[0] - 0.0) < 1e-8);
}

TEST_CASE("scaling a zero-mean map moves only the std") {
    // phi has mean 0, population std exactly 1; theta = 2*phi
    Tensor phi({1, 1, 2, 2});
    phi[0] = 1.0;
    phi[1] = -1.0;
    phi[2] = 1.0;
    phi[3] = -1.0;
    Tensor theta = phi;
    for (int64_t i = 0; i < 4; ++i) theta[i] *= 2.0;
    const auto [mu, sig] = stat_losses(feature_bundle(theta), feature_bundle(phi));
    CHECK(std::fabs(mu.value()[0] - 0.0) < 1e-8);
    CHECK(std::fabs(sig.value()[0] - 1.0) < 1e-8);
}

TEST_CASE("stat losses sum over taps and channels") {
    Rng rng(3);
    Tensor phi = Tensor::randn({1, 2, 3, 3}, rng);
    Tensor theta = phi;
    for (int64_t i = 0; i < 9; ++i) theta[i] += 0.5;        // channel 0 shifted
    for (int64_t i = 9; i < 18; ++i) theta[i] += 0.25;      // channel 1 shifted less
    TapBundle tb = feature_bundle(theta);
    TapBundle pb = feature_bundle(phi);
    tb.features.emplace(1, Var(theta));
    pb.features.emplace(1, Var(phi));
    const auto [mu, sig] = stat_losses(tb, pb);
    CHECK(mu.value()[0] == doctest::Approx(2.0 * (0.25 + 0.0625)).epsilon(1e-10));
    CHECK(sig.value()[0] == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("attention alignment hand case") {
    // one layer, H=2, Q=1, S=2
    Tensor a_theta({1, 2, 1, 2});
    a_theta[0] = 1.0;
    a_theta[1] = 0.0;
    a_theta[2] = 1.0;
    a_theta[3] = 0.0;
    Tensor a_phi = Tensor::full({1, 2, 1, 2}, 0.5);
    const Var loss = attn_align_loss(attn_bundle(a_theta), attn_bundle(a_phi));
    CHECK(loss.value()[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attention alignment ignores head permutations") {
    Rng rng(4);
    Tensor a = Tensor::randn({1, 2, 3, 4}, rng);
    Tensor perm({1, 2, 3, 4});
    // swap the two heads
    for (int64_t i = 0; i < 12; ++i) {
        perm[i] = a[12 + i];
        perm[12 + i] = a[i];
    }
    const Var loss = attn_align_loss(attn_bundle(perm), attn_bundle(a));
    CHECK(loss.value()[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("attention alignment scales quadratically") {
    Rng rng(5);
    Tensor a = Tensor::randn({1, 2, 3, 4}, rng);
    Tensor b = Tensor::randn({1, 2, 3, 4}, rng);
    const double l1 = attn_align_loss(attn_bundle(a), attn_bundle(b)).value()[0];
    // theta' = b + 3*(a - b) triples the head-sum difference
    Tensor a3({1, 2, 3, 4});
    for (int64_t i = 0; i < a.numel(); ++i) a3[i] = b[i] + 3.0 * (a[i] - b[i]);
    const double l3 = attn_align_loss(attn_bundle(a3), attn_bundle(b)).value()[0];
    CHECK(l3 == doctest::Approx(9.0 * l1).epsilon(1e-9));
}

TEST_CASE("tap mismatches are rejected") {
    Rng rng(6);
    const Tensor h = Tensor::randn({1, 2, 2, 2}, rng);
    TapBundle a = feature_bundle(h);
    TapBundle b;
    b.features.emplace(1, Var(h));
    CHECK_THROWS_AS(stat_losses(a, b), std::invalid_argument);
    TapBundle c;
    c.features.emplace(0, Var(Tensor::randn({1, 2, 4, 4}, rng)));
    CHECK_THROWS_AS(stat_losses(a, c), std::invalid_argument);

    TapBundle at = attn_bundle(Tensor::randn({1, 2, 3, 4}, rng));
    TapBundle bt = attn_bundle(Tensor::randn({1, 4, 3, 4}, rng)); // head count differs
    CHECK_THROWS_AS(attn_align_loss(at, bt), std::invalid_argument);
    TapBundle ct;
    ct.attentions.emplace(2, Var(Tensor::randn({1, 2, 3, 4}, rng)));
    CHECK_THROWS_AS(attn_align_loss(at, ct), std::invalid_argument);
}

TEST_CASE("gradients match finite differences on random small taps") {
    Rng rng(7);
    for (int rep = 0; rep < 8; ++rep) {
        const Tensor phi_f = Tensor::randn({1, 2, 3, 3}, rng);
        const Tensor theta_f = Tensor::randn({1, 2, 3, 3}, rng);
        const Tensor phi_a = Tensor::randn({1, 2, 4, 3}, rng);
        const Tensor theta_a = Tensor::randn({1, 2, 4, 3}, rng);

        for (int which = 0; which < 3; ++which) {
            auto loss_of = [&](const Tensor& t) {
                TapBundle tb, pb;
                if (which < 2) {
                    tb.features.emplace(0, Var(t));
                    pb.features.emplace(0, Var(phi_f));
                    auto [mu, sig] = stat_losses(tb, pb);
                    return which == 0 ? mu.value()[0] : sig.value()[0];
                }
                tb.attentions.emplace(0, Var(t));
                pb.attentions.emplace(0, Var(phi_a));
                return attn_align_loss(tb, pb).value()[0];
            };
            const Tensor& input = which < 2 ? theta_f : theta_a;
            Var theta_var(input, true);
            TapBundle tb, pb;
            if (which < 2) {
                tb.features.emplace(0, theta_var);
                pb.features.emplace(0, Var(phi_f));
                auto [mu, sig] = stat_losses(tb, pb);
                backward(which == 0 ? mu : sig);
            } else {
                tb.attentions.emplace(0, theta_var);
                pb.attentions.emplace(0, Var(phi_a));
                backward(attn_align_loss(tb, pb));
            }
            CHECK(gradcheck(loss_of, input, theta_var.grad(), 1e-3) < 1e-4);
        }
    }
}

TEST_CASE("no gradient flows into the prior-side taps") {
    Rng rng(8);
    const Tensor phi = Tensor::randn({1, 2, 3, 3}, rng);
    const Tensor theta = Tensor::randn({1, 2, 3, 3}, rng);
    Var theta_var(theta, true);
    Var phi_var(phi, false);
    TapBundle tb, pb;
    tb.features.emplace(0, theta_var);
    pb.features.emplace(0, phi_var);
    auto [mu, sig] = stat_losses(tb, pb);
    backward(add(mu, sig));
    CHECK(theta_var.grad().numel() > 0);
    CHECK(phi_var.grad().numel() == 0);
    CHECK_FALSE(phi_var.requires_grad());
}

TEST_CASE("total loss assembly") {
    const Var dm = constant(Tensor::full({1}, 1.0));
    const Var zero = constant(Tensor({1}));
    RegWeights w;
    CHECK(total_loss(dm, zero, zero, zero, w).value()[0] == 1.0);

    const Var mu = constant(Tensor::full({1}, 0.01));
    const Var sg = constant(Tensor::full({1}, 0.02));
    const Var at = constant(Tensor::full({1}, 10.0));
    CHECK(total_loss(dm, mu, sg, at, w).value()[0] == doctest::Approx(1.903).epsilon(1e-12));
    CHECK(total_loss_value(1.0, 0.01, 0.02, 10.0, w) == doctest::Approx(1.903).epsilon(1e-12));

    RegWeights off{0.0, 0.0};
    CHECK(total_loss(dm, mu, sg, at, off).value()[0] == 1.0);

    const Var bad = constant(Tensor::full({1}, std::nan("")));
    CHECK_THROWS_AS(total_loss(bad, zero, zero, zero, w), std::invalid_argument);
    CHECK_THROWS_AS(total_loss(dm, zero, zero, zero, RegWeights{-1.0, 0.0}),
                    std::invalid_argument);
}

TEST_CASE("global reduction option") {
    Rng rng(9);
    Tensor phi = Tensor::randn({1, 2, 2, 2}, rng);
    Tensor theta = phi;
    for (int64_t i = 0; i < theta.numel(); ++i) theta[i] += 0.5;
    RegOptions opts;
    opts.reduction = StatReduction::Global;
    const auto [mu, sig] = stat_losses(feature_bundle(theta), feature_bundle(phi), opts);
    CHECK(mu.value()[0] == doctest::Approx(0.25).epsilon(1e-10));
    CHECK(sig.value()[0] == doctest::Approx(0.0).epsilon(1e-10));
}
