#include <doctest.h>

#include <cmath>

#include "apt/autodiff.hpp"
#include "test_util.hpp"

using namespace apt;
using apt::test::gradcheck;

namespace {

// builds a composite graph exercising most of the op set and returns a scalar
Var composite(const Var& x, const Var& w, const Var& tab) {
    Var h = conv2d(x, w, Var(), 1, 1); // (1,4,4,4)
    Var g(Tensor::full({4}, 1.0));
    Var b(Tensor::zeros({4}));
    h = group_norm(h, g, b, 2);
    h = silu(h);
    h = add_channel_bias(h, take_row(tab, 0));
    Var up = upsample_nearest2(h);       // (1,4,8,8)
    Var cat = concat_channels(up, up);   // (1,8,8,8)
    Var mu = channel_mean(cat);
    Var sd = channel_std(cat, 1e-8);
    Var t = nchw_to_tokens(h);           // (1,16,4)
    Var q = split_heads(linear(t, reshape(stack_rows({take_row(tab, 0), take_row(tab, 1),
                                                      take_row(tab, 2), take_row(tab, 3)}),
                                          {4, 4})),
                        2);
    Var att = softmax_last(scale(bmm(q, q, true), 0.9));
    Var o = merge_heads(bmm(att, q), 2);
    Var back = tokens_to_nchw(add(t, o), 4, 4);
    Var s1 = mse(back, constant(Tensor::full({1, 4, 4, 4}, 0.1)));
    Var s2 = sum_all(square(mu));
    Var s3 = sum_all(square(sd));
    return add(add(s1, s2), s3);
}

} // namespace

TEST_CASE("composite graph gradients match finite differences") {
    Rng rng(42);
    const Tensor xt = Tensor::randn({1, 3, 4, 4}, rng);
    const Tensor wt = Tensor::randn({4, 3, 3, 3}, rng, 0.4);
    const Tensor tabt = Tensor::randn({4, 4}, rng, 0.6);

    Var x(xt, true), w(wt, true), tab(tabt, true);
    Var loss = composite(x, w, tab);
    backward(loss);

    auto fx = [&](const Tensor& p) {
        return composite(Var(p), Var(wt), Var(tabt)).value()[0];
    };
    auto fw = [&](const Tensor& p) {
        return composite(Var(xt), Var(p), Var(tabt)).value()[0];
    };
    auto ft = [&](const Tensor& p) {
        return composite(Var(xt), Var(wt), Var(p)).value()[0];
    };
    CHECK(gradcheck(fx, xt, x.grad()) < 1e-6);
    CHECK(gradcheck(fw, wt, w.grad()) < 1e-6);
    CHECK(gradcheck(ft, tabt, tab.grad()) < 1e-6);
}

TEST_CASE("strided conv and repeat/sum_dim1 gradients") {
    Rng rng(5);
    const Tensor xt = Tensor::randn({2, 2, 4, 4}, rng);
    const Tensor wt = Tensor::randn({4, 2, 3, 3}, rng, 0.4);
    auto f = [&](const Tensor& xv, const Tensor& wv) {
        Var h = conv2d(Var(xv), Var(wv), Var(Tensor::full({4}, 0.05)), 2, 1); // (2,4,2,2)
        Var t = reshape(h, {2, 2, 2, 4});
        Var srep = repeat_block0(sum_dim1(t), 2); // (4,2,4)
        return mean_all(square(srep));
    };
    Var x(xt, true), w(wt, true);
    {
        Var h = conv2d(x, w, Var(Tensor::full({4}, 0.05)), 2, 1);
        Var t = reshape(h, {2, 2, 2, 4});
        Var srep = repeat_block0(sum_dim1(t), 2);
        backward(mean_all(square(srep)));
    }
    CHECK(gradcheck([&](const Tensor& p) { return f(p, wt).value()[0]; }, xt, x.grad()) < 1e-6);
    CHECK(gradcheck([&](const Tensor& p) { return f(xt, p).value()[0]; }, wt, w.grad()) < 1e-6);
}

TEST_CASE("no-grad mode produces constant nodes") {
    Rng rng(1);
    Var x(Tensor::randn({2, 2}, rng), true);
    {
        NoGradGuard ng;
        Var y = square(x);
        CHECK_FALSE(y.requires_grad());
        CHECK(y.node->parents.empty());
    }
    Var y = square(x);
    CHECK(y.requires_grad());
}

TEST_CASE("backward zeroes stale gradients between passes") {
    Var x(Tensor::full({3}, 2.0), true);
    backward(sum_all(square(x)));
    const Tensor g1 = x.grad();
    backward(sum_all(square(x)));
    CHECK(apt::test::tensors_equal(g1, x.grad())); // no accumulation across passes
    for (int64_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(4.0));
}

TEST_CASE("backward requires a scalar root") {
    Var x(Tensor::full({3}, 1.0), true);
    CHECK_THROWS_AS(backward(square(x)), std::invalid_argument);
}

TEST_CASE("op shape validation") {
    Var a(Tensor::zeros({2, 3}));
    Var b(Tensor::zeros({3, 2}));
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
    CHECK_THROWS_AS(linear(a, Var(Tensor::zeros({4, 2}))), std::invalid_argument);
    CHECK_THROWS_AS(bmm(Var(Tensor::zeros({1, 2, 3})), Var(Tensor::zeros({1, 4, 2}))),
                    std::invalid_argument);
    CHECK_THROWS_AS(group_norm(Var(Tensor::zeros({1, 3, 2, 2})), Var(Tensor::full({3}, 1.0)),
                               Var(Tensor::zeros({3})), 2),
                    std::invalid_argument);
    CHECK_THROWS_AS(split_heads(Var(Tensor::zeros({1, 4, 6})), 4), std::invalid_argument);
    CHECK_THROWS_AS(take_row(Var(Tensor::zeros({3, 2})), 3), std::out_of_range);
}

TEST_CASE("softmax rows are stochastic") {
    Rng rng(3);
    Var x(Tensor::randn({4, 5, 7}, rng, 3.0));
    Var y = softmax_last(x);
    const Tensor& t = y.value();
    for (int64_t r = 0; r < 20; ++r) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) s += t[r * 7 + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("gemm kernels agree with naive multiplication") {
    Rng rng(9);
    const int m = 5, k = 7, n = 4;
    Tensor a = Tensor::randn({m, k}, rng);
    Tensor b = Tensor::randn({k, n}, rng);
    Tensor bt({n, k});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) bt[i * k + j] = b[j * n + i];
    Tensor at({k, m});
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < m; ++j) at[i * m + j] = a[j * k + i];

    Tensor naive({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            naive[i * n + j] = s;
        }

    Tensor c1({m, n}), c2({m, n}), c3({m, n});
    gemm_nn(a.data(), b.data(), c1.data(), m, k, n, false);
    gemm_nt(a.data(), bt.data(), c2.data(), m, k, n, false);
    gemm_tn(at.data(), b.data(), c3.data(), m, k, n, false);
    CHECK(apt::test::max_abs_diff(naive, c1) < 1e-12);
    CHECK(apt::test::max_abs_diff(naive, c2) < 1e-12);
    CHECK(apt::test::max_abs_diff(naive, c3) < 1e-12);
}
