#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "testutil.hpp"

using namespace moss;
using ad::Shape;
using ad::Var;

TEST_CASE("broadcast binary forward") {
    Var a = Var::leaf(Shape{2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, false);
    Var s = Var::scalar(2.0);
    CHECK(ad::mul(a, s).value()[5] == doctest::Approx(12.0));
    CHECK(ad::add(s, a).value()[0] == doctest::Approx(3.0));

    // (C,H,W) * (1,H,W) spatial gate
    Var gate = Var::leaf(Shape{1, 2, 2}, {1, 0, 2, 1}, false);
    ad::Buf g = ad::mul(a, gate).value();
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == 6.0);
    CHECK(g[5] == 0.0);

    // (C,H,W) * (C,1,1) channel gate
    Var cg = Var::leaf(Shape{2, 1, 1}, {2, 3}, false);
    ad::Buf h = ad::mul(a, cg).value();
    CHECK(h[3] == 8.0);
    CHECK(h[4] == 15.0);

    CHECK_THROWS_AS(ad::add(Var::leaf(Shape{3}, {1, 2, 3}, false),
                            Var::leaf(Shape{2}, {1, 2}, false)),
                    ArgumentError);
}

TEST_CASE("elementwise gradients vs finite differences") {
    Var x = tu::random_var(Shape{3, 4}, 11, true, 0.2, 1.5);
    Var y = tu::random_var(Shape{3, 4}, 12, true, -1.0, 1.0);

    auto check = [&](std::function<Var()> f, std::vector<Var> leaves) {
        CHECK(tu::max_rel_grad_err(f, leaves) < 1e-6);
    };
    check([&] { return ad::sum(ad::mul(x, y)); }, {x, y});
    check([&] { return ad::sum(ad::div(y, x)); }, {x, y});
    check([&] { return ad::sum(ad::exp(y)); }, {y});
    check([&] { return ad::sum(ad::log(x)); }, {x});
    check([&] { return ad::sum(ad::sqrt(x)); }, {x});
    check([&] { return ad::sum(ad::sin(y)); }, {y});
    check([&] { return ad::sum(ad::cos(y)); }, {y});
    check([&] { return ad::sum(ad::sigmoid(y)); }, {y});
    check([&] { return ad::sum(ad::softplus(y)); }, {y});
    check([&] { return ad::sum(ad::gelu(y)); }, {y});
    check([&] { return ad::mean(ad::mul(y, y)); }, {y});
}

TEST_CASE("broadcast gradients reduce over broadcast dims") {
    Var a = tu::random_var(Shape{3, 2, 2}, 21, true);
    Var gate = tu::random_var(Shape{1, 2, 2}, 22, true);
    Var cgate = tu::random_var(Shape{3, 1, 1}, 23, true);
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::mul(ad::mul(a, gate), cgate)); },
                               {a, gate, cgate}) < 1e-6);
    Var s = Var::scalar(0.7, true);
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::div(a, s)); }, {a, s}) < 1e-6);
}

TEST_CASE("matmul all transpose flags") {
    Var a = tu::random_var(Shape{3, 4}, 31, true);
    Var b = tu::random_var(Shape{4, 5}, 32, true);
    // naive reference
    const ad::Buf& av = a.value();
    const ad::Buf& bv = b.value();
    ad::Buf ref(15, 0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j)
            for (int l = 0; l < 4; ++l) ref[i * 5 + j] += av[i * 4 + l] * bv[l * 5 + j];
    CHECK(tu::max_abs_diff(ad::matmul(a, b).value(), ref) < 1e-12);

    Var at = tu::random_var(Shape{4, 3}, 33, true);
    Var bt = tu::random_var(Shape{5, 4}, 34, true);
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::mul(ad::matmul(a, b), ad::matmul(a, b))); },
                               {a, b}) < 1e-6);
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::matmul(at, b, true, false)); },
                               {at, b}) < 1e-6);
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::matmul(a, bt, false, true)); },
                               {a, bt}) < 1e-6);
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::matmul(at, bt, true, true)); },
                               {at, bt}) < 1e-6);
    // cross-check one transposed case against the plain product
    CHECK(tu::max_abs_diff(ad::matmul(at, b, true, false).value(),
                           ad::matmul(ad::reshape(at, Shape{4, 3}), b, true, false).value()) ==
          0.0);
    CHECK_THROWS_AS(ad::matmul(a, bt), ArgumentError);  // (3,4) x (5,4)
}

TEST_CASE("softmax rows") {
    Var x = tu::random_var(Shape{5, 7}, 41, true, -3.0, 3.0);
    ad::Buf y = ad::softmax_rows(x).value();
    for (int r = 0; r < 5; ++r) {
        double s = 0.0;
        for (int c = 0; c < 7; ++c) s += y[r * 7 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    Var w = tu::random_var(Shape{5, 7}, 42, false);
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::mul(ad::softmax_rows(x), w)); }, {x}) <
          1e-5);
}

TEST_CASE("reductions and l1") {
    Var a = tu::random_var(Shape{4, 6}, 51, true);
    Var b = tu::random_var(Shape{4, 6}, 52, true);
    CHECK(ad::colsum(a).shape() == Shape{1, 6});
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::mul(ad::colsum(a), ad::colsum(a))); },
                               {a}) < 1e-6);
    double ref = 0.0;
    for (size_t i = 0; i < a.value().size(); ++i) ref += std::fabs(a.value()[i] - b.value()[i]);
    ref /= a.value().size();
    CHECK(ad::l1_diff(a, b).item() == doctest::Approx(ref).epsilon(1e-12));
    CHECK(tu::max_rel_grad_err([&] { return ad::l1_diff(a, b); }, {a, b}) < 1e-5);
}

TEST_CASE("pointwise conv matches per-pixel mixing and differentiates") {
    const int cin = 3, cout = 5, H = 4, W = 3;
    Var x = tu::random_var(Shape{cin, H, W}, 61, true);
    Var w = tu::random_var(Shape{cout, cin}, 62, true);
    Var bias = tu::random_var(Shape{cout}, 63, true);
    ad::Buf y = ad::pointwise_conv(x, w, bias).value();
    for (int co = 0; co < cout; ++co)
        for (int p = 0; p < H * W; ++p) {
            double acc = bias.value()[co];
            for (int ci = 0; ci < cin; ++ci)
                acc += w.value()[co * cin + ci] * x.value()[ci * H * W + p];
            CHECK(y[co * H * W + p] == doctest::Approx(acc).epsilon(1e-12));
        }
    CHECK(tu::max_rel_grad_err(
              [&] { return ad::mean(ad::mul(ad::pointwise_conv(x, w, bias),
                                            ad::pointwise_conv(x, w, bias))); },
              {x, w, bias}) < 1e-5);
}

TEST_CASE("depthwise conv vs naive oracle, with dilation") {
    const int C = 3, H = 7, W = 6, k = 3;
    for (int dil : {1, 2}) {
        Var x = tu::random_var(Shape{C, H, W}, 71 + dil, true);
        Var w = tu::random_var(Shape{C, k, k}, 72 + dil, true);
        Var bias = tu::random_var(Shape{C}, 73 + dil, true);
        ad::Buf ref = tu::conv_dw_naive(x.value(), C, H, W, w.value(), k, dil, &bias.value());
        CHECK(tu::max_abs_diff(ad::depthwise_conv(x, w, bias, dil).value(), ref) < 1e-12);
        CHECK(tu::max_rel_grad_err(
                  [&] { return ad::mean(ad::mul(ad::depthwise_conv(x, w, bias, dil),
                                                ad::depthwise_conv(x, w, bias, dil))); },
                  {x, w, bias}) < 1e-5);
    }
    CHECK_THROWS_AS(ad::depthwise_conv(tu::random_var(Shape{2, 4, 4}, 1),
                                       tu::random_var(Shape{2, 4, 4}, 2)),
                    ConfigError);
}

TEST_CASE("psf conv vs naive oracle, gradient to image and kernel") {
    const int B = 2, H = 8, W = 8, k = 3, s = 2;
    Var x = tu::random_var(Shape{B, H, W}, 81, true);
    Var kern = tu::random_var(Shape{k, k}, 82, true, 0.0, 1.0);
    ad::Buf ref = tu::blur_subsample_naive(x.value(), B, H, W, kern.value(), k, k, s);
    Var y = ad::psf_conv(x, kern, s);
    CHECK(y.shape() == Shape{B, H / s, W / s});
    CHECK(tu::max_abs_diff(y.value(), ref) < 1e-12);
    CHECK(tu::max_rel_grad_err(
              [&] {
                  Var z = ad::psf_conv(x, kern, s);
                  return ad::mean(ad::mul(z, z));
              },
              {x, kern}) < 1e-5);
    CHECK_THROWS_AS(ad::psf_conv(tu::random_var(Shape{1, 6, 6}, 1), kern, 4), ArgumentError);
}

TEST_CASE("srf apply vs naive oracle") {
    const int B = 6, b = 3, H = 4, W = 4;
    Var x = tu::random_var(Shape{B, H, W}, 91, true);
    Var r = tu::random_var(Shape{B, b}, 92, true, 0.0, 1.0);
    ad::Buf ref = tu::srf_apply_naive(x.value(), B, H * W, r.value(), b);
    CHECK(tu::max_abs_diff(ad::srf_apply(x, r).value(), ref) < 1e-12);
    CHECK(tu::max_rel_grad_err(
              [&] {
                  Var z = ad::srf_apply(x, r);
                  return ad::mean(ad::mul(z, z));
              },
              {x, r}) < 1e-5);
}

TEST_CASE("layer norm: normalized stats and gradient") {
    const int C = 6, H = 3, W = 2;
    Var x = tu::random_var(Shape{C, H, W}, 101, true, -2.0, 2.0);
    Var gamma = tu::random_var(Shape{C}, 102, true, 0.5, 1.5);
    Var beta = tu::random_var(Shape{C}, 103, true);
    {
        Var g1 = Var::full(Shape{C}, 1.0), b0 = Var::full(Shape{C}, 0.0);
        ad::Buf y = ad::layer_norm_ch(x, g1, b0).value();
        for (int p = 0; p < H * W; ++p) {
            double mu = 0.0, var = 0.0;
            for (int c = 0; c < C; ++c) mu += y[c * H * W + p];
            mu /= C;
            for (int c = 0; c < C; ++c) var += (y[c * H * W + p] - mu) * (y[c * H * W + p] - mu);
            CHECK(std::fabs(mu) < 1e-9);
            CHECK(var / C == doctest::Approx(1.0).epsilon(1e-4));
        }
    }
    CHECK(tu::max_rel_grad_err(
              [&] {
                  Var z = ad::layer_norm_ch(x, gamma, beta);
                  return ad::mean(ad::mul(z, z));
              },
              {x, gamma, beta}, 1e-5) < 1e-4);
}

TEST_CASE("batch norm training and eval modes") {
    const int C = 4, H = 5, W = 5;
    Var x = tu::random_var(Shape{C, H, W}, 111, true, -1.0, 3.0);
    Var gamma = tu::random_var(Shape{C}, 112, true, 0.5, 1.5);
    Var beta = tu::random_var(Shape{C}, 113, true);
    ad::BnState st;
    CHECK(tu::max_rel_grad_err(
              [&] {
                  Var z = ad::batch_norm(x, gamma, beta, &st, true);
                  return ad::mean(ad::mul(z, z));
              },
              {x, gamma, beta}, 1e-5) < 1e-4);
    CHECK(st.batches_seen > 0);
    // eval mode: affine map using the running statistics
    ad::BnState st2;
    st2.running_mean = {0.1, -0.2, 0.3, 0.0};
    st2.running_var = {1.0, 0.5, 2.0, 1.5};
    st2.batches_seen = 1;
    ad::Buf y = ad::batch_norm(x, gamma, beta, &st2, false).value();
    const double expect = (x.value()[0] - 0.1) / std::sqrt(1.0 + 1e-5) * gamma.value()[0] +
                          beta.value()[0];
    CHECK(y[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("pool ops") {
    Var x = tu::random_var(Shape{2, 4, 4}, 121, true);
    Var g = ad::global_avg_pool(x);
    CHECK(g.shape() == Shape{2, 1, 1});
    double mu = 0.0;
    for (int i = 0; i < 16; ++i) mu += x.value()[i];
    CHECK(g.value()[0] == doctest::Approx(mu / 16.0));
    Var p = ad::avg_pool(x, 2);
    CHECK(p.shape() == Shape{2, 2, 2});
    CHECK(p.value()[0] ==
          doctest::Approx((x.value()[0] + x.value()[1] + x.value()[4] + x.value()[5]) / 4.0));
    CHECK(tu::max_rel_grad_err(
              [&] {
                  Var z = ad::avg_pool(x, 2);
                  return ad::sum(ad::mul(z, z));
              },
              {x}) < 1e-6);
    CHECK(tu::max_rel_grad_err([&] { return ad::sum(ad::mul(ad::global_avg_pool(x),
                                                            ad::global_avg_pool(x))); },
                               {x}) < 1e-6);
}

TEST_CASE("concat, slice, reshape round trips") {
    Var a = tu::random_var(Shape{2, 3, 3}, 131, true);
    Var b = tu::random_var(Shape{3, 3, 3}, 132, true);
    Var cat = ad::concat_ch({a, b});
    CHECK(cat.shape() == Shape{5, 3, 3});
    CHECK(tu::max_abs_diff(ad::slice_ch(cat, 0, 2).value(), a.value()) == 0.0);
    CHECK(tu::max_abs_diff(ad::slice_ch(cat, 2, 5).value(), b.value()) == 0.0);
    CHECK(tu::max_rel_grad_err(
              [&] {
                  Var c = ad::concat_ch({a, b});
                  return ad::sum(ad::mul(ad::slice_ch(c, 1, 4), ad::slice_ch(c, 1, 4)));
              },
              {a, b}) < 1e-6);
    Var r = ad::reshape(a, Shape{2, 9});
    CHECK(r.shape() == Shape{2, 9});
    CHECK(tu::max_rel_grad_err(
              [&] { return ad::sum(ad::mul(ad::reshape(a, Shape{18}), ad::reshape(a, Shape{18}))); },
              {a}) < 1e-6);
}

TEST_CASE("backward releases intermediates but keeps leaf grads") {
    Var x = tu::random_var(Shape{4}, 141, true);
    Var mid = ad::mul(x, x);
    Var loss = ad::sum(mid);
    ad::backward(loss);
    CHECK(x.grad().size() == 4);
    CHECK_THROWS_AS(mid.value(), StateError);  // released
    // leaves keep their values
    CHECK(x.value().size() == 4);
}

TEST_CASE("no-grad mode builds no graph") {
    Var x = tu::random_var(Shape{4}, 151, true);
    ad::NoGradGuard ng;
    Var y = ad::sum(ad::mul(x, x));
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("gradient accumulates across reuse") {
    Var x = Var::scalar(3.0, true);
    Var y = ad::add(ad::mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
    ad::backward(y);
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}
