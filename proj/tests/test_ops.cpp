#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "hf2vad/nn.hpp"
#include "support/gradcheck.hpp"

using namespace hf2vad;
using hf2vad::testing::gradcheck;

namespace {

// direct convolution oracle, stride/pad general
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
                   int64_t pad) {
    int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t Co = w.dim(0), K = w.dim(2);
    int64_t Ho = (H + 2 * pad - K) / stride + 1;
    int64_t Wo = (W + 2 * pad - K) / stride + 1;
    Tensor y({B, Co, Ho, Wo});
    for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    double acc = b.numel() ? b[co] : 0.0;
                    for (int64_t ci = 0; ci < C; ++ci)
                        for (int64_t ky = 0; ky < K; ++ky)
                            for (int64_t kx = 0; kx < K; ++kx) {
                                int64_t iy = oy * stride - pad + ky;
                                int64_t ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += static_cast<double>(
                                           x[((bi * C + ci) * H + iy) * W + ix]) *
                                       w[((co * C + ci) * K + ky) * K + kx];
                            }
                    y[((bi * Co + co) * Ho + oy) * Wo + ox] = static_cast<float>(acc);
                }
    return y;
}

double dot(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

}  // namespace

TEST_CASE("conv2d matches the direct convolution oracle") {
    Rng rng(42);
    for (auto [stride, pad] : std::vector<std::pair<int64_t, int64_t>>{{1, 1}, {2, 1}, {1, 0}}) {
        Tensor x = Tensor::normal({2, 3, 8, 8}, 0.0f, 1.0f, rng);
        Tensor w = Tensor::normal({4, 3, 3, 3}, 0.0f, 0.5f, rng);
        Tensor b = Tensor::normal({4}, 0.0f, 0.5f, rng);
        Value y = conv2d(make_leaf(x), make_leaf(w), make_leaf(b), {stride, pad});
        Tensor ref = conv_oracle(x, w, b, stride, pad);
        REQUIRE(y->value.shape() == ref.shape());
        for (int64_t i = 0; i < ref.numel(); ++i)
            REQUIRE(y->value[i] == Catch::Approx(ref[i]).margin(2e-4));
    }
}

TEST_CASE("conv_transpose2d is the adjoint of the stride-2 convolution") {
    // <conv(u), v> == <u, convT(v)> for the same weight tensor
    Rng rng(43);
    int64_t cin_big = 3, cout_small = 5;  // conv: (B,3,8,8) -> (B,5,4,4)
    Tensor u = Tensor::normal({2, cin_big, 8, 8}, 0.0f, 1.0f, rng);
    Tensor v = Tensor::normal({2, cout_small, 4, 4}, 0.0f, 1.0f, rng);
    Tensor w = Tensor::normal({cout_small, cin_big, 3, 3}, 0.0f, 0.5f, rng);

    Value conv_u = conv2d(make_leaf(u), make_leaf(w), Value{}, {2, 1});
    // convT weight layout is (Cin, Cout, k, k) where Cin is the small side
    Value convT_v = conv_transpose2d(make_leaf(v), make_leaf(w.reshaped({cout_small, cin_big, 3, 3})), Value{});
    REQUIRE(conv_u->value.shape() == Shape{2, cout_small, 4, 4});
    REQUIRE(convT_v->value.shape() == Shape{2, cin_big, 8, 8});
    CHECK(dot(conv_u->value, v) == Catch::Approx(dot(u, convT_v->value)).epsilon(1e-4));
}

TEST_CASE("conv_transpose2d doubles the spatial size") {
    Rng rng(44);
    ConvTranspose2d up(6, 3, rng);
    Value x = make_leaf(Tensor::normal({1, 6, 5, 7}, 0.0f, 1.0f, rng));
    Value y = up(x);
    CHECK(y->value.shape() == Shape{1, 3, 10, 14});
}

TEST_CASE("batch norm normalizes per channel in training mode") {
    Rng rng(45);
    Tensor x = Tensor::normal({4, 3, 6, 6}, 2.0f, 3.0f, rng);
    Value gamma = make_leaf(Tensor::full({3}, 1.0f));
    Value beta = make_leaf(Tensor({3}));
    BatchNormState st;
    st.running_mean = Tensor({3});
    st.running_var = Tensor::full({3}, 1.0f);
    Value y = batch_norm2d(make_leaf(x), gamma, beta, st, /*training=*/true);
    for (int64_t c = 0; c < 3; ++c) {
        double mu = 0.0, var = 0.0;
        int64_t n = 0;
        for (int64_t b = 0; b < 4; ++b)
            for (int64_t i = 0; i < 36; ++i) {
                mu += y->value[(b * 3 + c) * 36 + i];
                ++n;
            }
        mu /= static_cast<double>(n);
        for (int64_t b = 0; b < 4; ++b)
            for (int64_t i = 0; i < 36; ++i) {
                double d = y->value[(b * 3 + c) * 36 + i] - mu;
                var += d * d;
            }
        var /= static_cast<double>(n);
        CHECK(mu == Catch::Approx(0.0).margin(1e-4));
        CHECK(var == Catch::Approx(1.0).margin(1e-2));
        // running stats moved toward the batch stats
        CHECK(st.running_mean[c] != 0.0f);
    }

    // eval mode is a fixed affine map using running stats: repeatable
    Value e1 = batch_norm2d(make_leaf(x), gamma, beta, st, false);
    Value e2 = batch_norm2d(make_leaf(x), gamma, beta, st, false);
    for (int64_t i = 0; i < e1->value.numel(); ++i) REQUIRE(e1->value[i] == e2->value[i]);
}

TEST_CASE("pixel shuffle rearranges channels into space") {
    Tensor x({1, 4, 1, 1});
    x[0] = 1.0f;
    x[1] = 2.0f;
    x[2] = 3.0f;
    x[3] = 4.0f;
    Value y = pixel_shuffle(make_leaf(x), 2);
    REQUIRE(y->value.shape() == Shape{1, 1, 2, 2});
    CHECK(y->value[0] == 1.0f);  // (0,0) <- channel 0
    CHECK(y->value[1] == 2.0f);  // (0,1) <- channel 1
    CHECK(y->value[2] == 3.0f);  // (1,0) <- channel 2
    CHECK(y->value[3] == 4.0f);  // (1,1) <- channel 3
}

TEST_CASE("concat and slice are inverse on channels") {
    Rng rng(46);
    Tensor a = Tensor::normal({2, 3, 4, 4}, 0.0f, 1.0f, rng);
    Tensor b = Tensor::normal({2, 5, 4, 4}, 0.0f, 1.0f, rng);
    Value cat = concat_channels({make_leaf(a), make_leaf(b)});
    REQUIRE(cat->value.shape() == Shape{2, 8, 4, 4});
    Value sa = slice_channels(cat, 0, 3);
    Value sb = slice_channels(cat, 3, 8);
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(sa->value[i] == a[i]);
    for (int64_t i = 0; i < b.numel(); ++i) REQUIRE(sb->value[i] == b[i]);
}

TEST_CASE("mse gradient equals 2(y_hat - y)/n, checked against finite differences") {
    Rng rng(47);
    Value y = make_leaf(Tensor::normal({2, 6}, 0.0f, 1.0f, rng), false);
    Value yh = make_leaf(Tensor::normal({2, 6}, 0.0f, 1.0f, rng), true);
    Value loss = mse_mean(y, yh);
    backward(loss);
    for (int64_t i = 0; i < 12; ++i) {
        float expect = 2.0f * (yh->value[i] - y->value[i]) / 12.0f;
        CHECK(yh->grad[i] == Catch::Approx(expect).margin(1e-6));
    }
    auto report = gradcheck([&] { return mse_mean(y, yh); }, {{"y_hat", yh}});
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("kl divergence closed form matches hand values") {
    // posterior == prior -> 0
    Rng rng(48);
    Tensor mu = Tensor::normal({2, 3, 1, 1}, 0.0f, 1.0f, rng);
    Tensor lv = Tensor::normal({2, 3, 1, 1}, 0.0f, 0.5f, rng);
    Value kl0 = kl_diag_gaussian(make_leaf(mu), make_leaf(lv), make_leaf(mu), make_leaf(lv));
    CHECK(kl0->value[0] == Catch::Approx(0.0).margin(1e-7));

    // KL(N(1,1) || N(0,1)) = 0.5 per dimension
    Tensor one({1, 1, 1, 1}, 1.0f);
    Tensor zero({1, 1, 1, 1});
    Value kl = kl_diag_gaussian(make_leaf(one), make_leaf(zero), make_leaf(zero),
                                make_leaf(zero));
    CHECK(kl->value[0] == Catch::Approx(0.5).margin(1e-7));
}

TEST_CASE("kl closed form agrees with a monte carlo estimate") {
    Rng rng(49);
    int64_t dims = 6;
    Tensor mq = Tensor::normal({1, dims, 1, 1}, 0.0f, 1.0f, rng);
    Tensor lq = Tensor::normal({1, dims, 1, 1}, 0.0f, 0.5f, rng);
    Tensor mp = Tensor::normal({1, dims, 1, 1}, 0.0f, 1.0f, rng);
    Tensor lp = Tensor::normal({1, dims, 1, 1}, 0.0f, 0.5f, rng);
    double closed = kl_diag_gaussian(make_leaf(mq), make_leaf(lq), make_leaf(mp),
                                     make_leaf(lp))
                        ->value[0];

    // MC estimate of E_q[log q - log p] with 1e5 samples
    const int64_t n_samples = 100000;
    double acc = 0.0, acc2 = 0.0;
    for (int64_t s = 0; s < n_samples; ++s) {
        double term = 0.0;
        for (int64_t d = 0; d < dims; ++d) {
            double sq = std::exp(0.5 * lq[d]);
            double z = mq[d] + sq * rng.normal();
            double logq = -0.5 * (lq[d] + (z - mq[d]) * (z - mq[d]) / std::exp(lq[d]));
            double logp = -0.5 * (lp[d] + (z - mp[d]) * (z - mp[d]) / std::exp(lp[d]));
            term += logq - logp;
        }
        acc += term;
        acc2 += term * term;
    }
    double mc = acc / n_samples;
    double se = std::sqrt((acc2 / n_samples - mc * mc) / n_samples);
    INFO("closed=" << closed << " mc=" << mc << " se=" << se);
    CHECK(std::abs(closed - mc) < 3.0 * se + 1e-6);
}

TEST_CASE("gradient loss hand cases") {
    // X = [[0,1],[0,1]], X_hat = 0 -> two unit horizontal mismatches
    Tensor x({1, 1, 2, 2});
    x[1] = 1.0f;
    x[3] = 1.0f;
    Tensor zeros({1, 1, 2, 2});
    CHECK(gradient_loss(make_leaf(x), make_leaf(zeros))->value[0] == Catch::Approx(2.0));
    // identical inputs -> 0
    CHECK(gradient_loss(make_leaf(x), make_leaf(x))->value[0] == 0.0f);
    // two different constants -> both gradient fields vanish
    Tensor c1({1, 1, 3, 3}, 0.3f), c2({1, 1, 3, 3}, 0.9f);
    CHECK(gradient_loss(make_leaf(c1), make_leaf(c2))->value[0] == 0.0f);
}

TEST_CASE("gradient loss is nonnegative and zero only for matching magnitudes") {
    Rng rng(50);
    for (int iter = 0; iter < 20; ++iter) {
        Tensor a = Tensor::normal({1, 2, 5, 5}, 0.0f, 1.0f, rng);
        Tensor b = Tensor::normal({1, 2, 5, 5}, 0.0f, 1.0f, rng);
        CHECK(gradient_loss(make_leaf(a), make_leaf(b))->value[0] >= 0.0f);
    }
    // mirrored image has identical gradient magnitudes
    Tensor a = Tensor::normal({1, 1, 4, 4}, 0.0f, 1.0f, rng);
    Tensor m({1, 1, 4, 4});
    for (int64_t i = 0; i < 16; ++i) m[i] = -a[i];
    CHECK(gradient_loss(make_leaf(a), make_leaf(m))->value[0] == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("deterministic sampling returns the mean bit-exactly") {
    Rng rng(51);
    Tensor mu = Tensor::normal({2, 4, 2, 2}, 0.0f, 1.0f, rng);
    Tensor lv = Tensor::normal({2, 4, 2, 2}, 0.0f, 1.0f, rng);
    Value z1 = gaussian_sample(make_leaf(mu), make_leaf(lv), nullptr);
    Value z2 = gaussian_sample(make_leaf(mu), make_leaf(lv), nullptr);
    for (int64_t i = 0; i < mu.numel(); ++i) {
        REQUIRE(z1->value[i] == mu[i]);
        REQUIRE(z1->value[i] == z2->value[i]);
    }
}

TEST_CASE("clamped logvar at -10 makes stochastic samples hug the mean") {
    Rng rng(52);
    Tensor mu = Tensor::full({1, 1, 1, 1}, 0.8f);
    Tensor lv = Tensor::full({1, 1, 1, 1}, -10.0f);
    double mean_abs_dev = 0.0;
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        Tensor eps({1, 1, 1, 1});
        eps[0] = rng.normal();
        Value z = gaussian_sample(make_leaf(mu), make_leaf(lv), &eps);
        mean_abs_dev += std::abs(z->value[0] - 0.8f);
    }
    mean_abs_dev /= n;
    // sigma = e^{-5} ~ 6.7e-3, mean |dev| = sigma*sqrt(2/pi) ~ 5.4e-3
    CHECK(mean_abs_dev < 0.01);
}

TEST_CASE("stochastic sample mean converges to the distribution mean") {
    Rng rng(53);
    const int64_t n = 100000;
    Tensor mu = Tensor::full({1, 1, 1, 1}, 1.7f);
    Tensor lv = Tensor::full({1, 1, 1, 1}, 0.6f);  // sigma = e^{0.3}
    double sigma = std::exp(0.3);
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        Tensor eps({1, 1, 1, 1});
        eps[0] = rng.normal();
        acc += gaussian_sample(make_leaf(mu), make_leaf(lv), &eps)->value[0];
    }
    double mean = acc / static_cast<double>(n);
    CHECK(std::abs(mean - 1.7) < 3.0 * sigma / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("plumbing ops pass finite-difference gradient checks") {
    Rng rng(54);
    Value x = make_leaf(Tensor::normal({2, 3, 4, 4}, 0.0f, 1.0f, rng), true);
    Value w = make_leaf(Tensor::normal({5, 3, 3, 3}, 0.0f, 0.3f, rng), true);
    Value b = make_leaf(Tensor::normal({5}, 0.0f, 0.3f, rng), true);
    Value target = make_leaf(Tensor::normal({2, 5, 4, 4}, 0.0f, 1.0f, rng));
    auto conv_loss = [&] { return mse_mean(target, conv2d(x, w, b, {1, 1})); };
    auto r1 = gradcheck(conv_loss, {{"x", x}, {"w", w}, {"b", b}});
    INFO("conv worst=" << r1.worst_param);
    CHECK(r1.max_rel_err < 1e-3);

    Value wt = make_leaf(Tensor::normal({3, 2, 3, 3}, 0.0f, 0.3f, rng), true);
    Value bt = make_leaf(Tensor::normal({2}, 0.0f, 0.3f, rng), true);
    Value xt = make_leaf(Tensor::normal({2, 3, 3, 3}, 0.0f, 1.0f, rng), true);
    Value target2 = make_leaf(Tensor::normal({2, 2, 6, 6}, 0.0f, 1.0f, rng));
    auto deconv_loss = [&] { return mse_mean(target2, conv_transpose2d(xt, wt, bt)); };
    auto r2 = gradcheck(deconv_loss, {{"x", xt}, {"w", wt}, {"b", bt}});
    INFO("deconv worst=" << r2.worst_param);
    CHECK(r2.max_rel_err < 1e-3);

    // batch norm (training mode) + relu + pixel shuffle chained
    Value gamma = make_leaf(Tensor::uniform({4}, 0.5f, 1.5f, rng), true);
    Value beta = make_leaf(Tensor::normal({4}, 0.0f, 0.2f, rng), true);
    BatchNormState st;
    st.running_mean = Tensor({4});
    st.running_var = Tensor::full({4}, 1.0f);
    Value xb = make_leaf(Tensor::normal({3, 4, 4, 4}, 0.5f, 1.0f, rng), true);
    Value target3 = make_leaf(Tensor::normal({3, 1, 8, 8}, 0.0f, 1.0f, rng));
    auto bn_loss = [&] {
        Value h = batch_norm2d(xb, gamma, beta, st, true);
        return mse_mean(target3, pixel_shuffle(relu(h), 2));
    };
    auto r3 = gradcheck(bn_loss, {{"x", xb}, {"gamma", gamma}, {"beta", beta}});
    INFO("bn worst=" << r3.worst_param);
    CHECK(r3.max_rel_err < 1e-3);
}

TEST_CASE("adam minimizes a simple quadratic") {
    Value p = make_leaf(Tensor::full({3}, 4.0f), true);
    Adam opt({{"p", p}});
    Tensor target({3});
    target[0] = 1.0f;
    target[1] = -2.0f;
    target[2] = 0.5f;
    Value t = make_leaf(target);
    for (int step = 0; step < 600; ++step) {
        opt.zero_grad();
        Value loss = mse_mean(t, p);
        backward(loss);
        opt.step(0.05f);
    }
    for (int64_t i = 0; i < 3; ++i) CHECK(p->value[i] == Catch::Approx(target[i]).margin(1e-2));
}
