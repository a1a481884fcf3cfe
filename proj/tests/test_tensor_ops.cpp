#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "iceseg/ops.hpp"
#include "oracles.hpp"

using namespace iceseg;

namespace {

Tensor random_tensor(Shape4 s, std::uint64_t seed, bool rg = false) {
    NormalSampler ns(seed);
    std::vector<float> v(static_cast<std::size_t>(s.numel()));
    for (auto& x : v) x = static_cast<float>(ns.next());
    return Tensor::from_data(s, std::move(v), rg);
}

std::vector<double> to_double(const Tensor& t) {
    return std::vector<double>(t.data(), t.data() + t.numel());
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
    Tensor in = random_tensor({1, 1, 5, 5}, 7);
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {1.0f});
    ConvSpec sp{.in_channels = 1, .out_channels = 1};
    Tensor out = conv2d(in, w, sp);
    REQUIRE(out.shape() == in.shape());
    for (std::int64_t i = 0; i < in.numel(); ++i) CHECK(out.data()[i] == in.data()[i]);
}

TEST_CASE("conv2d dilated size formula") {
    Tensor in = random_tensor({1, 1, 5, 5}, 9);
    Tensor w = random_tensor({1, 1, 3, 3}, 10);
    ConvSpec sp{.in_channels = 1, .out_channels = 1, .kh = 3, .kw = 3, .dh = 2, .dw = 2};
    Tensor out = conv2d(in, w, sp);
    CHECK(out.shape() == Shape4{1, 1, 1, 1});
}

TEST_CASE("conv2d matches direct convolution oracle") {
    Tensor in = random_tensor({1, 2, 8, 8}, 21);
    Tensor w = random_tensor({4, 2, 3, 3}, 22);
    Tensor b = random_tensor({1, 4, 1, 1}, 23);
    ConvSpec sp{.in_channels = 2, .out_channels = 4, .kh = 3, .kw = 3,
                .ph = 2, .pw = 2, .dh = 2, .dw = 2, .bias = true};
    Tensor out = conv2d(in, w, &b, sp);
    std::vector<double> bias_d = to_double(b);
    std::vector<double> ref = oracle::conv2d(to_double(in), 1, 2, 8, 8, to_double(w), 4, 3, 3,
                                             &bias_d, 1, 1, 2, 2, 2, 2);
    REQUIRE(out.numel() == static_cast<std::int64_t>(ref.size()));
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double rel = std::abs(out.data()[i] - ref[i]) / std::max(1.0, std::abs(ref[i]));
        CHECK(rel < 1e-5);
    }
}

TEST_CASE("conv2d dilation equals zero-inflated kernel exactly") {
    const int d = 3;
    Tensor in = random_tensor({2, 2, 16, 16}, 31);
    Tensor w = random_tensor({3, 2, 3, 3}, 32);
    ConvSpec sp{.in_channels = 2, .out_channels = 3, .kh = 3, .kw = 3,
                .ph = d, .pw = d, .dh = d, .dw = d};
    Tensor out = conv2d(in, w, sp);

    const int ke = d * 2 + 1;  // inflated extent for k=3
    Tensor wi = Tensor::zeros({3, 2, ke, ke});
    for (int oc = 0; oc < 3; ++oc)
        for (int ic = 0; ic < 2; ++ic)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    wi.at(oc, ic, ky * d, kx * d) = w.at(oc, ic, ky, kx);
    ConvSpec spi{.in_channels = 2, .out_channels = 3, .kh = ke, .kw = ke, .ph = d, .pw = d};
    Tensor outi = conv2d(in, wi, spi);

    REQUIRE(out.shape() == outi.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == outi.data()[i]);
}

TEST_CASE("conv/pool output shapes satisfy the closed-form size formula") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 40; ++trial) {
        const int h = 5 + static_cast<int>(rng() % 20);
        const int w = 5 + static_cast<int>(rng() % 20);
        const int k = 1 + static_cast<int>(rng() % 4);
        const int s = 1 + static_cast<int>(rng() % 3);
        const int p = static_cast<int>(rng() % 3);
        const int dil = 1 + static_cast<int>(rng() % 3);
        const int eff = dil * (k - 1) + 1;
        if (h + 2 * p < eff || w + 2 * p < eff) continue;
        // independent enumeration of valid anchor positions
        int oh = 0;
        for (int y = -p; y + eff <= h + p; y += s) ++oh;
        int ow = 0;
        for (int x = -p; x + eff <= w + p; x += s) ++ow;

        Tensor in = random_tensor({1, 1, h, w}, 1000 + trial);
        Tensor wt = random_tensor({1, 1, k, k}, 2000 + trial);
        ConvSpec sp{.in_channels = 1, .out_channels = 1, .kh = k, .kw = k,
                    .sh = s, .sw = s, .ph = p, .pw = p, .dh = dil, .dw = dil};
        Tensor out = conv2d(in, wt, sp);
        CHECK(out.h() == oh);
        CHECK(out.w() == ow);
    }
}

TEST_CASE("conv2d shape errors name the offending axis") {
    Tensor in = random_tensor({1, 3, 8, 8}, 5);
    Tensor w = random_tensor({4, 2, 3, 3}, 6);
    ConvSpec sp{.in_channels = 2, .out_channels = 4, .kh = 3, .kw = 3};
    CHECK_THROWS_WITH_AS(conv2d(in, w, sp),
                         doctest::Contains("axis C"), std::runtime_error);
}

TEST_CASE("batch_norm2d standardized input is near identity") {
    // build an input with exact zero mean / unit variance per channel
    const int n = 64;
    std::vector<float> v;
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < n; ++i) v.push_back(i % 2 == 0 ? 1.0f : -1.0f);
    Tensor in = Tensor::from_data({1, 2, 8, 8}, std::move(v));
    BatchNormState st = BatchNormState::create(2);
    Tensor out = batch_norm2d(in, st, true);
    for (std::int64_t i = 0; i < in.numel(); ++i)
        CHECK(std::abs(out.data()[i] - in.data()[i]) < 1e-3f);
}

TEST_CASE("batch_norm2d eval mode is the stated affine map") {
    Tensor in = random_tensor({2, 3, 4, 4}, 77);
    BatchNormState st = BatchNormState::create(3, 0.1f, 1e-12f);
    std::fill(st.gamma.data(), st.gamma.data() + 3, 2.0f);
    std::fill(st.beta.data(), st.beta.data() + 3, 1.0f);
    Tensor out = batch_norm2d(in, st, false);
    for (std::int64_t i = 0; i < in.numel(); ++i)
        CHECK(out.data()[i] == doctest::Approx(2.0f * in.data()[i] + 1.0f).epsilon(1e-6));
}

TEST_CASE("batch_norm2d train statistics match a direct oracle") {
    Tensor in = random_tensor({4, 3, 16, 16}, 78);
    BatchNormState st = BatchNormState::create(3);
    Tensor out = batch_norm2d(in, st, true);
    const std::int64_t plane = 16 * 16;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> vals;
        for (int n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < plane; ++i)
                vals.push_back(out.at(n, c, static_cast<int>(i / 16), static_cast<int>(i % 16)));
        double m, s;
        oracle::mean_std(vals, m, s);
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(s * s - 1.0) < 1e-3);
    }
}

TEST_CASE("batch_norm2d channel mismatch error") {
    Tensor in = random_tensor({1, 3, 4, 4}, 79);
    BatchNormState st = BatchNormState::create(2);
    CHECK_THROWS_AS(batch_norm2d(in, st, true), std::runtime_error);
}

TEST_CASE("pool2d trivial kernels") {
    Tensor in = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor avg = pool2d(in, PoolKind::Avg, 2, 2, 2, 2);
    CHECK(avg.item() == 2.5f);
    Tensor mx = pool2d(in, PoolKind::Max, 2, 2, 2, 2);
    CHECK(mx.item() == 4.0f);
}

TEST_CASE("pool2d avg matches loop oracle exactly on 1x3x48x48") {
    Tensor in = random_tensor({1, 3, 48, 48}, 80);
    Tensor out = pool2d(in, PoolKind::Avg, 2, 2, 2, 2);
    CHECK(out.shape() == Shape4{1, 3, 24, 24});
    std::vector<float> inv(in.data(), in.data() + in.numel());
    std::vector<float> ref = oracle::pool(inv, 1, 3, 48, 48, false, 2, 2, 2, 2, 0, 0);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        CHECK(out.data()[i] == ref[static_cast<std::size_t>(i)]);
}

TEST_CASE("pool2d degenerate kernel error") {
    Tensor in = random_tensor({1, 1, 4, 4}, 81);
    CHECK_THROWS_AS(pool2d(in, PoolKind::Max, 0, 2, 1, 1), std::runtime_error);
}

TEST_CASE("bilinear_resize constant input stays constant") {
    Tensor in = Tensor::filled({1, 2, 3, 5}, 3.25f);
    Tensor out = bilinear_resize(in, 7, 11);
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 3.25f);
}

TEST_CASE("bilinear_resize identity is bitwise") {
    Tensor in = random_tensor({1, 3, 6, 9}, 82);
    Tensor out = bilinear_resize(in, 6, 9);
    for (std::int64_t i = 0; i < in.numel(); ++i) CHECK(out.data()[i] == in.data()[i]);
}

TEST_CASE("bilinear_resize 2x2 to 4x4 matches the scalar reference") {
    Tensor in = Tensor::from_data({1, 1, 2, 2}, {0, 1, 2, 3});
    Tensor out = bilinear_resize(in, 4, 4);
    std::vector<double> ref = oracle::bilinear(to_double(in), 1, 1, 2, 2, 4, 4);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        CHECK(std::abs(out.data()[i] - ref[static_cast<std::size_t>(i)]) < 1e-6);
}

TEST_CASE("relu trivials") {
    Tensor in = Tensor::from_data({1, 1, 1, 3}, {-1, 0, 2});
    Tensor out = relu(in);
    CHECK(out.data()[0] == 0.0f);
    CHECK(out.data()[1] == 0.0f);
    CHECK(out.data()[2] == 2.0f);

    Tensor neg = Tensor::filled({1, 2, 3, 3}, -5.0f);
    Tensor zn = relu(neg);
    for (std::int64_t i = 0; i < zn.numel(); ++i) CHECK(zn.data()[i] == 0.0f);
}

TEST_CASE("softmax_cross_entropy uniform logits give ln K") {
    Tensor logits = Tensor::zeros({1, 6, 2, 2});
    LabelBatch t{1, 2, 2, {0, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel}};
    Loss loss = softmax_cross_entropy(logits, t);
    CHECK(loss.valid_pixels == 1);
    CHECK(loss.item() == doctest::Approx(std::log(6.0)).epsilon(1e-6));
}

TEST_CASE("softmax_cross_entropy empty loss is an explicit error") {
    Tensor logits = Tensor::zeros({1, 3, 2, 2});
    LabelBatch t{1, 2, 2, {kIgnoreLabel, kIgnoreLabel, kIgnoreLabel, kIgnoreLabel}};
    CHECK_THROWS_WITH_AS(softmax_cross_entropy(logits, t), doctest::Contains("empty loss"),
                         std::runtime_error);
}

TEST_CASE("softmax_cross_entropy matches the per-pixel oracle") {
    Tensor logits = random_tensor({1, 3, 4, 4}, 90);
    std::vector<std::uint8_t> tv(16);
    std::mt19937_64 rng(91);
    for (auto& x : tv) x = rng() % 4 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng() % 3);
    tv[0] = 1;  // at least one valid pixel
    LabelBatch t{1, 4, 4, tv};
    Loss loss = softmax_cross_entropy(logits, t);
    std::int64_t valid = 0;
    const double ref = oracle::cross_entropy(to_double(logits), 1, 3, 4, 4, tv, kIgnoreLabel, &valid);
    CHECK(loss.valid_pixels == valid);
    CHECK(std::abs(loss.item() - ref) < 1e-6);
}

TEST_CASE("softmax_cross_entropy is invariant to per-pixel logit shifts") {
    Tensor logits = random_tensor({2, 4, 3, 3}, 92);
    std::vector<std::uint8_t> tv(2 * 9);
    std::mt19937_64 rng(93);
    for (auto& x : tv) x = static_cast<std::uint8_t>(rng() % 4);
    LabelBatch t{2, 3, 3, tv};
    Loss a = softmax_cross_entropy(logits, t);

    Tensor shifted = logits.detach();
    std::mt19937_64 rng2(94);
    for (int n = 0; n < 2; ++n)
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 3; ++x) {
                const float c = static_cast<float>(uniform01(rng2) * 10.0 - 5.0);
                for (int k = 0; k < 4; ++k) shifted.at(n, k, y, x) += c;
            }
    Loss b = softmax_cross_entropy(shifted, t);
    CHECK(std::abs(a.item() - b.item()) < 1e-6);
}

TEST_CASE("backward of sum gives all-ones") {
    Tensor x = random_tensor({2, 3, 4, 5}, 95, true);
    Tensor loss = sum_all(x);
    loss.backward();
    REQUIRE(x.has_grad());
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad_vec()[static_cast<std::size_t>(i)] == 1.0f);
}

TEST_CASE("backward of sum(x^2)/2 gives x") {
    Tensor x = random_tensor({1, 2, 3, 3}, 96, true);
    Tensor loss = scale(sum_all(mul(x, x)), 0.5f);
    loss.backward();
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(x.grad_vec()[static_cast<std::size_t>(i)] ==
              doctest::Approx(x.data()[i]).epsilon(1e-6));
}

TEST_CASE("repeated backward accumulates") {
    Tensor x = random_tensor({1, 1, 2, 2}, 97, true);
    Tensor loss = sum_all(x);
    loss.backward();
    loss.backward();
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad_vec()[static_cast<std::size_t>(i)] == 2.0f);
}

TEST_CASE("backward through a detached graph is an error") {
    Tensor x = random_tensor({1, 1, 1, 1}, 98, true);
    Tensor d = sum_all(x).detach();
    CHECK_THROWS_AS(d.backward(), std::runtime_error);
}

TEST_CASE("eval-mode forward is deterministic bitwise") {
    Tensor in = random_tensor({2, 3, 32, 32}, 99);
    Tensor w1 = random_tensor({8, 3, 3, 3}, 100);
    Tensor w2 = random_tensor({4, 8, 3, 3}, 101);
    ConvSpec s1{.in_channels = 3, .out_channels = 8, .kh = 3, .kw = 3, .ph = 1, .pw = 1};
    ConvSpec s2{.in_channels = 8, .out_channels = 4, .kh = 3, .kw = 3, .ph = 1, .pw = 1};
    BatchNormState st = BatchNormState::create(8);

    auto run = [&] {
        NoGradGuard ng;
        Tensor h = relu(batch_norm2d(conv2d(in, w1, s1), st, false));
        return conv2d(bilinear_resize(pool2d(h, PoolKind::Max, 2, 2, 2, 2), 32, 32), w2, s2);
    };
    Tensor a = run();
    Tensor b = run();
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}
