#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "iceseg/gradcheck.hpp"

using namespace iceseg;

namespace {

template <typename T>
using Vec = std::vector<TensorT<T>>;

std::vector<GradCheckCase> standard_cases() {
    std::vector<GradCheckCase> cases;

    cases.push_back(make_grad_case(
        "conv2d_dilated", {{2, 2, 9, 9}, {3, 2, 3, 3}, {1, 3, 1, 1}}, 1e-4, [](auto& in) {
            ConvSpec sp{.in_channels = 2, .out_channels = 3, .kh = 3, .kw = 3,
                        .ph = 2, .pw = 2, .dh = 2, .dw = 2, .bias = true};
            return conv2d(in[0], in[1], &in[2], sp);
        }));

    cases.push_back(make_grad_case(
        "conv2d_strided", {{1, 3, 10, 10}, {4, 3, 3, 3}}, 1e-4, [](auto& in) {
            ConvSpec sp{.in_channels = 3, .out_channels = 4, .kh = 3, .kw = 3,
                        .sh = 2, .sw = 2, .ph = 1, .pw = 1};
            return conv2d(in[0], in[1], sp);
        }));

    cases.push_back(make_grad_case(
        "batch_norm2d_train", {{3, 2, 6, 6}, {1, 2, 1, 1}, {1, 2, 1, 1}}, 1e-3, [](auto& in) {
            using T = std::remove_reference_t<decltype(in[0].data()[0])>;
            BatchNormStateT<T> st = BatchNormStateT<T>::create(2);
            st.gamma = in[1];
            st.beta = in[2];
            return batch_norm2d(in[0], st, true);
        }));

    cases.push_back(make_grad_case(
        "batch_norm2d_eval", {{2, 2, 5, 5}, {1, 2, 1, 1}, {1, 2, 1, 1}}, 1e-4, [](auto& in) {
            using T = std::remove_reference_t<decltype(in[0].data()[0])>;
            BatchNormStateT<T> st = BatchNormStateT<T>::create(2);
            st.gamma = in[1];
            st.beta = in[2];
            st.running_mean = {T(0.3), T(-0.2)};
            st.running_var = {T(1.5), T(0.7)};
            return batch_norm2d(in[0], st, false);
        }));

    cases.push_back(make_grad_case("max_pool", {{2, 3, 8, 8}}, 1e-4, [](auto& in) {
        return pool2d(in[0], PoolKind::Max, 3, 3, 2, 2, 1, 1);
    }));

    cases.push_back(make_grad_case("avg_pool", {{2, 3, 8, 8}}, 1e-4, [](auto& in) {
        return pool2d(in[0], PoolKind::Avg, 2, 2, 2, 2);
    }));

    cases.push_back(make_grad_case("bilinear_up", {{1, 2, 5, 7}}, 1e-4, [](auto& in) {
        return bilinear_resize(in[0], 11, 13);
    }));

    cases.push_back(make_grad_case("bilinear_down", {{1, 2, 12, 10}}, 1e-4, [](auto& in) {
        return bilinear_resize(in[0], 5, 7);
    }));

    cases.push_back(make_grad_case("relu", {{2, 2, 6, 6}}, 1e-4, [](auto& in) {
        return relu(in[0]);
    }));

    cases.push_back(make_grad_case("residual_add", {{1, 4, 6, 6}, {1, 4, 6, 6}}, 1e-4, [](auto& in) {
        return add(relu(in[0]), in[1]);
    }));

    cases.push_back(make_grad_case("softmax_cross_entropy", {{1, 3, 5, 5}}, 1e-4, [](auto& in) {
        LabelBatch t;
        t.n = 1;
        t.h = 5;
        t.w = 5;
        std::mt19937_64 rng(4242);
        t.v.resize(25);
        for (auto& x : t.v)
            x = rng() % 5 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng() % 3);
        t.v[3] = 2;
        return softmax_cross_entropy(in[0], t).value;
    }));

    return cases;
}

}  // namespace

TEST_CASE("per-op finite difference checks pass at the stated tolerances") {
    GradCheckReport report = grad_check(standard_cases(), 12345);
    for (const auto& e : report.entries) {
        INFO(e.op, " max_rel_err=", e.max_rel_err, " tol=", e.tolerance);
        CHECK(e.pass);
    }
}

TEST_CASE("relu gradient mask equals the indicator of positive inputs") {
    std::vector<float> v = {-2.f, -0.5f, 0.f, 0.25f, 1.f, 3.f};
    Tensor x = Tensor::from_data({1, 1, 1, 6}, v, true);
    Tensor loss = sum_all(relu(x));
    loss.backward();
    for (std::size_t i = 0; i < v.size(); ++i)
        CHECK(x.grad_vec()[i] == (v[i] > 0.f ? 1.0f : 0.0f));
}

TEST_CASE("grad_check report lists one entry per operation") {
    auto cases = standard_cases();
    GradCheckReport report = grad_check(cases, 777, 8);
    CHECK(report.entries.size() == cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) CHECK(report.entries[i].op == cases[i].name);
}
