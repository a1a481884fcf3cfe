#pragma once

#include <functional>
#include <string>
#include <vector>

#include "iceseg/ops.hpp"

namespace iceseg {

// Finite-difference verification of the reverse-mode gradients. The analytic
// side runs the regular float graph; the perturbed losses are recomputed in
// double so the difference quotient is not drowned by float rounding.

struct GradCheckEntry {
    std::string op;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    bool all_pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return true;
    }
};

struct GradCheckCase {
    std::string name;
    std::vector<Shape4> input_shapes;
    double tolerance = 1e-4;
    // Builders return the op output (any shape); the harness projects it to a
    // scalar with a fixed random probe. Both precisions run the same math.
    std::function<TensorT<float>(std::vector<TensorT<float>>&)> build_f32;
    std::function<TensorT<double>(std::vector<TensorT<double>>&)> build_f64;
};

// Wraps one generic builder lambda into both precision slots.
template <typename F>
GradCheckCase make_grad_case(std::string name, std::vector<Shape4> shapes, double tol,
                             F builder) {
    GradCheckCase c;
    c.name = std::move(name);
    c.input_shapes = std::move(shapes);
    c.tolerance = tol;
    c.build_f32 = [builder](std::vector<TensorT<float>>& in) { return builder(in); };
    c.build_f64 = [builder](std::vector<TensorT<double>>& in) { return builder(in); };
    return c;
}

namespace detail {

// Input values are drawn in double and routed through float so both precision
// paths start from identical representable numbers.
inline std::vector<double> draw_values(std::int64_t n, std::uint64_t seed) {
    NormalSampler ns(seed);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<double>(static_cast<float>(ns.next()));
    return v;
}

}  // namespace detail

inline GradCheckEntry run_grad_case(const GradCheckCase& c, std::uint64_t seed,
                                    int coords_per_input = 20, double fd_step = 1e-3) {
    GradCheckEntry entry;
    entry.op = c.name;
    entry.tolerance = c.tolerance;

    // shared input values
    std::vector<std::vector<double>> values;
    for (std::size_t i = 0; i < c.input_shapes.size(); ++i)
        values.push_back(detail::draw_values(c.input_shapes[i].numel(),
                                             mix_seed(seed, 0x1157 + i)));

    // analytic gradients on the float graph
    std::vector<TensorT<float>> fin;
    for (std::size_t i = 0; i < c.input_shapes.size(); ++i) {
        std::vector<float> d(values[i].begin(), values[i].end());
        fin.push_back(TensorT<float>::from_data(c.input_shapes[i], std::move(d), true));
    }
    TensorT<float> fout = c.build_f32(fin);

    std::vector<double> probe;
    if (fout.numel() > 1) probe = detail::draw_values(fout.numel(), mix_seed(seed, 0xBEEF));

    TensorT<float> floss;
    if (fout.numel() == 1) {
        floss = fout;
    } else {
        std::vector<float> pf(probe.begin(), probe.end());
        TensorT<float> pt = TensorT<float>::from_data(fout.shape(), std::move(pf));
        floss = sum_all(mul(fout, pt));
    }
    floss.backward();

    // double-precision loss as a function of one perturbed input coordinate
    auto eval_f64 = [&](std::size_t which, std::int64_t coord, double delta) {
        NoGradGuard ng;
        std::vector<TensorT<double>> din;
        for (std::size_t i = 0; i < c.input_shapes.size(); ++i) {
            std::vector<double> d = values[i];
            if (i == which) d[static_cast<std::size_t>(coord)] += delta;
            din.push_back(TensorT<double>::from_data(c.input_shapes[i], std::move(d)));
        }
        TensorT<double> out = c.build_f64(din);
        if (out.numel() == 1) return static_cast<double>(out.item());
        double acc = 0.0;
        const double* p = out.data();
        for (std::int64_t i = 0; i < out.numel(); ++i) acc += p[i] * probe[static_cast<std::size_t>(i)];
        return acc;
    };

    std::mt19937_64 rng(mix_seed(seed, 0xC0DE));
    for (std::size_t i = 0; i < fin.size(); ++i) {
        const std::int64_t n = fin[i].numel();
        const bool has = fin[i].has_grad();
        const int m = static_cast<int>(std::min<std::int64_t>(coords_per_input, n));
        for (int s = 0; s < m; ++s) {
            const std::int64_t coord = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n));
            const double analytic =
                has ? static_cast<double>(fin[i].grad_vec()[static_cast<std::size_t>(coord)]) : 0.0;
            const double lp = eval_f64(i, coord, fd_step);
            const double lm = eval_f64(i, coord, -fd_step);
            const double fd = (lp - lm) / (2.0 * fd_step);
            const double denom = std::max({std::abs(analytic), std::abs(fd), 1.0});
            const double rel = std::abs(analytic - fd) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
    }
    entry.pass = entry.max_rel_err < entry.tolerance;
    return entry;
}

inline GradCheckReport grad_check(const std::vector<GradCheckCase>& cases, std::uint64_t seed,
                                  int coords_per_input = 20, double fd_step = 1e-3) {
    GradCheckReport report;
    for (const auto& c : cases)
        report.entries.push_back(run_grad_case(c, seed, coords_per_input, fd_step));
    return report;
}

}  // namespace iceseg
