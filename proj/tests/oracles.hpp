#pragma once

// Brute-force reference implementations used as independent oracles by the
// test suites. Everything here is straight nested loops in double precision,
// written without reference to the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "iceseg/ops.hpp"

namespace oracle {

// direct dense convolution, zero padding
inline std::vector<double> conv2d(const std::vector<double>& in, int N, int C, int H, int W,
                                  const std::vector<double>& wt, int OC, int kh, int kw,
                                  const std::vector<double>* bias, int sh, int sw, int ph,
                                  int pw, int dh, int dw) {
    const int OH = (H + 2 * ph - (dh * (kh - 1) + 1)) / sh + 1;
    const int OW = (W + 2 * pw - (dw * (kw - 1) + 1)) / sw + 1;
    std::vector<double> out(static_cast<std::size_t>(N) * OC * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < OC; ++oc)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = bias ? (*bias)[oc] : 0.0;
                    for (int ic = 0; ic < C; ++ic)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * sh - ph + ky * dh;
                                const int ix = ox * sw - pw + kx * dw;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += in[((static_cast<std::size_t>(n) * C + ic) * H + iy) * W + ix] *
                                       wt[((static_cast<std::size_t>(oc) * C + ic) * kh + ky) * kw + kx];
                            }
                    out[((static_cast<std::size_t>(n) * OC + oc) * OH + oy) * OW + ox] = acc;
                }
    return out;
}

// T matches the implementation's scalar type so mean arithmetic is comparable
template <typename T>
inline std::vector<T> pool(const std::vector<T>& in, int N, int C, int H, int W,
                           bool is_max, int kh, int kw, int sh, int sw, int ph, int pw) {
    const int OH = (H + 2 * ph - kh) / sh + 1;
    const int OW = (W + 2 * pw - kw) / sw + 1;
    std::vector<T> out(static_cast<std::size_t>(N) * C * OH * OW, T(0));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    T best = -std::numeric_limits<T>::infinity(), sum = T(0);
                    int cnt = 0;
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * sh - ph + ky;
                            const int ix = ox * sw - pw + kx;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            const T v =
                                in[((static_cast<std::size_t>(n) * C + c) * H + iy) * W + ix];
                            best = std::max(best, v);
                            sum += v;
                            ++cnt;
                        }
                    out[((static_cast<std::size_t>(n) * C + c) * OH + oy) * OW + ox] =
                        is_max ? best : sum / static_cast<T>(cnt);
                }
    return out;
}

// scalar transcription of the stated half-pixel-center convention
inline std::vector<double> bilinear(const std::vector<double>& in, int N, int C, int H, int W,
                                    int OH, int OW) {
    std::vector<double> out(static_cast<std::size_t>(N) * C * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double sy = (oy + 0.5) * (static_cast<double>(H) / OH) - 0.5;
                    double sx = (ox + 0.5) * (static_cast<double>(W) / OW) - 0.5;
                    sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
                    sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
                    const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
                    const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
                    const double fy = sy - y0, fx = sx - x0;
                    auto v = [&](int y, int x) {
                        return in[((static_cast<std::size_t>(n) * C + c) * H + y) * W + x];
                    };
                    out[((static_cast<std::size_t>(n) * C + c) * OH + oy) * OW + ox] =
                        v(y0, x0) * (1 - fy) * (1 - fx) + v(y0, x1) * (1 - fy) * fx +
                        v(y1, x0) * fy * (1 - fx) + v(y1, x1) * fy * fx;
                }
    return out;
}

// mean negative log-softmax over non-ignored pixels, one pixel at a time
inline double cross_entropy(const std::vector<double>& logits, int N, int K, int H, int W,
                            const std::vector<std::uint8_t>& targets, int ignore,
                            std::int64_t* valid_out = nullptr) {
    double total = 0.0;
    std::int64_t valid = 0;
    for (int n = 0; n < N; ++n)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int t = targets[(static_cast<std::size_t>(n) * H + y) * W + x];
                if (t == ignore) continue;
                double m = -1e300;
                for (int k = 0; k < K; ++k)
                    m = std::max(m, logits[((static_cast<std::size_t>(n) * K + k) * H + y) * W + x]);
                double se = 0.0;
                for (int k = 0; k < K; ++k)
                    se += std::exp(logits[((static_cast<std::size_t>(n) * K + k) * H + y) * W + x] - m);
                total += std::log(se) -
                         (logits[((static_cast<std::size_t>(n) * K + t) * H + y) * W + x] - m);
                ++valid;
            }
    if (valid_out) *valid_out = valid;
    return valid > 0 ? total / valid : 0.0;
}

// two-pass mean / population std
inline void mean_std(const std::vector<double>& v, double& mean, double& stddev) {
    double s = 0.0;
    for (double x : v) s += x;
    mean = s / static_cast<double>(v.size());
    double q = 0.0;
    for (double x : v) q += (x - mean) * (x - mean);
    stddev = std::sqrt(q / static_cast<double>(v.size()));
}

// confusion counts + derived scores recomputed from scratch
struct MetricsOracle {
    std::vector<std::int64_t> cm;  // K x K, row = truth
    int K = 0;
    double accuracy = 0, macro_f1 = 0, weighted_f1 = 0, macro_iou = 0, weighted_iou = 0,
           kappa = 0;
};

inline MetricsOracle metrics(const std::vector<std::uint8_t>& pred,
                             const std::vector<std::uint8_t>& truth, int K,
                             int ignore = 255) {
    MetricsOracle r;
    r.K = K;
    r.cm.assign(static_cast<std::size_t>(K) * K, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (truth[i] == ignore) continue;
        r.cm[static_cast<std::size_t>(truth[i]) * K + pred[i]]++;
    }
    std::vector<double> rowsum(K, 0), colsum(K, 0);
    double total = 0, diag = 0;
    for (int a = 0; a < K; ++a)
        for (int b = 0; b < K; ++b) {
            rowsum[a] += static_cast<double>(r.cm[static_cast<std::size_t>(a) * K + b]);
            colsum[b] += static_cast<double>(r.cm[static_cast<std::size_t>(a) * K + b]);
            total += static_cast<double>(r.cm[static_cast<std::size_t>(a) * K + b]);
            if (a == b) diag += static_cast<double>(r.cm[static_cast<std::size_t>(a) * K + b]);
        }
    if (total == 0) return r;
    r.accuracy = diag / total;
    double sf = 0, swf = 0, si = 0, swi = 0, wsum = 0;
    int present = 0;
    for (int c = 0; c < K; ++c) {
        if (rowsum[c] == 0 && colsum[c] == 0) continue;
        ++present;
        const double tp = static_cast<double>(r.cm[static_cast<std::size_t>(c) * K + c]);
        const double prec = colsum[c] > 0 ? tp / colsum[c] : 0.0;
        const double rec = rowsum[c] > 0 ? tp / rowsum[c] : 0.0;
        const double f1 = (prec + rec) > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        const double denom = rowsum[c] + colsum[c] - tp;
        const double iou = denom > 0 ? tp / denom : 0.0;
        sf += f1;
        si += iou;
        swf += f1 * rowsum[c];
        swi += iou * rowsum[c];
        wsum += rowsum[c];
    }
    r.macro_f1 = present ? sf / present : 0.0;
    r.macro_iou = present ? si / present : 0.0;
    r.weighted_f1 = wsum > 0 ? swf / wsum : 0.0;
    r.weighted_iou = wsum > 0 ? swi / wsum : 0.0;
    double pe = 0;
    for (int c = 0; c < K; ++c) pe += (rowsum[c] / total) * (colsum[c] / total);
    r.kappa = pe < 1.0 ? (r.accuracy - pe) / (1.0 - pe) : 0.0;
    return r;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n, 0.0);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> rx = ranks(xs), ry = ranks(ys);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(rx.size());
    my /= static_cast<double>(ry.size());
    double num = 0, dx = 0, dy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    return num / std::sqrt(dx * dy);
}

}  // namespace oracle
