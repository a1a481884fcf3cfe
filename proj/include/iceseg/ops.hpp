#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "iceseg/tensor.hpp"

namespace iceseg {

// ---- conv spec --------------------------------------------------------------

struct ConvSpec {
    int in_channels = 0, out_channels = 0;
    int kh = 1, kw = 1;
    int sh = 1, sw = 1;
    int ph = 0, pw = 0;
    int dh = 1, dw = 1;
    bool bias = false;
};

inline int conv_out_extent(int in, int pad, int k, int dil, int stride) {
    const int eff = dil * (k - 1) + 1;
    return (in + 2 * pad - eff) / stride + 1;
}

// ---- deterministic inner kernels --------------------------------------------

namespace detail {

// C[M x N] += A[M x K] * B[K x N], where rows of C are ldc apart. Reduction
// order over k is ascending for every output element, independent of thread
// count (threads split N).
template <typename T>
void gemm_accum(int M, int K, int N, const T* A, const T* B, T* C, std::int64_t ldc) {
    constexpr int kColBlock = 512;
    constexpr int kKBlock = 256;
    const int nblocks = (N + kColBlock - 1) / kColBlock;
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(M) * K * N > (1 << 18))
    for (int jb = 0; jb < nblocks; ++jb) {
        const int j0 = jb * kColBlock;
        const int j1 = std::min(N, j0 + kColBlock);
        const int jlen = j1 - j0;
        for (int kb = 0; kb < K; kb += kKBlock) {
            const int ke = std::min(K, kb + kKBlock);
            for (int m = 0; m < M; ++m) {
                const T* arow = A + static_cast<std::size_t>(m) * K;
                T* crow = C + static_cast<std::size_t>(m) * ldc + j0;
                for (int k = kb; k < ke; ++k) {
                    const T a = arow[k];
                    const T* brow = B + static_cast<std::size_t>(k) * N + j0;
                    for (int j = 0; j < jlen; ++j) crow[j] += a * brow[j];
                }
            }
        }
    }
}

// Dot product with a fixed lane-assignment reduction; bit-stable for any n.
template <typename T>
T dot_fixed(const T* a, const T* b, int n) {
    T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
    int i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    for (; i < n; ++i) acc[i & 7] += a[i] * b[i];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double sum_fixed_double(const T* a, std::int64_t n) {
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(a[i + l]);
    for (; i < n; ++i) acc[i & 7] += static_cast<double>(a[i]);
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// im2col for output rows [oy0, oy1); panel is (C*kh*kw) x ((oy1-oy0)*OW).
template <typename T>
void im2col_strip(const T* in, int C, int H, int W, const ConvSpec& sp, int OW,
                  int oy0, int oy1, T* panel) {
    const int cols = (oy1 - oy0) * OW;
    const int K = C * sp.kh * sp.kw;
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(K) * cols > (1 << 16))
    for (int k = 0; k < K; ++k) {
        const int kx = k % sp.kw;
        const int ky = (k / sp.kw) % sp.kh;
        const int ic = k / (sp.kw * sp.kh);
        T* dst = panel + static_cast<std::size_t>(k) * cols;
        const T* src = in + static_cast<std::size_t>(ic) * H * W;
        for (int oy = oy0; oy < oy1; ++oy) {
            const int iy = oy * sp.sh - sp.ph + ky * sp.dh;
            T* drow = dst + static_cast<std::size_t>(oy - oy0) * OW;
            if (iy < 0 || iy >= H) {
                std::fill(drow, drow + OW, T(0));
                continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * W;
            for (int ox = 0; ox < OW; ++ox) {
                const int ix = ox * sp.sw - sp.pw + kx * sp.dw;
                drow[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
            }
        }
    }
}

template <typename T>
void col2im_strip(const T* panel, int C, int H, int W, const ConvSpec& sp, int OW,
                  int oy0, int oy1, T* gin) {
    const int cols = (oy1 - oy0) * OW;
    const int K = C * sp.kh * sp.kw;
    for (int k = 0; k < K; ++k) {
        const int kx = k % sp.kw;
        const int ky = (k / sp.kw) % sp.kh;
        const int ic = k / (sp.kw * sp.kh);
        const T* src = panel + static_cast<std::size_t>(k) * cols;
        T* dst = gin + static_cast<std::size_t>(ic) * H * W;
        for (int oy = oy0; oy < oy1; ++oy) {
            const int iy = oy * sp.sh - sp.ph + ky * sp.dh;
            if (iy < 0 || iy >= H) continue;
            T* drow = dst + static_cast<std::size_t>(iy) * W;
            const T* srow = src + static_cast<std::size_t>(oy - oy0) * OW;
            for (int ox = 0; ox < OW; ++ox) {
                const int ix = ox * sp.sw - sp.pw + kx * sp.dw;
                if (ix >= 0 && ix < W) drow[ix] += srow[ox];
            }
        }
    }
}

inline int strip_rows(int K, int OW, int OH) {
    // cap the im2col panel around 16 MB
    const std::int64_t budget = (std::int64_t(16) << 20) / sizeof(float);
    std::int64_t rows = budget / (std::int64_t(K) * std::max(OW, 1));
    return static_cast<int>(std::clamp<std::int64_t>(rows, 1, OH));
}

}  // namespace detail

// ---- conv2d ------------------------------------------------------------------

template <typename T>
void conv2d_check(const TensorT<T>& input, const TensorT<T>& weights,
                  const TensorT<T>* bias, const ConvSpec& sp) {
    require(sp.in_channels > 0 && sp.out_channels > 0, "conv2d: channel counts must be positive");
    require(sp.kh > 0 && sp.kw > 0, "conv2d: degenerate kernel extent");
    require(sp.sh > 0 && sp.sw > 0 && sp.dh > 0 && sp.dw > 0, "conv2d: stride/dilation must be positive");
    require(input.c() == sp.in_channels,
            "conv2d: input channel axis C=" + std::to_string(input.c()) +
                " does not match spec in_channels=" + std::to_string(sp.in_channels));
    const Shape4 ws = weights.shape();
    require(ws.n == sp.out_channels && ws.c == sp.in_channels && ws.h == sp.kh && ws.w == sp.kw,
            "conv2d: weight shape " + ws.str() + " does not match spec (" +
                std::to_string(sp.out_channels) + "," + std::to_string(sp.in_channels) + "," +
                std::to_string(sp.kh) + "," + std::to_string(sp.kw) + ")");
    if (bias) {
        require(sp.bias, "conv2d: bias tensor given but spec.bias is false");
        require(bias->numel() == sp.out_channels, "conv2d: bias length mismatch on axis C");
    } else {
        require(!sp.bias, "conv2d: spec.bias set but no bias tensor given");
    }
    require(conv_out_extent(input.h(), sp.ph, sp.kh, sp.dh, sp.sh) >= 1,
            "conv2d: non-positive output extent on axis H for input " + input.shape().str());
    require(conv_out_extent(input.w(), sp.pw, sp.kw, sp.dw, sp.sw) >= 1,
            "conv2d: non-positive output extent on axis W for input " + input.shape().str());
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weights,
                  const TensorT<T>* bias, const ConvSpec& sp) {
    conv2d_check(input, weights, bias, sp);
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const int OC = sp.out_channels;
    const int OH = conv_out_extent(H, sp.ph, sp.kh, sp.dh, sp.sh);
    const int OW = conv_out_extent(W, sp.pw, sp.kw, sp.dw, sp.sw);
    const int K = C * sp.kh * sp.kw;

    std::vector<TensorT<T>> parents = {input, weights};
    if (bias) parents.push_back(*bias);

    TensorT<T> in = input, wt = weights;
    TensorT<T> bs = bias ? *bias : TensorT<T>();
    ConvSpec spec = sp;

    TensorT<T> out = make_op_output<T>(
        {N, OC, OH, OW}, parents, [in, wt, bs, spec](detail::NodeT<T>& node) {
            conv2d_backward(node, in, wt, bs, spec);
        });

    const int srows = detail::strip_rows(K, OW, OH);
    std::vector<T> panel(static_cast<std::size_t>(K) * srows * OW);
    for (int n = 0; n < N; ++n) {
        const T* src = input.data() + static_cast<std::size_t>(n) * C * H * W;
        T* dst = out.data() + static_cast<std::size_t>(n) * OC * OH * OW;
        for (int oy0 = 0; oy0 < OH; oy0 += srows) {
            const int oy1 = std::min(OH, oy0 + srows);
            const int cols = (oy1 - oy0) * OW;
            detail::im2col_strip(src, C, H, W, sp, OW, oy0, oy1, panel.data());
            detail::gemm_accum(OC, K, cols, weights.data(), panel.data(),
                               dst + static_cast<std::size_t>(oy0) * OW,
                               static_cast<std::int64_t>(OH) * OW);
        }
        if (bias) {
            const T* bv = bias->data();
#pragma omp parallel for schedule(static) if (OC * OH * OW > (1 << 16))
            for (int oc = 0; oc < OC; ++oc) {
                T* row = dst + static_cast<std::size_t>(oc) * OH * OW;
                for (int i = 0; i < OH * OW; ++i) row[i] += bv[oc];
            }
        }
    }
    return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weights, const ConvSpec& sp) {
    return conv2d(input, weights, static_cast<const TensorT<T>*>(nullptr), sp);
}

template <typename T>
void conv2d_backward(detail::NodeT<T>& node, const TensorT<T>& input,
                     const TensorT<T>& weights, const TensorT<T>& bias,
                     const ConvSpec& sp) {
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const int OC = sp.out_channels;
    const int OH = node.shape.h, OW = node.shape.w;
    const int K = C * sp.kh * sp.kw;
    const T* gout = node.grad.data();

    const bool need_gin = input.requires_grad();
    const bool need_gw = weights.requires_grad();
    const bool need_gb = bias.defined() && bias.requires_grad();

    T* gin = nullptr;
    T* gw = nullptr;
    T* gb = nullptr;
    if (need_gin) gin = const_cast<TensorT<T>&>(input).grad();
    if (need_gw) gw = const_cast<TensorT<T>&>(weights).grad();
    if (need_gb) gb = const_cast<TensorT<T>&>(bias).grad();

    const int srows = detail::strip_rows(K, OW, OH);
    std::vector<T> panel;
    std::vector<T> gpanel;
    if (need_gw || need_gin) panel.resize(static_cast<std::size_t>(K) * srows * OW);
    if (need_gin) gpanel.resize(static_cast<std::size_t>(K) * srows * OW);

    for (int n = 0; n < N; ++n) {
        const T* src = input.data() + static_cast<std::size_t>(n) * C * H * W;
        const T* g = gout + static_cast<std::size_t>(n) * OC * OH * OW;
        for (int oy0 = 0; oy0 < OH; oy0 += srows) {
            const int oy1 = std::min(OH, oy0 + srows);
            const int cols = (oy1 - oy0) * OW;
            const T* gstrip = g + static_cast<std::size_t>(oy0) * OW;  // row-major [OC x cols] with OH*OW stride
            if (need_gw || need_gin)
                detail::im2col_strip(src, C, H, W, sp, OW, oy0, oy1, panel.data());
            if (need_gw) {
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(K) * OC * cols > (1 << 18))
                for (int k = 0; k < K; ++k) {
                    const T* brow = panel.data() + static_cast<std::size_t>(k) * cols;
                    for (int oc = 0; oc < OC; ++oc) {
                        const T* grow = gstrip + static_cast<std::size_t>(oc) * OH * OW;
                        gw[static_cast<std::size_t>(oc) * K + k] +=
                            detail::dot_fixed(grow, brow, cols);
                    }
                }
            }
            if (need_gin) {
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(K) * OC * cols > (1 << 18))
                for (int k = 0; k < K; ++k) {
                    T* brow = gpanel.data() + static_cast<std::size_t>(k) * cols;
                    std::fill(brow, brow + cols, T(0));
                    for (int oc = 0; oc < OC; ++oc) {
                        const T a = weights.data()[static_cast<std::size_t>(oc) * K + k];
                        const T* grow = gstrip + static_cast<std::size_t>(oc) * OH * OW;
                        for (int j = 0; j < cols; ++j) brow[j] += a * grow[j];
                    }
                }
                T* gin_n = gin + static_cast<std::size_t>(n) * C * H * W;
                detail::col2im_strip(gpanel.data(), C, H, W, sp, OW, oy0, oy1, gin_n);
            }
        }
        if (need_gb) {
            for (int oc = 0; oc < OC; ++oc)
                gb[oc] += static_cast<T>(detail::sum_fixed_double(
                    g + static_cast<std::size_t>(oc) * OH * OW, static_cast<std::int64_t>(OH) * OW));
        }
    }
}

// ---- batch norm --------------------------------------------------------------

template <typename T>
struct BatchNormStateT {
    TensorT<T> gamma, beta;  // (1,C,1,1)
    std::vector<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    static BatchNormStateT create(int channels, T momentum = T(0.1), T eps = T(1e-5)) {
        require(eps > T(0), "batch_norm2d: non-positive epsilon");
        BatchNormStateT st;
        st.gamma = TensorT<T>::filled({1, channels, 1, 1}, T(1), true);
        st.beta = TensorT<T>::zeros({1, channels, 1, 1}, true);
        st.running_mean.assign(channels, T(0));
        st.running_var.assign(channels, T(1));
        st.momentum = momentum;
        st.eps = eps;
        return st;
    }

    int channels() const { return gamma.defined() ? gamma.c() : 0; }
};

using BatchNormState = BatchNormStateT<float>;

template <typename T>
TensorT<T> batch_norm2d(const TensorT<T>& input, BatchNormStateT<T>& state, bool training) {
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    require(state.channels() == C,
            "batch_norm2d: state has " + std::to_string(state.channels()) +
                " channels, input axis C=" + std::to_string(C));
    require(state.eps > T(0), "batch_norm2d: non-positive epsilon");
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t M = static_cast<std::int64_t>(N) * plane;

    std::vector<T> mean(C), invstd(C);
    if (training) {
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n)
                s += detail::sum_fixed_double(
                    input.data() + (static_cast<std::size_t>(n) * C + c) * plane, plane);
            const double mu = s / static_cast<double>(M);
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* p = input.data() + (static_cast<std::size_t>(n) * C + c) * plane;
                double acc[4] = {0, 0, 0, 0};
                std::int64_t i = 0;
                for (; i + 4 <= plane; i += 4)
                    for (int l = 0; l < 4; ++l) {
                        const double d = static_cast<double>(p[i + l]) - mu;
                        acc[l] += d * d;
                    }
                for (; i < plane; ++i) {
                    const double d = static_cast<double>(p[i]) - mu;
                    acc[i & 3] += d * d;
                }
                v += (acc[0] + acc[1]) + (acc[2] + acc[3]);
            }
            const double var = v / static_cast<double>(M);
            mean[c] = static_cast<T>(mu);
            invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
            const double unbiased = M > 1 ? var * static_cast<double>(M) / (M - 1) : var;
            state.running_mean[c] = static_cast<T>((1.0 - state.momentum) * state.running_mean[c] +
                                                   state.momentum * mu);
            state.running_var[c] = static_cast<T>((1.0 - state.momentum) * state.running_var[c] +
                                                  state.momentum * unbiased);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) +
                                                       static_cast<double>(state.eps)));
        }
    }

    TensorT<T> in = input;
    TensorT<T> gamma = state.gamma, beta = state.beta;
    TensorT<T> out = make_op_output<T>(
        input.shape(), {input, state.gamma, state.beta},
        [in, gamma, beta, mean, invstd, training](detail::NodeT<T>& node) {
            batch_norm2d_backward(node, in, gamma, beta, mean, invstd, training);
        });

    const T* gv = state.gamma.data();
    const T* bv = state.beta.data();
#pragma omp parallel for schedule(static) collapse(2) if (M * C > (1 << 15))
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* p = input.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            T* q = out.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            const T a = gv[c] * invstd[c];
            const T b = bv[c] - mean[c] * a;
            for (std::int64_t i = 0; i < plane; ++i) q[i] = a * p[i] + b;
        }
    }
    return out;
}

template <typename T>
void batch_norm2d_backward(detail::NodeT<T>& node, const TensorT<T>& input,
                           const TensorT<T>& gamma, const TensorT<T>& beta,
                           const std::vector<T>& mean, const std::vector<T>& invstd,
                           bool training) {
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t M = static_cast<std::int64_t>(N) * plane;
    const T* g = node.grad.data();

    const bool need_gin = input.requires_grad();
    const bool need_gg = gamma.requires_grad();
    const bool need_gb = beta.requires_grad();
    T* gin = need_gin ? const_cast<TensorT<T>&>(input).grad() : nullptr;
    T* gg = need_gg ? const_cast<TensorT<T>&>(gamma).grad() : nullptr;
    T* gb = need_gb ? const_cast<TensorT<T>&>(beta).grad() : nullptr;

#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        double sg = 0.0, sgx = 0.0;
        for (int n = 0; n < N; ++n) {
            const T* gp = g + (static_cast<std::size_t>(n) * C + c) * plane;
            const T* xp = input.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            double a0 = 0, a1 = 0;
            for (std::int64_t i = 0; i < plane; ++i) {
                const double gd = static_cast<double>(gp[i]);
                const double xh = (static_cast<double>(xp[i]) - mean[c]) * invstd[c];
                a0 += gd;
                a1 += gd * xh;
            }
            sg += a0;
            sgx += a1;
        }
        if (gg) gg[c] += static_cast<T>(sgx);
        if (gb) gb[c] += static_cast<T>(sg);
        if (gin) {
            const double gam = static_cast<double>(gamma.data()[c]);
            const double is = static_cast<double>(invstd[c]);
            if (training) {
                const double mg = sg / static_cast<double>(M);
                const double mgx = sgx / static_cast<double>(M);
                for (int n = 0; n < N; ++n) {
                    const T* gp = g + (static_cast<std::size_t>(n) * C + c) * plane;
                    const T* xp = input.data() + (static_cast<std::size_t>(n) * C + c) * plane;
                    T* dp = gin + (static_cast<std::size_t>(n) * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const double xh = (static_cast<double>(xp[i]) - mean[c]) * is;
                        dp[i] += static_cast<T>(gam * is *
                                                (static_cast<double>(gp[i]) - mg - xh * mgx));
                    }
                }
            } else {
                for (int n = 0; n < N; ++n) {
                    const T* gp = g + (static_cast<std::size_t>(n) * C + c) * plane;
                    T* dp = gin + (static_cast<std::size_t>(n) * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i)
                        dp[i] += static_cast<T>(gam * is * static_cast<double>(gp[i]));
                }
            }
        }
    }
}

// ---- pooling -----------------------------------------------------------------

enum class PoolKind { Max, Avg };

template <typename T>
TensorT<T> pool2d(const TensorT<T>& input, PoolKind kind, int kh, int kw, int sh, int sw,
                  int ph = 0, int pw = 0) {
    require(kh > 0 && kw > 0, "pool2d: degenerate kernel (zero extent)");
    require(sh > 0 && sw > 0, "pool2d: stride must be positive");
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const int OH = conv_out_extent(H, ph, kh, 1, sh);
    const int OW = conv_out_extent(W, pw, kw, 1, sw);
    require(OH >= 1 && OW >= 1, "pool2d: non-positive output extent for input " + input.shape().str());

    auto argmax = std::make_shared<std::vector<std::int32_t>>();
    if (kind == PoolKind::Max)
        argmax->resize(static_cast<std::size_t>(N) * C * OH * OW);

    TensorT<T> in = input;
    TensorT<T> out = make_op_output<T>(
        {N, C, OH, OW}, {input},
        [in, kind, kh, kw, sh, sw, ph, pw, argmax](detail::NodeT<T>& node) {
            pool2d_backward(node, in, kind, kh, kw, sh, sw, ph, pw, *argmax);
        });

    const std::int64_t planes = static_cast<std::int64_t>(N) * C;
#pragma omp parallel for schedule(static) if (planes * OH * OW > (1 << 14))
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* src = input.data() + pl * H * W;
        T* dst = out.data() + pl * OH * OW;
        std::int32_t* am = kind == PoolKind::Max ? argmax->data() + pl * OH * OW : nullptr;
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                const int y0 = oy * sh - ph, x0 = ox * sw - pw;
                if (kind == PoolKind::Max) {
                    T best = -std::numeric_limits<T>::infinity();
                    int besti = -1;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = y0 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = x0 + kx;
                            if (ix < 0 || ix >= W) continue;
                            const T v = src[static_cast<std::size_t>(iy) * W + ix];
                            if (v > best) {  // ties keep the first index in row-major order
                                best = v;
                                besti = iy * W + ix;
                            }
                        }
                    }
                    dst[static_cast<std::size_t>(oy) * OW + ox] = best;
                    am[static_cast<std::size_t>(oy) * OW + ox] = besti;
                } else {
                    T s = T(0);
                    int cnt = 0;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = y0 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = x0 + kx;
                            if (ix < 0 || ix >= W) continue;
                            s += src[static_cast<std::size_t>(iy) * W + ix];
                            ++cnt;
                        }
                    }
                    dst[static_cast<std::size_t>(oy) * OW + ox] = s / static_cast<T>(cnt);
                }
            }
        }
    }
    return out;
}

template <typename T>
void pool2d_backward(detail::NodeT<T>& node, const TensorT<T>& input, PoolKind kind,
                     int kh, int kw, int sh, int sw, int ph, int pw,
                     const std::vector<std::int32_t>& argmax) {
    if (!input.requires_grad()) return;
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const int OH = node.shape.h, OW = node.shape.w;
    T* gin = const_cast<TensorT<T>&>(input).grad();
    const T* g = node.grad.data();

    const std::int64_t planes = static_cast<std::int64_t>(N) * C;
#pragma omp parallel for schedule(static) if (planes > 2)
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* gp = g + pl * OH * OW;
        T* dp = gin + pl * H * W;
        if (kind == PoolKind::Max) {
            const std::int32_t* am = argmax.data() + pl * OH * OW;
            for (int i = 0; i < OH * OW; ++i)
                if (am[i] >= 0) dp[am[i]] += gp[i];
        } else {
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    const int y0 = oy * sh - ph, x0 = ox * sw - pw;
                    int cnt = 0;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = y0 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = x0 + kx;
                            if (ix >= 0 && ix < W) ++cnt;
                        }
                    }
                    const T gv = gp[static_cast<std::size_t>(oy) * OW + ox] / static_cast<T>(cnt);
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = y0 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = x0 + kx;
                            if (ix >= 0 && ix < W) dp[static_cast<std::size_t>(iy) * W + ix] += gv;
                        }
                    }
                }
            }
        }
    }
}

// ---- bilinear resize ----------------------------------------------------------
// Half-pixel-center convention: src = (i + 0.5) * in/out - 0.5, clamped.

namespace detail {

struct ResizeAxis {
    std::vector<int> i0, i1;
    std::vector<double> frac;
};

inline ResizeAxis resize_axis(int in, int out) {
    ResizeAxis ax;
    ax.i0.resize(out);
    ax.i1.resize(out);
    ax.frac.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int i = 0; i < out; ++i) {
        double s = (i + 0.5) * scale - 0.5;
        if (s < 0.0) s = 0.0;
        if (s > in - 1) s = in - 1;
        const int lo = static_cast<int>(s);
        ax.i0[i] = lo;
        ax.i1[i] = std::min(lo + 1, in - 1);
        ax.frac[i] = s - lo;
    }
    return ax;
}

}  // namespace detail

template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& input, int out_h, int out_w) {
    require(out_h >= 1 && out_w >= 1, "bilinear_resize: target extents must be >= 1");
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const detail::ResizeAxis ay = detail::resize_axis(H, out_h);
    const detail::ResizeAxis ax = detail::resize_axis(W, out_w);

    TensorT<T> in = input;
    TensorT<T> out = make_op_output<T>(
        {N, C, out_h, out_w}, {input}, [in, ay, ax](detail::NodeT<T>& node) {
            bilinear_resize_backward(node, in, ay, ax);
        });

    const std::int64_t planes = static_cast<std::int64_t>(N) * C;
#pragma omp parallel for schedule(static) if (planes * out_h * out_w > (1 << 14))
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* src = input.data() + pl * H * W;
        T* dst = out.data() + pl * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const T fy = static_cast<T>(ay.frac[oy]);
            const T* r0 = src + static_cast<std::size_t>(ay.i0[oy]) * W;
            const T* r1 = src + static_cast<std::size_t>(ay.i1[oy]) * W;
            T* drow = dst + static_cast<std::size_t>(oy) * out_w;
            for (int ox = 0; ox < out_w; ++ox) {
                const T fx = static_cast<T>(ax.frac[ox]);
                const int x0 = ax.i0[ox], x1 = ax.i1[ox];
                const T top = r0[x0] + fx * (r0[x1] - r0[x0]);
                const T bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                drow[ox] = top + fy * (bot - top);
            }
        }
    }
    return out;
}

template <typename T>
void bilinear_resize_backward(detail::NodeT<T>& node, const TensorT<T>& input,
                              const detail::ResizeAxis& ay, const detail::ResizeAxis& ax) {
    if (!input.requires_grad()) return;
    const int N = input.n(), C = input.c(), H = input.h(), W = input.w();
    const int OH = node.shape.h, OW = node.shape.w;
    T* gin = const_cast<TensorT<T>&>(input).grad();
    const T* g = node.grad.data();
    const std::int64_t planes = static_cast<std::int64_t>(N) * C;
#pragma omp parallel for schedule(static) if (planes > 2)
    for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* gp = g + pl * OH * OW;
        T* dp = gin + pl * H * W;
        for (int oy = 0; oy < OH; ++oy) {
            const T fy = static_cast<T>(ay.frac[oy]);
            T* d0 = dp + static_cast<std::size_t>(ay.i0[oy]) * W;
            T* d1 = dp + static_cast<std::size_t>(ay.i1[oy]) * W;
            for (int ox = 0; ox < OW; ++ox) {
                const T fx = static_cast<T>(ax.frac[ox]);
                const int x0 = ax.i0[ox], x1 = ax.i1[ox];
                const T gv = gp[static_cast<std::size_t>(oy) * OW + ox];
                d0[x0] += gv * (T(1) - fy) * (T(1) - fx);
                d0[x1] += gv * (T(1) - fy) * fx;
                d1[x0] += gv * fy * (T(1) - fx);
                d1[x1] += gv * fy * fx;
            }
        }
    }
}

// ---- elementwise -------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& input) {
    TensorT<T> in = input;
    TensorT<T> out = make_op_output<T>(input.shape(), {input}, [in](detail::NodeT<T>& node) {
        if (!in.requires_grad()) return;
        T* gin = const_cast<TensorT<T>&>(in).grad();
        const T* g = node.grad.data();
        const T* x = in.data();
        const std::int64_t n = in.numel();
#pragma omp parallel for schedule(static) if (n > (1 << 16))
        for (std::int64_t i = 0; i < n; ++i)
            if (x[i] > T(0)) gin[i] += g[i];
    });
    const T* x = input.data();
    T* y = out.data();
    const std::int64_t n = input.numel();
#pragma omp parallel for schedule(static) if (n > (1 << 16))
    for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    require(a.shape() == b.shape(),
            "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    TensorT<T> ta = a, tb = b;
    TensorT<T> out = make_op_output<T>(a.shape(), {a, b}, [ta, tb](detail::NodeT<T>& node) {
        const T* g = node.grad.data();
        const std::int64_t n = node.shape.numel();
        for (const TensorT<T>* t : {&ta, &tb}) {
            if (!t->requires_grad()) continue;
            T* gp = const_cast<TensorT<T>*>(t)->grad();
#pragma omp parallel for schedule(static) if (n > (1 << 16))
            for (std::int64_t i = 0; i < n; ++i) gp[i] += g[i];
        }
    });
    const std::int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* y = out.data();
#pragma omp parallel for schedule(static) if (n > (1 << 16))
    for (std::int64_t i = 0; i < n; ++i) y[i] = pa[i] + pb[i];
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    require(a.shape() == b.shape(),
            "mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    TensorT<T> ta = a, tb = b;
    TensorT<T> out = make_op_output<T>(a.shape(), {a, b}, [ta, tb](detail::NodeT<T>& node) {
        const T* g = node.grad.data();
        const std::int64_t n = node.shape.numel();
        if (ta.requires_grad()) {
            T* gp = const_cast<TensorT<T>&>(ta).grad();
            const T* ob = tb.data();
            for (std::int64_t i = 0; i < n; ++i) gp[i] += g[i] * ob[i];
        }
        if (tb.requires_grad()) {
            T* gp = const_cast<TensorT<T>&>(tb).grad();
            const T* oa = ta.data();
            for (std::int64_t i = 0; i < n; ++i) gp[i] += g[i] * oa[i];
        }
    });
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    TensorT<T> ta = a;
    TensorT<T> out = make_op_output<T>(a.shape(), {a}, [ta, s](detail::NodeT<T>& node) {
        if (!ta.requires_grad()) return;
        T* gp = const_cast<TensorT<T>&>(ta).grad();
        const T* g = node.grad.data();
        const std::int64_t n = node.shape.numel();
        for (std::int64_t i = 0; i < n; ++i) gp[i] += g[i] * s;
    });
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    return out;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
    TensorT<T> ta = a;
    TensorT<T> out = make_op_output<T>({1, 1, 1, 1}, {a}, [ta](detail::NodeT<T>& node) {
        if (!ta.requires_grad()) return;
        T* gp = const_cast<TensorT<T>&>(ta).grad();
        const T g = node.grad[0];
        const std::int64_t n = ta.numel();
        for (std::int64_t i = 0; i < n; ++i) gp[i] += g;
    });
    out.data()[0] = static_cast<T>(detail::sum_fixed_double(a.data(), a.numel()));
    return out;
}

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& parts) {
    require(!parts.empty(), "concat_channels: empty input list");
    const int N = parts[0].n(), H = parts[0].h(), W = parts[0].w();
    int C = 0;
    for (const auto& p : parts) {
        require(p.n() == N && p.h() == H && p.w() == W,
                "concat_channels: mismatched spatial shape " + p.shape().str());
        C += p.c();
    }
    std::vector<TensorT<T>> held = parts;
    TensorT<T> out = make_op_output<T>({N, C, H, W}, parts, [held, C](detail::NodeT<T>& node) {
        const int N2 = node.shape.n, H2 = node.shape.h, W2 = node.shape.w;
        const std::int64_t plane = static_cast<std::int64_t>(H2) * W2;
        const T* g = node.grad.data();
        int coff = 0;
        for (const auto& p : held) {
            if (p.requires_grad()) {
                T* gp = const_cast<TensorT<T>&>(p).grad();
                for (int n = 0; n < N2; ++n) {
                    const T* src = g + (static_cast<std::size_t>(n) * C + coff) * plane;
                    T* dst = gp + static_cast<std::size_t>(n) * p.c() * plane;
                    for (std::int64_t i = 0; i < p.c() * plane; ++i) dst[i] += src[i];
                }
            }
            coff += p.c();
        }
    });
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    int coff = 0;
    for (const auto& p : parts) {
        for (int n = 0; n < N; ++n) {
            std::memcpy(out.data() + (static_cast<std::size_t>(n) * C + coff) * plane,
                        p.data() + static_cast<std::size_t>(n) * p.c() * plane,
                        static_cast<std::size_t>(p.c()) * plane * sizeof(T));
        }
        coff += p.c();
    }
    return out;
}

// ---- masked softmax cross-entropy ---------------------------------------------

struct LabelBatch {
    int n = 0, h = 0, w = 0;
    std::vector<std::uint8_t> v;

    std::int64_t numel() const { return static_cast<std::int64_t>(n) * h * w; }
};

template <typename T>
struct LossT {
    TensorT<T> value;  // scalar node in the graph
    std::int64_t valid_pixels = 0;

    T item() const { return value.item(); }
};

using Loss = LossT<float>;

template <typename T>
LossT<T> softmax_cross_entropy(const TensorT<T>& logits, const LabelBatch& targets,
                               int ignore_label = kIgnoreLabel) {
    const int N = logits.n(), K = logits.c(), H = logits.h(), W = logits.w();
    require(targets.n == N && targets.h == H && targets.w == W,
            "softmax_cross_entropy: target shape (" + std::to_string(targets.n) + "," +
                std::to_string(targets.h) + "," + std::to_string(targets.w) +
                ") does not match logits " + logits.shape().str());
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    require(static_cast<std::int64_t>(targets.v.size()) == targets.numel(),
            "softmax_cross_entropy: target buffer length mismatch");
    for (std::int64_t i = 0; i < targets.numel(); ++i) {
        const int t = targets.v[static_cast<std::size_t>(i)];
        require(t == ignore_label || t < K,
                "softmax_cross_entropy: target value " + std::to_string(t) +
                    " out of range for K=" + std::to_string(K));
    }

    // count + loss in one pass; per-row partials keep the reduction order fixed
    std::int64_t valid = 0;
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const T* base = logits.data() + static_cast<std::size_t>(n) * K * plane;
        const std::uint8_t* tg = targets.v.data() + static_cast<std::size_t>(n) * plane;
        std::vector<double> row_loss(H, 0.0);
        std::vector<std::int64_t> row_valid(H, 0);
#pragma omp parallel for schedule(static) if (plane * K > (1 << 15))
        for (int y = 0; y < H; ++y) {
            double acc = 0.0;
            std::int64_t cnt = 0;
            for (int x = 0; x < W; ++x) {
                const int t = tg[static_cast<std::size_t>(y) * W + x];
                if (t == ignore_label) continue;
                const std::size_t off = static_cast<std::size_t>(y) * W + x;
                T m = base[off];
                for (int k = 1; k < K; ++k) m = std::max(m, base[k * plane + off]);
                double se = 0.0;
                for (int k = 0; k < K; ++k)
                    se += std::exp(static_cast<double>(base[k * plane + off] - m));
                acc += std::log(se) - static_cast<double>(base[t * plane + off] - m);
                ++cnt;
            }
            row_loss[y] = acc;
            row_valid[y] = cnt;
        }
        for (int y = 0; y < H; ++y) {
            total += row_loss[y];
            valid += row_valid[y];
        }
    }
    require(valid > 0, "softmax_cross_entropy: empty loss, every pixel carries the ignore label");

    auto tg = std::make_shared<LabelBatch>(targets);
    TensorT<T> lg = logits;
    TensorT<T> value = make_op_output<T>(
        {1, 1, 1, 1}, {logits}, [lg, tg, ignore_label, valid](detail::NodeT<T>& node) {
            softmax_cross_entropy_backward(node, lg, *tg, ignore_label, valid);
        });
    value.data()[0] = static_cast<T>(total / static_cast<double>(valid));

    LossT<T> loss;
    loss.value = value;
    loss.valid_pixels = valid;
    return loss;
}

template <typename T>
void softmax_cross_entropy_backward(detail::NodeT<T>& node, const TensorT<T>& logits,
                                    const LabelBatch& targets, int ignore_label,
                                    std::int64_t valid) {
    if (!logits.requires_grad()) return;
    const int N = logits.n(), K = logits.c(), H = logits.h(), W = logits.w();
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const T up = node.grad[0];
    const T inv = up / static_cast<T>(valid);
    T* gin = const_cast<TensorT<T>&>(logits).grad();

    for (int n = 0; n < N; ++n) {
        const T* base = logits.data() + static_cast<std::size_t>(n) * K * plane;
        T* gbase = gin + static_cast<std::size_t>(n) * K * plane;
        const std::uint8_t* tg = targets.v.data() + static_cast<std::size_t>(n) * plane;
#pragma omp parallel for schedule(static) if (plane * K > (1 << 15))
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const std::size_t off = static_cast<std::size_t>(y) * W + x;
                const int t = tg[off];
                if (t == ignore_label) continue;
                T m = base[off];
                for (int k = 1; k < K; ++k) m = std::max(m, base[k * plane + off]);
                double se = 0.0;
                for (int k = 0; k < K; ++k)
                    se += std::exp(static_cast<double>(base[k * plane + off] - m));
                for (int k = 0; k < K; ++k) {
                    const double p = std::exp(static_cast<double>(base[k * plane + off] - m)) / se;
                    const double delta = k == t ? 1.0 : 0.0;
                    gbase[k * plane + off] += static_cast<T>((p - delta)) * inv;
                }
            }
        }
    }
}

// ---- health check -------------------------------------------------------------

template <typename T>
void assert_all_finite(const TensorT<T>& t, const std::string& what) {
    const T* p = t.data();
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(p[i])))
            fail("non-finite value in " + what + " at flat index " + std::to_string(i));
    }
}

// ---- non-differentiable helpers -----------------------------------------------

// argmax over the channel axis; ties resolve to the lower class index.
template <typename T>
std::vector<std::uint8_t> argmax_channels(const TensorT<T>& logits) {
    const int N = logits.n(), K = logits.c(), H = logits.h(), W = logits.w();
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(N) * plane);
#pragma omp parallel for schedule(static) collapse(2) if (N * plane > (1 << 15))
    for (int n = 0; n < N; ++n) {
        for (int y = 0; y < H; ++y) {
            const T* base = logits.data() + static_cast<std::size_t>(n) * K * plane;
            std::uint8_t* dst = out.data() + static_cast<std::size_t>(n) * plane;
            for (int x = 0; x < W; ++x) {
                const std::size_t off = static_cast<std::size_t>(y) * W + x;
                int best = 0;
                T bv = base[off];
                for (int k = 1; k < K; ++k) {
                    const T v = base[k * plane + off];
                    if (v > bv) {
                        bv = v;
                        best = k;
                    }
                }
                dst[off] = static_cast<std::uint8_t>(best);
            }
        }
    }
    return out;
}

// per-pixel softmax over channels (inference product; not part of the graph)
template <typename T>
std::vector<float> softmax_channels(const TensorT<T>& logits) {
    const int N = logits.n(), K = logits.c(), H = logits.h(), W = logits.w();
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<float> out(static_cast<std::size_t>(N) * K * plane);
#pragma omp parallel for schedule(static) collapse(2) if (N * plane > (1 << 15))
    for (int n = 0; n < N; ++n) {
        for (int y = 0; y < H; ++y) {
            const T* base = logits.data() + static_cast<std::size_t>(n) * K * plane;
            float* dst = out.data() + static_cast<std::size_t>(n) * K * plane;
            for (int x = 0; x < W; ++x) {
                const std::size_t off = static_cast<std::size_t>(y) * W + x;
                T m = base[off];
                for (int k = 1; k < K; ++k) m = std::max(m, base[k * plane + off]);
                double se = 0.0;
                for (int k = 0; k < K; ++k)
                    se += std::exp(static_cast<double>(base[k * plane + off] - m));
                for (int k = 0; k < K; ++k)
                    dst[k * plane + off] = static_cast<float>(
                        std::exp(static_cast<double>(base[k * plane + off] - m)) / se);
            }
        }
    }
    return out;
}

}  // namespace iceseg
