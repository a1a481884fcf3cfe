#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "iceseg/ops.hpp"

namespace iceseg {

enum class Arch { Aspp, Unet };

inline const char* arch_name(Arch a) { return a == Arch::Aspp ? "aspp" : "unet"; }
inline Arch arch_from_name(const std::string& s) {
    if (s == "aspp") return Arch::Aspp;
    if (s == "unet") return Arch::Unet;
    fail("unknown architecture '" + s + "' (expected aspp|unet)");
}

struct ModelConfig {
    int num_classes = 2;
    int in_channels = 3;
    Arch architecture = Arch::Aspp;
    std::vector<int> atrous_rates = {12, 24, 36};
    int base_width = 64;  // 32 = width-halved variant
    std::string init = "random";
    std::uint64_t seed = 0;

    void validate() const {
        require(num_classes >= 2, "ModelConfig: num_classes must be >= 2");
        require(in_channels >= 1, "ModelConfig: in_channels must be >= 1");
        require(base_width >= 4, "ModelConfig: base_width must be >= 4");
        require(init == "random" || init == "imported",
                "ModelConfig: init must be random|imported");
        if (architecture == Arch::Aspp) {
            require(atrous_rates.size() == 3, "ModelConfig: the decoder takes three atrous rates");
            int prev = 0;
            for (int r : atrous_rates) {
                require(r > prev, "ModelConfig: atrous rates must be strictly increasing positives");
                prev = r;
            }
        }
    }
};

// ---- layers -------------------------------------------------------------------

template <typename T>
struct ConvLayerT {
    TensorT<T> weight;
    TensorT<T> bias;  // undefined unless spec.bias
    ConvSpec spec;

    TensorT<T> operator()(const TensorT<T>& x) const {
        return conv2d(x, weight, spec.bias ? &bias : nullptr, spec);
    }
};

template <typename T>
struct ConvBnT {
    ConvLayerT<T> conv;
    BatchNormStateT<T> bn;

    TensorT<T> operator()(const TensorT<T>& x, bool training) {
        return relu(batch_norm2d(conv(x), bn, training));
    }
    // without the activation, for residual trunks
    TensorT<T> linear(const TensorT<T>& x, bool training) {
        return batch_norm2d(conv(x), bn, training);
    }
};

template <typename T>
struct BasicBlockT {
    ConvBnT<T> c1, c2;
    bool has_proj = false;
    ConvBnT<T> proj;  // 1x1 stride-2 shortcut on strided blocks

    TensorT<T> operator()(const TensorT<T>& x, bool training) {
        TensorT<T> h = c2.linear(relu(c1.linear(x, training)), training);
        TensorT<T> sc = has_proj ? proj.linear(x, training) : x;
        return relu(add(h, sc));
    }
};

template <typename T>
struct AsppNetT {
    // encoder: stem + three residual stages (the fourth group is discarded)
    ConvBnT<T> stem;
    std::array<BasicBlockT<T>, 2> layer1, layer2, layer3;
    // decoder: parallel branches on the /16 map
    ConvBnT<T> branch0;                  // 1x1
    std::array<ConvBnT<T>, 3> branch_atrous;
    ConvBnT<T> branch_pool;              // 1x1 after 2x2/2 avg pool
    ConvBnT<T> fuse;                     // 1x1, 5x4w -> 4w
    ConvBnT<T> refine;                   // 3x3
    ConvLayerT<T> classifier;            // 1x1 with bias
};

template <typename T>
struct UnetT {
    std::array<ConvBnT<T>, 4> enc;       // widths w,2w,4w,8w at /1,/2,/4,/8
    std::array<ConvBnT<T>, 3> dec_fuse;  // 1x1 after skip concat
    std::array<ConvBnT<T>, 3> dec_conv;  // 3x3
    ConvLayerT<T> classifier;
};

template <typename T>
struct NetT {
    ModelConfig config;
    std::optional<AsppNetT<T>> aspp;
    std::optional<UnetT<T>> unet;

    int downsample_factor() const { return aspp ? 16 : 8; }
    // inputs must be divisible by this (callers pad; see predict_scene)
    int size_multiple() const { return aspp ? 32 : 8; }
};

using Net = NetT<float>;

// ---- parameter tree visitation ---------------------------------------------------
// Fixed traversal order; initialization, checkpoints, and the optimizer all
// walk the tree through these.

template <typename T>
void visit_conv(const std::string& path, ConvLayerT<T>& layer,
                const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    fn(path + ".weight", layer.weight);
    if (layer.spec.bias) fn(path + ".bias", layer.bias);
}

template <typename T>
void visit_convbn_params(const std::string& path, ConvBnT<T>& layer,
                         const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    visit_conv(path + ".conv", layer.conv, fn);
    fn(path + ".bn.gamma", layer.bn.gamma);
    fn(path + ".bn.beta", layer.bn.beta);
}

template <typename T>
void visit_block_params(const std::string& path, BasicBlockT<T>& b,
                        const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    visit_convbn_params(path + ".conv1", b.c1, fn);
    visit_convbn_params(path + ".conv2", b.c2, fn);
    if (b.has_proj) visit_convbn_params(path + ".proj", b.proj, fn);
}

template <typename T>
void for_each_param(NetT<T>& net,
                    const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    if (net.aspp) {
        AsppNetT<T>& m = *net.aspp;
        visit_convbn_params<T>("encoder.stem", m.stem, fn);
        for (int i = 0; i < 2; ++i)
            visit_block_params<T>("encoder.layer1." + std::to_string(i), m.layer1[static_cast<std::size_t>(i)], fn);
        for (int i = 0; i < 2; ++i)
            visit_block_params<T>("encoder.layer2." + std::to_string(i), m.layer2[static_cast<std::size_t>(i)], fn);
        for (int i = 0; i < 2; ++i)
            visit_block_params<T>("encoder.layer3." + std::to_string(i), m.layer3[static_cast<std::size_t>(i)], fn);
        visit_convbn_params<T>("decoder.aspp.branch0", m.branch0, fn);
        for (int i = 0; i < 3; ++i)
            visit_convbn_params<T>("decoder.aspp.branch" + std::to_string(i + 1),
                                   m.branch_atrous[static_cast<std::size_t>(i)], fn);
        visit_convbn_params<T>("decoder.aspp.pool", m.branch_pool, fn);
        visit_convbn_params<T>("decoder.fuse", m.fuse, fn);
        visit_convbn_params<T>("decoder.refine", m.refine, fn);
        visit_conv<T>("decoder.classifier", m.classifier, fn);
    } else {
        UnetT<T>& m = *net.unet;
        for (int i = 0; i < 4; ++i)
            visit_convbn_params<T>("encoder.enc" + std::to_string(i + 1), m.enc[static_cast<std::size_t>(i)], fn);
        for (int i = 0; i < 3; ++i) {
            const std::string p = "decoder.dec" + std::to_string(3 - i);
            visit_convbn_params<T>(p + ".fuse", m.dec_fuse[static_cast<std::size_t>(i)], fn);
            visit_convbn_params<T>(p + ".conv", m.dec_conv[static_cast<std::size_t>(i)], fn);
        }
        visit_conv<T>("decoder.classifier", m.classifier, fn);
    }
}

// batch-norm running statistics (non-trainable state that checkpoints carry)
template <typename T>
void for_each_buffer(NetT<T>& net,
                     const std::function<void(const std::string&, std::vector<T>&)>& fn) {
    auto bn = [&fn](const std::string& path, ConvBnT<T>& layer) {
        fn(path + ".bn.running_mean", layer.bn.running_mean);
        fn(path + ".bn.running_var", layer.bn.running_var);
    };
    auto block = [&bn](const std::string& path, BasicBlockT<T>& b) {
        bn(path + ".conv1", b.c1);
        bn(path + ".conv2", b.c2);
        if (b.has_proj) bn(path + ".proj", b.proj);
    };
    if (net.aspp) {
        AsppNetT<T>& m = *net.aspp;
        bn("encoder.stem", m.stem);
        for (int i = 0; i < 2; ++i) block("encoder.layer1." + std::to_string(i), m.layer1[static_cast<std::size_t>(i)]);
        for (int i = 0; i < 2; ++i) block("encoder.layer2." + std::to_string(i), m.layer2[static_cast<std::size_t>(i)]);
        for (int i = 0; i < 2; ++i) block("encoder.layer3." + std::to_string(i), m.layer3[static_cast<std::size_t>(i)]);
        bn("decoder.aspp.branch0", m.branch0);
        for (int i = 0; i < 3; ++i)
            bn("decoder.aspp.branch" + std::to_string(i + 1), m.branch_atrous[static_cast<std::size_t>(i)]);
        bn("decoder.aspp.pool", m.branch_pool);
        bn("decoder.fuse", m.fuse);
        bn("decoder.refine", m.refine);
    } else {
        UnetT<T>& m = *net.unet;
        for (int i = 0; i < 4; ++i) bn("encoder.enc" + std::to_string(i + 1), m.enc[static_cast<std::size_t>(i)]);
        for (int i = 0; i < 3; ++i) {
            const std::string p = "decoder.dec" + std::to_string(3 - i);
            bn(p + ".fuse", m.dec_fuse[static_cast<std::size_t>(i)]);
            bn(p + ".conv", m.dec_conv[static_cast<std::size_t>(i)]);
        }
    }
}

// ---- construction ------------------------------------------------------------------

namespace detail {

template <typename T>
ConvLayerT<T> make_conv(int in_c, int out_c, int k, int stride, int pad, int dil, bool bias) {
    ConvLayerT<T> layer;
    layer.spec = ConvSpec{.in_channels = in_c, .out_channels = out_c, .kh = k, .kw = k,
                          .sh = stride, .sw = stride, .ph = pad, .pw = pad,
                          .dh = dil, .dw = dil, .bias = bias};
    layer.weight = TensorT<T>::zeros({out_c, in_c, k, k}, true);
    if (bias) layer.bias = TensorT<T>::zeros({1, out_c, 1, 1}, true);
    return layer;
}

template <typename T>
ConvBnT<T> make_convbn(int in_c, int out_c, int k, int stride = 1, int pad = 0, int dil = 1) {
    ConvBnT<T> layer;
    layer.conv = make_conv<T>(in_c, out_c, k, stride, pad, dil, false);
    layer.bn = BatchNormStateT<T>::create(out_c);
    return layer;
}

template <typename T>
BasicBlockT<T> make_block(int in_c, int out_c, int stride) {
    BasicBlockT<T> b;
    b.c1 = make_convbn<T>(in_c, out_c, 3, stride, 1);
    b.c2 = make_convbn<T>(out_c, out_c, 3, 1, 1);
    if (stride != 1 || in_c != out_c) {
        b.has_proj = true;
        b.proj = make_convbn<T>(in_c, out_c, 1, stride, 0);
    }
    return b;
}

}  // namespace detail

template <typename T>
NetT<T> build_model(const ModelConfig& config) {
    config.validate();
    NetT<T> net;
    net.config = config;
    const int w = config.base_width;

    if (config.architecture == Arch::Aspp) {
        AsppNetT<T> m;
        m.stem = detail::make_convbn<T>(config.in_channels, w, 7, 2, 3);
        m.layer1 = {detail::make_block<T>(w, w, 1), detail::make_block<T>(w, w, 1)};
        m.layer2 = {detail::make_block<T>(w, 2 * w, 2), detail::make_block<T>(2 * w, 2 * w, 1)};
        m.layer3 = {detail::make_block<T>(2 * w, 4 * w, 2), detail::make_block<T>(4 * w, 4 * w, 1)};
        const int d = 4 * w;
        m.branch0 = detail::make_convbn<T>(d, d, 1);
        for (int i = 0; i < 3; ++i) {
            const int r = config.atrous_rates[static_cast<std::size_t>(i)];
            m.branch_atrous[static_cast<std::size_t>(i)] = detail::make_convbn<T>(d, d, 3, 1, r, r);
        }
        m.branch_pool = detail::make_convbn<T>(d, d, 1);
        m.fuse = detail::make_convbn<T>(5 * d, d, 1);
        m.refine = detail::make_convbn<T>(d, d, 3, 1, 1);
        m.classifier = detail::make_conv<T>(d, config.num_classes, 1, 1, 0, 1, true);
        net.aspp = std::move(m);
    } else {
        UnetT<T> m;
        const int widths[4] = {w / 4, w / 2, w, 2 * w};  // (16,32,64,128) at default width
        m.enc[0] = detail::make_convbn<T>(config.in_channels, widths[0], 3, 1, 1);
        for (int i = 1; i < 4; ++i)
            m.enc[static_cast<std::size_t>(i)] = detail::make_convbn<T>(widths[i - 1], widths[i], 3, 1, 1);
        for (int i = 0; i < 3; ++i) {
            const int skip = widths[2 - i];
            const int up = widths[3 - i];
            m.dec_fuse[static_cast<std::size_t>(i)] = detail::make_convbn<T>(up + skip, skip, 1);
            m.dec_conv[static_cast<std::size_t>(i)] = detail::make_convbn<T>(skip, skip, 3, 1, 1);
        }
        m.classifier = detail::make_conv<T>(widths[0], config.num_classes, 1, 1, 0, 1, true);
        net.unet = std::move(m);
    }

    // Kaiming fan-out init for conv weights, unit gamma / zero beta for BN,
    // zero bias; one sampler consumed in visitation order makes two builds
    // with equal seeds bitwise identical.
    NormalSampler sampler(config.seed);
    for_each_param<T>(net, [&sampler](const std::string& path, TensorT<T>& p) {
        if (path.ends_with(".weight")) {
            const Shape4 s = p.shape();
            const double fan_out = static_cast<double>(s.n) * s.h * s.w;
            const double std = std::sqrt(2.0 / fan_out);
            for (std::int64_t i = 0; i < p.numel(); ++i)
                p.data()[i] = static_cast<T>(sampler.next() * std);
        } else if (path.ends_with(".bn.gamma")) {
            std::fill(p.data(), p.data() + p.numel(), T(1));
        } else {
            std::fill(p.data(), p.data() + p.numel(), T(0));
        }
    });
    return net;
}

template <typename T>
NetT<T> build_unet_baseline(ModelConfig config) {
    config.architecture = Arch::Unet;
    return build_model<T>(config);
}

// ---- forward -----------------------------------------------------------------------

template <typename T>
TensorT<T> encoder_forward(NetT<T>& net, const TensorT<T>& x, bool training) {
    require(net.aspp.has_value(), "encoder_forward: aspp architecture only");
    AsppNetT<T>& m = *net.aspp;
    TensorT<T> h = m.stem(x, training);
    h = pool2d(h, PoolKind::Max, 3, 3, 2, 2, 1, 1);
    for (auto& b : net.aspp->layer1) h = b(h, training);
    for (auto& b : net.aspp->layer2) h = b(h, training);
    for (auto& b : net.aspp->layer3) h = b(h, training);
    return h;
}

template <typename T>
TensorT<T> forward(NetT<T>& net, const TensorT<T>& x, bool training) {
    require(x.c() == net.config.in_channels,
            "forward: input has C=" + std::to_string(x.c()) + ", model expects " +
                std::to_string(net.config.in_channels));
    const int mult = net.size_multiple();
    require(x.h() % mult == 0 && x.w() % mult == 0,
            "forward: input " + x.shape().str() + " requires padding to a multiple of " +
                std::to_string(mult) + " (see predict_scene)");

    if (net.aspp) {
        AsppNetT<T>& m = *net.aspp;
        TensorT<T> f = encoder_forward(net, x, training);
        const int fh = f.h(), fw = f.w();
        std::vector<TensorT<T>> branches;
        branches.push_back(m.branch0(f, training));
        for (auto& b : m.branch_atrous) branches.push_back(b(f, training));
        TensorT<T> p = pool2d(f, PoolKind::Avg, 2, 2, 2, 2);
        p = m.branch_pool(p, training);
        branches.push_back(bilinear_resize(p, fh, fw));
        TensorT<T> cat = concat_channels(branches);
        TensorT<T> h = m.fuse(cat, training);
        h = m.refine(h, training);
        TensorT<T> logits16 = m.classifier(h);
        return bilinear_resize(logits16, x.h(), x.w());
    }

    UnetT<T>& m = *net.unet;
    TensorT<T> e1 = m.enc[0](x, training);
    TensorT<T> e2 = m.enc[1](pool2d(e1, PoolKind::Max, 2, 2, 2, 2), training);
    TensorT<T> e3 = m.enc[2](pool2d(e2, PoolKind::Max, 2, 2, 2, 2), training);
    TensorT<T> e4 = m.enc[3](pool2d(e3, PoolKind::Max, 2, 2, 2, 2), training);
    TensorT<T> h = e4;
    const TensorT<T>* skips[3] = {&e3, &e2, &e1};
    for (int i = 0; i < 3; ++i) {
        TensorT<T> up = bilinear_resize(h, skips[i]->h(), skips[i]->w());
        h = m.dec_fuse[static_cast<std::size_t>(i)](concat_channels<T>({up, *skips[i]}), training);
        h = m.dec_conv[static_cast<std::size_t>(i)](h, training);
    }
    return m.classifier(h);
}

// ---- parameter accounting ------------------------------------------------------------

struct ParamCount {
    std::int64_t encoder = 0, decoder = 0, total = 0;
};

template <typename T>
ParamCount count_parameters(NetT<T>& net) {
    ParamCount pc;
    for_each_param<T>(net, [&pc](const std::string& path, TensorT<T>& p) {
        if (path.starts_with("encoder.")) pc.encoder += p.numel();
        else pc.decoder += p.numel();
    });
    pc.total = pc.encoder + pc.decoder;
    return pc;
}

// float->double copy for the finite-difference harness
inline NetT<double> cast_to_double(NetT<float>& src) {
    NetT<double> dst = build_model<double>(src.config);
    std::vector<TensorT<float>*> sp;
    for_each_param<float>(src, [&sp](const std::string&, TensorT<float>& p) { sp.push_back(&p); });
    std::size_t i = 0;
    for_each_param<double>(dst, [&sp, &i](const std::string&, TensorT<double>& p) {
        const TensorT<float>& s = *sp[i++];
        for (std::int64_t j = 0; j < p.numel(); ++j)
            p.data()[j] = static_cast<double>(s.data()[j]);
    });
    std::vector<std::vector<float>*> sb;
    for_each_buffer<float>(src, [&sb](const std::string&, std::vector<float>& b) { sb.push_back(&b); });
    std::size_t k = 0;
    for_each_buffer<double>(dst, [&sb, &k](const std::string&, std::vector<double>& b) {
        const std::vector<float>& s = *sb[k++];
        b.assign(s.begin(), s.end());
    });
    return dst;
}

}  // namespace iceseg
