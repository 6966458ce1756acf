#pragma once

#include <string>
#include <vector>

#include "nubseg/ops.hpp"
#include "nubseg/rng.hpp"
#include "nubseg/tensor.hpp"

namespace nubseg {

template <class T>
struct ParamEntry {
    std::string name;
    Tensor<T> tensor;
    bool trainable;  // batchnorm running stats are registered as buffers
};

// Creates and registers named parameters in construction order. Weight init
// is HeUniform: uniform(-b, b) with b = sqrt(6 / fan_in).
template <class T>
class Builder {
public:
    explicit Builder(std::uint64_t seed) : rng_(mix(seed, 0x6e7562ULL)) {}

    Tensor<T> he_uniform(std::string name, Shape shape, int fan_in) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<T> v(static_cast<std::size_t>(numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng_.uniform(-bound, bound));
        auto t = Tensor<T>::from(std::move(shape), std::move(v));
        t.set_requires_grad(true);
        entries_.push_back({std::move(name), t, true});
        return t;
    }

    Tensor<T> constant(std::string name, Shape shape, T v, bool trainable = true) {
        auto t = Tensor<T>::full(std::move(shape), v);
        t.set_requires_grad(trainable);
        entries_.push_back({std::move(name), t, trainable});
        return t;
    }

    std::vector<ParamEntry<T>>& entries() { return entries_; }
    const std::vector<ParamEntry<T>>& entries() const { return entries_; }

private:
    Rng rng_;
    std::vector<ParamEntry<T>> entries_;
};

// ---------------------------------------------------------------------------
// Convolution block: twice [depthwise-separable conv -> batchnorm -> leaky].
// ---------------------------------------------------------------------------

template <class T>
struct ConvBlock {
    Tensor<T> dw1, pw1, pb1, g1, b1, rm1, rv1;
    Tensor<T> dw2, pw2, pb2, g2, b2, rm2, rv2;
    int in_ch = 0, out_ch = 0, dilation = 1;
    T alpha = T(0.01);

    ConvBlock() = default;
    ConvBlock(Builder<T>& b, const std::string& p, int cin, int cout, int dil = 1,
              T slope = T(0.01))
        : in_ch(cin), out_ch(cout), dilation(dil), alpha(slope) {
        dw1 = b.he_uniform(p + ".dw1", {cin, 1, 3, 3}, 9);
        pw1 = b.he_uniform(p + ".pw1", {cout, cin, 1, 1}, cin);
        pb1 = b.constant(p + ".pw1_b", {cout}, T(0));
        g1 = b.constant(p + ".bn1_g", {cout}, T(1));
        b1 = b.constant(p + ".bn1_b", {cout}, T(0));
        rm1 = b.constant(p + ".bn1_rm", {cout}, T(0), false);
        rv1 = b.constant(p + ".bn1_rv", {cout}, T(1), false);
        dw2 = b.he_uniform(p + ".dw2", {cout, 1, 3, 3}, 9);
        pw2 = b.he_uniform(p + ".pw2", {cout, cout, 1, 1}, cout);
        pb2 = b.constant(p + ".pw2_b", {cout}, T(0));
        g2 = b.constant(p + ".bn2_g", {cout}, T(1));
        b2 = b.constant(p + ".bn2_b", {cout}, T(0));
        rm2 = b.constant(p + ".bn2_rm", {cout}, T(0), false);
        rv2 = b.constant(p + ".bn2_rv", {cout}, T(1), false);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        check(x.dim(1) == in_ch, "conv_block: input " + shape_str(x.shape()) + " expected " +
                                     std::to_string(in_ch) + " channels");
        auto h = depthwise_separable_conv(x, dw1, Tensor<T>{}, pw1, pb1, 1, dilation);
        h = leaky_relu(batchnorm2d(h, g1, b1, rm1, rv1, train), alpha);
        h = depthwise_separable_conv(h, dw2, Tensor<T>{}, pw2, pb2, 1, dilation);
        return leaky_relu(batchnorm2d(h, g2, b2, rm2, rv2, train), alpha);
    }
};

// ---------------------------------------------------------------------------
// Additive attention gate (Attention U-Net style).
// ---------------------------------------------------------------------------

template <class T>
struct AttentionGate {
    Tensor<T> wx, wxb, wg, wgb, psi, psib;
    int f_int = 0;
    T alpha = T(0.01);

    AttentionGate() = default;
    AttentionGate(Builder<T>& b, const std::string& p, int cx, int cg, T slope = T(0.01))
        : f_int(std::max(cx / 2, 1)), alpha(slope) {
        wx = b.he_uniform(p + ".wx", {f_int, cx, 1, 1}, cx);
        wxb = b.constant(p + ".wx_b", {f_int}, T(0));
        wg = b.he_uniform(p + ".wg", {f_int, cg, 1, 1}, cg);
        wgb = b.constant(p + ".wg_b", {f_int}, T(0));
        psi = b.he_uniform(p + ".psi", {1, f_int, 1, 1}, f_int);
        psib = b.constant(p + ".psi_b", {1}, T(0));
    }

    // alpha map in (0,1), one channel, broadcast over x's channels.
    Tensor<T> gate_map(const Tensor<T>& x, const Tensor<T>& g) {
        check(x.dim(2) == g.dim(2) && x.dim(3) == g.dim(3),
              "attention_gate: spatial mismatch between x " + shape_str(x.shape()) + " and g " +
                  shape_str(g.shape()));
        auto t = add(conv2d(x, wx, wxb), conv2d(g, wg, wgb));
        return sigmoid(conv2d(leaky_relu(t, alpha), psi, psib));
    }

    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& g) {
        return mul(x, gate_map(x, g));
    }
};

// ---------------------------------------------------------------------------
// Nested UNet block.
// ---------------------------------------------------------------------------

struct NubSpec {
    int n = 4;               // depth parameter; conv blocks total 2n
    bool bridge = false;     // no pooling, encoder dilations 1,2,4
    int in_channels = 8;
    int base_channels = 8;
    bool inner_attention = true;

    int divisor() const { return bridge ? 1 : (1 << (n - 2)); }
};

struct NubStructure {
    int conv_blocks = 0;
    int pools = 0;
    int upsamples = 0;
    int attention_gates = 0;
};

template <class T>
struct Nub {
    NubSpec spec;
    Upsample up_mode = Upsample::Bilinear;
    ConvBlock<T> first;
    std::vector<ConvBlock<T>> enc;  // n-2 pooled levels plus one bottleneck
    std::vector<ConvBlock<T>> dec;  // n-2 merge blocks
    std::vector<AttentionGate<T>> gates;
    ConvBlock<T> fusion, out_block;
    Tensor<T> res_proj, res_proj_b;

    Nub() = default;
    Nub(Builder<T>& b, const std::string& p, const NubSpec& s,
        Upsample up = Upsample::Bilinear)
        : spec(s), up_mode(up) {
        check(s.n >= 4 && s.n <= 7, "nub: N must be in {4..7}, got " + std::to_string(s.n));
        check(!s.bridge || s.n == 4, "nub: bridge variant fixes N = 4");
        const int c = s.base_channels;
        first = ConvBlock<T>(b, p + ".first", s.in_channels, c);
        for (int l = 1; l <= s.n - 2; ++l) {
            const int dil = s.bridge ? (1 << (l - 1)) : 1;  // bridge: 1, 2
            enc.emplace_back(b, p + ".enc" + std::to_string(l - 1), c, c, dil);
        }
        enc.emplace_back(b, p + ".enc" + std::to_string(s.n - 2), c, c, s.bridge ? 4 : 1);
        for (int i = 0; i < s.n - 2; ++i) {
            if (s.inner_attention)
                gates.emplace_back(b, p + ".gate" + std::to_string(i), c, c);
            dec.emplace_back(b, p + ".dec" + std::to_string(i), 2 * c, c);
        }
        fusion = ConvBlock<T>(b, p + ".fusion", c, c);
        out_block = ConvBlock<T>(b, p + ".out", c, c);
        res_proj = b.he_uniform(p + ".res_proj", {c, s.in_channels, 1, 1}, s.in_channels);
        res_proj_b = b.constant(p + ".res_proj_b", {c}, T(0));
    }

    NubStructure structure() const {
        NubStructure st;
        st.conv_blocks = 1 + static_cast<int>(enc.size() + dec.size()) + 2;
        st.pools = spec.bridge ? 0 : spec.n - 2;
        st.upsamples = st.pools;
        st.attention_gates = static_cast<int>(gates.size());
        return st;
    }

    std::vector<int> encoder_dilations() const {
        std::vector<int> d;
        for (const auto& e : enc) d.push_back(e.dilation);
        return d;
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        const int div = spec.divisor();
        check(x.dim(2) % div == 0 && x.dim(3) % div == 0,
              "nub: input " + shape_str(x.shape()) + " spatial extents must be divisible by " +
                  std::to_string(div));
        auto cur = first.forward(x, train);
        std::vector<Tensor<T>> skips{cur};
        for (int l = 1; l <= spec.n - 2; ++l) {
            if (!spec.bridge) cur = maxpool2(cur);
            cur = enc[static_cast<std::size_t>(l - 1)].forward(cur, train);
            if (l < spec.n - 2) skips.push_back(cur);
        }
        cur = enc.back().forward(cur, train);  // bottleneck
        for (int i = 0; i < spec.n - 2; ++i) {
            if (!spec.bridge) cur = upsample2(cur, up_mode);
            auto& skip = skips[static_cast<std::size_t>(spec.n - 3 - i)];
            auto merged = spec.inner_attention
                              ? gates[static_cast<std::size_t>(i)].forward(skip, cur)
                              : skip;
            cur = dec[static_cast<std::size_t>(i)].forward(concat<T>({merged, cur}, 1), train);
        }
        cur = out_block.forward(fusion.forward(cur, train), train);
        return add(cur, conv2d(x, res_proj, res_proj_b));
    }
};

// ---------------------------------------------------------------------------
// Channel attention module.
// ---------------------------------------------------------------------------

template <class T>
struct Cam {
    ConvBlock<T> refine;
    Tensor<T> w1, b1, w2, b2;
    int channels = 0, hidden = 0;

    Cam() = default;
    Cam(Builder<T>& b, const std::string& p, int c, int reduction = 4)
        : channels(c), hidden(std::max(c / reduction, 1)) {
        refine = ConvBlock<T>(b, p + ".refine", c, c);
        w1 = b.he_uniform(p + ".fc1", {c, hidden}, c);
        b1 = b.constant(p + ".fc1_b", {hidden}, T(0));
        w2 = b.he_uniform(p + ".fc2", {hidden, c}, hidden);
        b2 = b.constant(p + ".fc2_b", {c}, T(0));
    }

    struct Parts {
        Tensor<T> refined;
        Tensor<T> weights;  // (N, C), entries in (0,1)
        Tensor<T> out;
    };

    Parts forward_parts(const Tensor<T>& x, bool train) {
        Parts parts;
        parts.refined = refine.forward(x, train);
        auto pooled = add(global_avg_pool(parts.refined), global_max_pool(parts.refined));
        auto h = swish(dense(pooled, w1, b1));
        parts.weights = sigmoid(dense(h, w2, b2));
        auto s4 = reshape(parts.weights, {x.dim(0), channels, 1, 1});
        parts.out = mul(parts.refined, s4);
        return parts;
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) { return forward_parts(x, train).out; }
};

// ---------------------------------------------------------------------------
// Attention module over spatial positions (skip/decoder fusion).
// ---------------------------------------------------------------------------

template <class T>
struct Am {
    ConvBlock<T> res_block;
    Tensor<T> res_proj, res_proj_b;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    int cs = 0, cd = 0, c = 0, d = 0;
    int resolution_cap = 4096;  // max H*W

    Am() = default;
    Am(Builder<T>& b, const std::string& p, int skip_ch, int deep_ch, int cap = 4096)
        : cs(skip_ch), cd(deep_ch), c(skip_ch + deep_ch), d(std::max((skip_ch + deep_ch) / 2, 1)),
          resolution_cap(cap) {
        res_block = ConvBlock<T>(b, p + ".res_block", cs, cs);
        res_proj = b.he_uniform(p + ".res_proj", {cs, cs, 1, 1}, cs);
        res_proj_b = b.constant(p + ".res_proj_b", {cs}, T(0));
        wq = b.he_uniform(p + ".q", {c, d}, c);
        bq = b.constant(p + ".q_b", {d}, T(0));
        wk = b.he_uniform(p + ".k", {c, d}, c);
        bk = b.constant(p + ".k_b", {d}, T(0));
        wv = b.he_uniform(p + ".v", {c, d}, c);
        bv = b.constant(p + ".v_b", {d}, T(0));
        wo = b.he_uniform(p + ".o", {d, c}, d);
        bo = b.constant(p + ".o_b", {c}, T(0));
    }

    struct Parts {
        Tensor<T> merged;  // concat(residual-refined skip, deep): (N, C, H, W)
        Tensor<T> out;
    };

    Parts forward_parts(const Tensor<T>& skip, const Tensor<T>& deep, bool train) {
        check(skip.dim(2) == deep.dim(2) && skip.dim(3) == deep.dim(3),
              "am: spatial mismatch between skip " + shape_str(skip.shape()) + " and deep " +
                  shape_str(deep.shape()));
        const int n = skip.dim(0), h = skip.dim(2), w = skip.dim(3);
        const int len = h * w;
        check(len <= resolution_cap,
              "am: " + std::to_string(len) + " positions exceed the attention cap of " +
                  std::to_string(resolution_cap) + "; reduce the feature resolution");
        Parts parts;
        auto s1 = add(res_block.forward(skip, train), conv2d(skip, res_proj, res_proj_b));
        parts.merged = concat<T>({s1, deep}, 1);
        auto seq = transpose_021(reshape(parts.merged, {n, c, len}));  // (N, L, C)
        auto q = dense(seq, wq, bq);
        auto k = dense(seq, wk, bk);
        auto v = dense(seq, wv, bv);
        auto o = attention(q, k, v);
        auto oc = dense(o, wo, bo);
        auto spatial = reshape(transpose_021(oc), {n, c, h, w});
        parts.out = add(spatial, parts.merged);
        return parts;
    }

    Tensor<T> forward(const Tensor<T>& skip, const Tensor<T>& deep, bool train) {
        return forward_parts(skip, deep, train).out;
    }

    // Row-stochastic attention matrix (N, L, L) via the composed softmax
    // route; diagnostic/no-grad use.
    Tensor<T> attention_weights(const Tensor<T>& skip, const Tensor<T>& deep) {
        NoGradGuard ng;
        const int n = skip.dim(0), h = skip.dim(2), w = skip.dim(3);
        const int len = h * w;
        auto s1 = add(res_block.forward(skip, false), conv2d(skip, res_proj, res_proj_b));
        auto merged = concat<T>({s1, deep}, 1);
        auto seq = transpose_021(reshape(merged, {n, c, len}));
        auto q = dense(seq, wq, bq);
        auto k = dense(seq, wk, bk);
        auto scores = scalar_mul(matmul(q, transpose_021(k)), T(1) / std::sqrt(static_cast<T>(d)));
        return softmax(scores, 2);
    }
};

// ---------------------------------------------------------------------------
// Edge enhancement layer (fixed Sobel filters, no parameters).
// ---------------------------------------------------------------------------

enum class EelMode { Magnitude, Residual };

namespace detail {

template <class T>
Tensor<T> sobel_kernel_x(int channels) {
    std::vector<T> base = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    std::vector<T> v;
    v.reserve(static_cast<std::size_t>(channels) * 9);
    for (int c = 0; c < channels; ++c) v.insert(v.end(), base.begin(), base.end());
    return Tensor<T>::from({channels, 1, 3, 3}, std::move(v));
}

template <class T>
Tensor<T> sobel_kernel_y(int channels) {
    std::vector<T> base = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    std::vector<T> v;
    v.reserve(static_cast<std::size_t>(channels) * 9);
    for (int c = 0; c < channels; ++c) v.insert(v.end(), base.begin(), base.end());
    return Tensor<T>::from({channels, 1, 3, 3}, std::move(v));
}

}  // namespace detail

// Depthwise Sobel responses (Ex, Ey) with zero same-padding.
template <class T>
std::pair<Tensor<T>, Tensor<T>> sobel_pair(const Tensor<T>& x) {
    const int c = x.dim(1);
    auto ex = conv2d(x, detail::sobel_kernel_x<T>(c), Tensor<T>{}, 1, 1, Pad::Same, c);
    auto ey = conv2d(x, detail::sobel_kernel_y<T>(c), Tensor<T>{}, 1, 1, Pad::Same, c);
    return {ex, ey};
}

// E = sqrt(Ex^2 + Ey^2 + eps); Magnitude returns E, Residual returns x + lambda * E.
template <class T>
Tensor<T> eel_forward(const Tensor<T>& x, EelMode mode = EelMode::Residual, T lambda = T(1),
                      T eps = T(1e-12)) {
    auto [ex, ey] = sobel_pair(x);
    auto e = nubseg::sqrt(scalar_add(add(square(ex), square(ey)), eps));
    if (mode == EelMode::Magnitude) return e;
    return add(x, scalar_mul(e, lambda));
}

}  // namespace nubseg
