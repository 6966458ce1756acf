#pragma once

// Brute-force reference implementations used only by the test suites. These
// are written directly from the operation definitions and stay independent
// of the library kernels they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

struct Grid4 {
    int n, c, h, w;
    std::vector<double> v;
    double& at(int in, int ic, int ih, int iw) {
        return v[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
    }
    double at(int in, int ic, int ih, int iw) const {
        return v[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
    }
};

inline Grid4 make_grid(int n, int c, int h, int w) {
    return Grid4{n, c, h, w, std::vector<double>(static_cast<std::size_t>(n) * c * h * w, 0.0)};
}

// Direct cross-correlation with zero padding, per the textbook definition.
inline Grid4 conv2d_ref(const Grid4& x, const Grid4& k, const std::vector<double>& bias,
                        int stride, int dilation, bool same, int groups) {
    const int span = (k.h - 1) * dilation;
    int ho, wo, pad_top, pad_left;
    if (same) {
        ho = x.h / stride;
        wo = x.w / stride;
        pad_top = std::max(0, ((ho - 1) * stride + span + 1 - x.h) / 2);
        pad_left = std::max(0, ((wo - 1) * stride + span + 1 - x.w) / 2);
    } else {
        ho = (x.h - span - 1) / stride + 1;
        wo = (x.w - span - 1) / stride + 1;
        pad_top = pad_left = 0;
    }
    const int cin_g = x.c / groups, cout_g = k.n / groups;
    Grid4 y = make_grid(x.n, k.n, ho, wo);
    for (int n = 0; n < x.n; ++n)
        for (int oc = 0; oc < k.n; ++oc)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(oc)];
                    const int grp = oc / cout_g;
                    for (int icg = 0; icg < cin_g; ++icg)
                        for (int dy = 0; dy < k.h; ++dy)
                            for (int dx = 0; dx < k.w; ++dx) {
                                const int ih = oh * stride - pad_top + dy * dilation;
                                const int iw = ow * stride - pad_left + dx * dilation;
                                if (ih < 0 || ih >= x.h || iw < 0 || iw >= x.w) continue;
                                acc += x.at(n, grp * cin_g + icg, ih, iw) * k.at(oc, icg, dy, dx);
                            }
                    y.at(n, oc, oh, ow) = acc;
                }
    return y;
}

// align_corners=false bilinear x2 upsample from the interpolation formula.
inline Grid4 upsample2_bilinear_ref(const Grid4& x) {
    Grid4 y = make_grid(x.n, x.c, x.h * 2, x.w * 2);
    auto src = [](int o) { return std::max(0.0, (o + 0.5) * 0.5 - 0.5); };
    for (int n = 0; n < x.n; ++n)
        for (int c = 0; c < x.c; ++c)
            for (int i = 0; i < y.h; ++i)
                for (int j = 0; j < y.w; ++j) {
                    const double sy = src(i), sx = src(j);
                    const int r0 = std::min(static_cast<int>(sy), x.h - 1);
                    const int c0 = std::min(static_cast<int>(sx), x.w - 1);
                    const int r1 = std::min(r0 + 1, x.h - 1);
                    const int c1 = std::min(c0 + 1, x.w - 1);
                    const double wr = sy - r0, wc = sx - c0;
                    y.at(n, c, i, j) = (1 - wr) * ((1 - wc) * x.at(n, c, r0, c0) +
                                                   wc * x.at(n, c, r0, c1)) +
                                       wr * ((1 - wc) * x.at(n, c, r1, c0) +
                                             wc * x.at(n, c, r1, c1));
                }
    return y;
}

}  // namespace oracle
