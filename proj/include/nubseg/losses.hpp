#pragma once

#include <string>

#include "nubseg/blocks.hpp"
#include "nubseg/ops.hpp"

namespace nubseg {

enum class LossKind { Eal, Bce, Dice, BceDice, Focal };

inline const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::Eal: return "eal";
        case LossKind::Bce: return "bce";
        case LossKind::Dice: return "dice";
        case LossKind::BceDice: return "bce_dice";
        case LossKind::Focal: return "focal";
    }
    return "?";
}

inline LossKind loss_from_name(const std::string& s) {
    if (s == "eal") return LossKind::Eal;
    if (s == "bce") return LossKind::Bce;
    if (s == "dice") return LossKind::Dice;
    if (s == "bce_dice" || s == "bce+dice") return LossKind::BceDice;
    if (s == "focal") return LossKind::Focal;
    throw std::invalid_argument("unknown loss kind '" + s + "'");
}

struct LossConfig {
    LossKind kind = LossKind::Eal;
    double edge_weight = 5.0;  // w > 1
    double edge_threshold = 0.1;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double dice_smooth = 1.0;
};

namespace detail {

constexpr double kProbClamp = 1e-7;

template <class T>
void check_pair(const Tensor<T>& y_true, const Tensor<T>& y_pred, const char* op) {
    check(y_true.shape() == y_pred.shape(),
          std::string(op) + ": shape mismatch between truth " + shape_str(y_true.shape()) +
              " and prediction " + shape_str(y_pred.shape()));
}

// -[y log p + (1-y) log(1-p)] per element, prediction clamped away from {0,1}.
template <class T>
Tensor<T> bce_map(const Tensor<T>& y_true, const Tensor<T>& y_pred) {
    auto p = clamp(y_pred, T(kProbClamp), T(1) - T(kProbClamp));
    auto one_minus_y = scalar_add(neg(y_true), T(1));
    auto one_minus_p = scalar_add(neg(p), T(1));
    return neg(add(mul(y_true, nubseg::log(p)), mul(one_minus_y, nubseg::log(one_minus_p))));
}

}  // namespace detail

// Per Eq-style edge weighting: Sobel responses of the ground truth,
// thresholded on the gradient magnitude and averaged over channels. The mask
// depends only on the ground truth and is treated as a constant weight map.
template <class T>
Tensor<T> edge_mask(const Tensor<T>& y_true, T threshold = T(0.1)) {
    check(y_true.rank() == 4, "edge_mask: expected NCHW, got " + shape_str(y_true.shape()));
    NoGradGuard ng;
    auto [sx, sy] = sobel_pair(y_true.detached());
    const int n = y_true.dim(0), c = y_true.dim(1), h = y_true.dim(2), w = y_true.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    auto mask = Tensor<T>::zeros({n, 1, h, w});
    const T* gx = sx.data();
    const T* gy = sy.data();
    T* m = mask.data();
    const T inv_c = T(1) / static_cast<T>(c);
    for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
            const std::int64_t base = (static_cast<std::int64_t>(in) * c + ic) * plane;
            T* mp = m + static_cast<std::int64_t>(in) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const T mag = std::sqrt(gx[base + i] * gx[base + i] + gy[base + i] * gy[base + i]);
                if (mag > threshold) mp[i] += inv_c;
            }
        }
    return mask;
}

// Edge-aware loss: mean over all pixels of (1 + em*(w-1)) * BCE.
template <class T>
Tensor<T> eal(const Tensor<T>& y_true, const Tensor<T>& y_pred, T w, T threshold = T(0.1)) {
    detail::check_pair(y_true, y_pred, "eal");
    auto em = edge_mask(y_true, threshold);
    auto weight = scalar_add(scalar_mul(em, w - T(1)), T(1));
    return mean_all(mul(detail::bce_map(y_true, y_pred), weight));
}

template <class T>
Tensor<T> bce_loss(const Tensor<T>& y_true, const Tensor<T>& y_pred) {
    detail::check_pair(y_true, y_pred, "bce");
    return mean_all(detail::bce_map(y_true, y_pred));
}

template <class T>
Tensor<T> dice_loss(const Tensor<T>& y_true, const Tensor<T>& y_pred, T smooth = T(1)) {
    detail::check_pair(y_true, y_pred, "dice");
    auto p = clamp(y_pred, T(detail::kProbClamp), T(1) - T(detail::kProbClamp));
    auto inter = sum_all(mul(p, y_true));
    auto total = add(sum_all(p), sum_all(y_true));
    auto ratio = div(scalar_add(scalar_mul(inter, T(2)), smooth), scalar_add(total, smooth));
    return scalar_add(neg(ratio), T(1));
}

template <class T>
Tensor<T> focal_loss(const Tensor<T>& y_true, const Tensor<T>& y_pred, T gamma = T(2),
                     T alpha = T(0.25)) {
    detail::check_pair(y_true, y_pred, "focal");
    auto p = clamp(y_pred, T(detail::kProbClamp), T(1) - T(detail::kProbClamp));
    auto one_minus_y = scalar_add(neg(y_true), T(1));
    auto one_minus_p = scalar_add(neg(p), T(1));
    auto pt = add(mul(y_true, p), mul(one_minus_y, one_minus_p));
    auto focus = pow_scalar(scalar_add(neg(pt), T(1)), gamma);
    return mean_all(scalar_mul(mul(focus, nubseg::log(pt)), -alpha));
}

template <class T>
Tensor<T> segmentation_loss(const Tensor<T>& y_true, const Tensor<T>& y_pred,
                            const LossConfig& cfg) {
    switch (cfg.kind) {
        case LossKind::Eal:
            return eal(y_true, y_pred, static_cast<T>(cfg.edge_weight),
                       static_cast<T>(cfg.edge_threshold));
        case LossKind::Bce:
            return bce_loss(y_true, y_pred);
        case LossKind::Dice:
            return dice_loss(y_true, y_pred, static_cast<T>(cfg.dice_smooth));
        case LossKind::BceDice:
            return add(bce_loss(y_true, y_pred),
                       dice_loss(y_true, y_pred, static_cast<T>(cfg.dice_smooth)));
        case LossKind::Focal:
            return focal_loss(y_true, y_pred, static_cast<T>(cfg.focal_gamma),
                              static_cast<T>(cfg.focal_alpha));
    }
    throw std::invalid_argument("segmentation_loss: bad kind");
}

}  // namespace nubseg
