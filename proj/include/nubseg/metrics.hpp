#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nubseg/common.hpp"

namespace nubseg {

struct BinaryMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;

    static BinaryMask from(int h, int w, std::vector<std::uint8_t> values) {
        check(h > 0 && w > 0, "mask: empty dimensions " + std::to_string(h) + "x" +
                                  std::to_string(w));
        check(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) == values.size(),
              "mask: value count does not match dimensions");
        for (auto x : values)
            check(x == 0 || x == 1, "mask: non-binary value " + std::to_string(int(x)));
        return BinaryMask{h, w, std::move(values)};
    }

    std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
    std::int64_t foreground() const {
        std::int64_t s = 0;
        for (auto x : v) s += x;
        return s;
    }
};

struct PixelMetrics {
    double iou = 0, dice = 0, precision = 0, recall = 0, fom = 0;  // fom = false omission rate
};

struct SurfaceMetrics {
    double hd95 = 0, asd = 0;
};

struct SampleMetrics {
    PixelMetrics px;
    SurfaceMetrics sd;
};

inline void check_same_shape(const BinaryMask& a, const BinaryMask& b, const char* op) {
    check(a.h == b.h && a.w == b.w, std::string(op) + ": mask shapes differ: " +
                                        std::to_string(a.h) + "x" + std::to_string(a.w) +
                                        " vs " + std::to_string(b.h) + "x" +
                                        std::to_string(b.w));
}

// TP/FP/FN/TN metrics. 0/0 cases: IoU, Dice, Precision and Recall are 1 when
// both masks are empty and 0 when only one side is; FOR is 0 when FN+TN = 0.
inline PixelMetrics pixel_metrics(const BinaryMask& pred, const BinaryMask& truth) {
    check_same_shape(pred, truth, "pixel_metrics");
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        const int p = pred.v[i], t = truth.v[i];
        tp += p & t;
        fp += p & (1 - t);
        fn += (1 - p) & t;
        tn += (1 - p) & (1 - t);
    }
    const bool both_empty = (tp + fp == 0) && (tp + fn == 0);
    auto ratio = [both_empty](std::int64_t num, std::int64_t den) {
        if (den == 0) return both_empty ? 1.0 : 0.0;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    PixelMetrics m;
    m.iou = ratio(tp, tp + fp + fn);
    m.dice = ratio(2 * tp, 2 * tp + fp + fn);
    m.precision = ratio(tp, tp + fp);
    m.recall = ratio(tp, tp + fn);
    m.fom = (fn + tn == 0) ? 0.0 : static_cast<double>(fn) / static_cast<double>(fn + tn);
    return m;
}

namespace detail {

// Foreground pixels with at least one background 4-neighbor; out-of-image
// counts as background.
inline std::vector<std::uint8_t> boundary(const BinaryMask& m) {
    std::vector<std::uint8_t> b(m.v.size(), 0);
    for (int r = 0; r < m.h; ++r)
        for (int c = 0; c < m.w; ++c) {
            if (!m.at(r, c)) continue;
            const bool edge = r == 0 || r == m.h - 1 || c == 0 || c == m.w - 1 ||
                              !m.at(r - 1, c) || !m.at(r + 1, c) || !m.at(r, c - 1) ||
                              !m.at(r, c + 1);
            if (edge) b[static_cast<std::size_t>(r) * m.w + c] = 1;
        }
    return b;
}

// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, int n) {
    static constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<int> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n) + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            const int p = v[static_cast<std::size_t>(k)];
            s = ((f[static_cast<std::size_t>(q)] + q * q) -
                 (f[static_cast<std::size_t>(p)] + p * p)) /
                (2.0 * q - 2.0 * p);
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
        const int p = v[static_cast<std::size_t>(k)];
        d[static_cast<std::size_t>(q)] =
            (q - p) * static_cast<double>(q - p) + f[static_cast<std::size_t>(p)];
    }
}

// Squared distance to the nearest site for every grid cell.
inline std::vector<double> edt_sq(const std::vector<std::uint8_t>& sites, int h, int w) {
    static constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> g(sites.size());
    for (std::size_t i = 0; i < sites.size(); ++i) g[i] = sites[i] ? 0.0 : kInf;
    std::vector<double> col(static_cast<std::size_t>(h)), colo(static_cast<std::size_t>(h));
    for (int c = 0; c < w; ++c) {
        bool any = false;
        for (int r = 0; r < h; ++r) {
            col[static_cast<std::size_t>(r)] = g[static_cast<std::size_t>(r) * w + c];
            if (col[static_cast<std::size_t>(r)] == 0.0) any = true;
        }
        if (any) {
            edt_1d(col, colo, h);
            for (int r = 0; r < h; ++r) g[static_cast<std::size_t>(r) * w + c] = colo[static_cast<std::size_t>(r)];
        }
    }
    std::vector<double> row(static_cast<std::size_t>(w)), rowo(static_cast<std::size_t>(w));
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) row[static_cast<std::size_t>(c)] = g[static_cast<std::size_t>(r) * w + c];
        edt_1d(row, rowo, w);
        for (int c = 0; c < w; ++c) g[static_cast<std::size_t>(r) * w + c] = rowo[static_cast<std::size_t>(c)];
    }
    return g;
}

inline void collect_distances(const std::vector<std::uint8_t>& from_boundary,
                              const std::vector<double>& to_sq, std::vector<double>& pool) {
    for (std::size_t i = 0; i < from_boundary.size(); ++i)
        if (from_boundary[i]) pool.push_back(std::sqrt(to_sq[i]));
}

// Linear interpolation between order statistics (values must be sorted).
inline double percentile_sorted(const std::vector<double>& xs, double q) {
    if (xs.empty()) return 0.0;
    if (xs.size() == 1) return xs[0];
    const double rank = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= xs.size()) return xs.back();
    const double frac = rank - static_cast<double>(lo);
    return xs[lo] + frac * (xs[lo + 1] - xs[lo]);
}

}  // namespace detail

// Symmetric boundary-distance metrics. Both masks empty: 0. Exactly one
// empty: the image diagonal, as a penalty.
inline SurfaceMetrics surface_distances(const BinaryMask& pred, const BinaryMask& truth) {
    check_same_shape(pred, truth, "surface_distances");
    const bool pe = pred.foreground() == 0, te = truth.foreground() == 0;
    if (pe && te) return {0.0, 0.0};
    if (pe || te) {
        const double diag = std::sqrt(static_cast<double>(pred.h) * pred.h +
                                      static_cast<double>(pred.w) * pred.w);
        return {diag, diag};
    }
    const auto pb = detail::boundary(pred);
    const auto tb = detail::boundary(truth);
    const auto dt_t = detail::edt_sq(tb, pred.h, pred.w);
    const auto dt_p = detail::edt_sq(pb, pred.h, pred.w);
    std::vector<double> pool;
    detail::collect_distances(pb, dt_t, pool);
    detail::collect_distances(tb, dt_p, pool);
    std::sort(pool.begin(), pool.end());
    SurfaceMetrics m;
    m.hd95 = detail::percentile_sorted(pool, 0.95);
    double s = 0;
    for (double d : pool) s += d;
    m.asd = s / static_cast<double>(pool.size());
    return m;
}

inline SampleMetrics sample_metrics(const BinaryMask& pred, const BinaryMask& truth) {
    return {pixel_metrics(pred, truth), surface_distances(pred, truth)};
}

struct MetricReport {
    std::vector<std::string> ids;
    std::vector<SampleMetrics> rows;
    SampleMetrics mean;

    static MetricReport evaluate(const std::vector<std::pair<BinaryMask, BinaryMask>>& pairs,
                                 std::vector<std::string> ids = {}) {
        check(!pairs.empty(), "evaluate_dataset: empty sample list");
        MetricReport rep;
        rep.ids = std::move(ids);
        if (rep.ids.empty())
            for (std::size_t i = 0; i < pairs.size(); ++i)
                rep.ids.push_back("sample" + std::to_string(i));
        for (const auto& [pred, truth] : pairs) rep.rows.push_back(sample_metrics(pred, truth));
        const double n = static_cast<double>(rep.rows.size());
        for (const auto& r : rep.rows) {
            rep.mean.px.iou += r.px.iou / n;
            rep.mean.px.dice += r.px.dice / n;
            rep.mean.px.precision += r.px.precision / n;
            rep.mean.px.recall += r.px.recall / n;
            rep.mean.px.fom += r.px.fom / n;
            rep.mean.sd.hd95 += r.sd.hd95 / n;
            rep.mean.sd.asd += r.sd.asd / n;
        }
        return rep;
    }

    // Column order follows the usual comparison-table layout.
    std::string to_text() const {
        std::ostringstream os;
        os << std::left << std::setw(16) << "sample" << std::right;
        for (const char* col : {"IoU", "Dice", "Prec.", "Rec.", "FOR", "HD95", "ASD"})
            os << std::setw(10) << col;
        os << '\n';
        auto line = [&os](const std::string& id, const SampleMetrics& m) {
            os << std::left << std::setw(16) << id << std::right << std::fixed
               << std::setprecision(4) << std::setw(10) << m.px.iou << std::setw(10) << m.px.dice
               << std::setw(10) << m.px.precision << std::setw(10) << m.px.recall << std::setw(10)
               << m.px.fom << std::setw(10) << m.sd.hd95 << std::setw(10) << m.sd.asd << '\n';
        };
        for (std::size_t i = 0; i < rows.size(); ++i) line(ids[i], rows[i]);
        line("mean", mean);
        return os.str();
    }

    nlohmann::json to_json() const {
        auto row_json = [](const SampleMetrics& m) {
            return nlohmann::json{{"iou", m.px.iou},       {"dice", m.px.dice},
                                  {"precision", m.px.precision}, {"recall", m.px.recall},
                                  {"for", m.px.fom},       {"hd95", m.sd.hd95},
                                  {"asd", m.sd.asd}};
        };
        nlohmann::json j;
        j["samples"] = nlohmann::json::object();
        for (std::size_t i = 0; i < rows.size(); ++i) j["samples"][ids[i]] = row_json(rows[i]);
        j["mean"] = row_json(mean);
        return j;
    }
};

}  // namespace nubseg
