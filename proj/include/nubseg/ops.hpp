#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "nubseg/tensor.hpp"

namespace nubseg {

enum class Pad { Same, Valid };
enum class Upsample { Nearest, Bilinear };

namespace detail {

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
Tensor<T> wrap(NodePtr<T> n) {
    assert_finite(*n);
    return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// elementwise helpers
// ---------------------------------------------------------------------------

// fwd: x -> y.  dfdx: (x, y) -> local derivative.
template <class T, class Fwd, class Dfdx>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Dfdx dfdx) {
    auto px = x.node();
    auto out = make_result<T>(
        x.shape(), {px}, [px, dfdx](Node<T>& self) {
            if (!px->requires_grad) return;
            const T* xv = px->value.data();
            const T* yv = self.value.data();
            const T* g = self.grad.data();
            T* gx = px->grad_data();
            const std::int64_t n = self.numel();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
        });
    const T* xv = px->value.data();
    T* yv = out->value.data();
    const std::int64_t n = out->numel();
    for (std::int64_t i = 0; i < n; ++i) yv[i] = fwd(xv[i]);
    return wrap(std::move(out));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    check(a.size() == b.size(), std::string(op) + ": rank mismatch between " + shape_str(a) +
                                    " and " + shape_str(b));
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        check(a[i] == b[i] || a[i] == 1 || b[i] == 1,
              std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
        out[i] = std::max(a[i], b[i]);
    }
    return out;
}

inline std::vector<std::int64_t> strides_of(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 0);
    std::int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= s[static_cast<std::size_t>(i)];
    }
    return st;
}

// Strides that read a tensor of shape `s` as if broadcast to `out` (zero
// stride along broadcast dims).
inline std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    auto st = strides_of(s);
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i] == 1 && out[i] != 1) st[i] = 0;
    return st;
}

// Apply f(out_index, a_index, b_index) over a broadcast result shape.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F f) {
    const std::size_t rank = out.size();
    std::vector<int> idx(rank, 0);
    const std::int64_t total = numel(out);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t io = 0; io < total; ++io) {
        f(io, ia, ib);
        for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            ia += sa[ud];
            ib += sb[ud];
            if (++idx[ud] < out[ud]) break;
            ia -= sa[ud] * out[ud];
            ib -= sb[ud] * out[ud];
            idx[ud] = 0;
        }
    }
}

// fwd(a, b) -> y;  dfda / dfdb: (a, b, g) -> grad contribution.
template <class T, class Fwd, class Dfda, class Dfdb>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Dfda dfda,
                 Dfdb dfdb) {
    Shape os = broadcast_shape(a.shape(), b.shape(), name);
    auto pa = a.node();
    auto pb = b.node();
    const bool same = a.shape() == b.shape();
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    auto out = make_result<T>(
        os, {pa, pb}, [pa, pb, sa, sb, same, dfda, dfdb](Node<T>& self) {
            const T* av = pa->value.data();
            const T* bv = pb->value.data();
            const T* g = self.grad.data();
            if (same) {
                const std::int64_t n = self.numel();
                if (pa->requires_grad) {
                    T* ga = pa->grad_data();
                    for (std::int64_t i = 0; i < n; ++i) ga[i] += dfda(av[i], bv[i], g[i]);
                }
                if (pb->requires_grad) {
                    T* gb = pb->grad_data();
                    for (std::int64_t i = 0; i < n; ++i) gb[i] += dfdb(av[i], bv[i], g[i]);
                }
                return;
            }
            T* ga = pa->requires_grad ? pa->grad_data() : nullptr;
            T* gb = pb->requires_grad ? pb->grad_data() : nullptr;
            for_each_broadcast(self.shape, sa, sb,
                               [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
                                   if (ga) ga[ia] += dfda(av[ia], bv[ib], g[io]);
                                   if (gb) gb[ib] += dfdb(av[ia], bv[ib], g[io]);
                               });
        });
    const T* av = pa->value.data();
    const T* bv = pb->value.data();
    T* yv = out->value.data();
    if (same) {
        const std::int64_t n = out->numel();
        for (std::int64_t i = 0; i < n; ++i) yv[i] = fwd(av[i], bv[i]);
    } else {
        for_each_broadcast(os, sa, sb, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
            yv[io] = fwd(av[ia], bv[ib]);
        });
    }
    return wrap(std::move(out));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return std::sqrt(v); },
                         [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
    if (p == T(0)) {
        return detail::unary(x, [](T) { return T(1); }, [](T, T) { return T(0); });
    }
    return detail::unary(x, [p](T v) { return std::pow(v, p); },
                         [p](T v, T) { return p * std::pow(v, p - T(1)); });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    return detail::unary(x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
                         [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <class T>
Tensor<T> scalar_mul(const Tensor<T>& x, T c) {
    return detail::unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> scalar_add(const Tensor<T>& x, T c) {
    return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha = T(0.01)) {
    return detail::unary(x, [alpha](T v) { return v >= T(0) ? v : alpha * v; },
                         [alpha](T v, T) { return v >= T(0) ? T(1) : alpha; });
}

namespace detail {
template <class T>
inline T sigmoid_stable(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    T e = std::exp(v);
    return e / (T(1) + e);
}
}  // namespace detail

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return detail::sigmoid_stable(v); },
                         [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> swish(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return v * detail::sigmoid_stable(v); },
                         [](T v, T) {
                             T s = detail::sigmoid_stable(v);
                             return s + v * s * (T(1) - s);
                         });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, "add", [](T x, T y) { return x + y; },
                          [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, "sub", [](T x, T y) { return x - y; },
                          [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, "mul", [](T x, T y) { return x * y; },
                          [](T, T y, T g) { return g * y; }, [](T x, T, T g) { return g * x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(a, b, "div", [](T x, T y) { return x / y; },
                          [](T, T y, T g) { return g / y; },
                          [](T x, T y, T g) { return -g * x / (y * y); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto px = x.node();
    auto out = detail::make_result<T>(Shape{1}, {px}, [px](Node<T>& self) {
        if (!px->requires_grad) return;
        T g = self.grad[0];
        T* gx = px->grad_data();
        const std::int64_t n = px->numel();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    T acc = T(0);
    for (T v : px->value) acc += v;
    out->value[0] = acc;
    return detail::wrap(std::move(out));
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    return scalar_mul(sum_all(x), inv);
}

// Mean over the given axes (result drops them).
template <class T>
Tensor<T> mean_axes(const Tensor<T>& x, std::vector<int> axes) {
    std::sort(axes.begin(), axes.end());
    const auto& xs = x.shape();
    Shape os;
    std::int64_t reduced = 1;
    std::vector<bool> is_axis(xs.size(), false);
    for (int a : axes) {
        check(a >= 0 && a < x.rank(), "mean_axes: axis out of range for " + shape_str(xs));
        is_axis[static_cast<std::size_t>(a)] = true;
        reduced *= xs[static_cast<std::size_t>(a)];
    }
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (!is_axis[i]) os.push_back(xs[i]);
    if (os.empty()) os = {1};

    // Input->output index map expressed through strides.
    auto xst = detail::strides_of(xs);
    auto ost = detail::strides_of(os);
    std::vector<std::int64_t> omap(xs.size(), 0);
    std::size_t oi = 0;
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (!is_axis[i]) omap[i] = ost[oi++];

    auto px = x.node();
    const T inv = T(1) / static_cast<T>(reduced);
    auto out = detail::make_result<T>(os, {px}, [px, xs, omap, inv](Node<T>& self) {
        if (!px->requires_grad) return;
        const T* g = self.grad.data();
        T* gx = px->grad_data();
        const std::int64_t n = px->numel();
        std::vector<int> idx(xs.size(), 0);
        std::int64_t io = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            gx[i] += g[io] * inv;
            for (int d = static_cast<int>(xs.size()) - 1; d >= 0; --d) {
                auto ud = static_cast<std::size_t>(d);
                io += omap[ud];
                if (++idx[ud] < xs[ud]) break;
                io -= omap[ud] * xs[ud];
                idx[ud] = 0;
            }
        }
    });
    std::fill(out->value.begin(), out->value.end(), T(0));
    {
        const T* xv = px->value.data();
        T* yv = out->value.data();
        const std::int64_t n = px->numel();
        std::vector<int> idx(xs.size(), 0);
        std::int64_t io = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            yv[io] += xv[i] * inv;
            for (int d = static_cast<int>(xs.size()) - 1; d >= 0; --d) {
                auto ud = static_cast<std::size_t>(d);
                io += omap[ud];
                if (++idx[ud] < xs[ud]) break;
                io -= omap[ud] * xs[ud];
                idx[ud] = 0;
            }
        }
    }
    return detail::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    check(numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto px = x.node();
    auto out = detail::make_result<T>(shape, {px}, [px](Node<T>& self) {
        if (!px->requires_grad) return;
        T* gx = px->grad_data();
        const T* g = self.grad.data();
        const std::int64_t n = self.numel();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
    out->value = px->value;
    return detail::wrap(std::move(out));
}

// [B, X, Y] -> [B, Y, X]
template <class T>
Tensor<T> transpose_021(const Tensor<T>& x) {
    check(x.rank() == 3, "transpose_021: expected rank-3, got " + shape_str(x.shape()));
    const int B = x.dim(0), X = x.dim(1), Y = x.dim(2);
    auto px = x.node();
    auto out = detail::make_result<T>(Shape{B, Y, X}, {px}, [px, B, X, Y](Node<T>& self) {
        if (!px->requires_grad) return;
        T* gx = px->grad_data();
        const T* g = self.grad.data();
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < Y; ++j)
                for (int i = 0; i < X; ++i)
                    gx[(static_cast<std::int64_t>(b) * X + i) * Y + j] +=
                        g[(static_cast<std::int64_t>(b) * Y + j) * X + i];
    });
    const T* xv = px->value.data();
    T* yv = out->value.data();
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < X; ++i)
            for (int j = 0; j < Y; ++j)
                yv[(static_cast<std::int64_t>(b) * Y + j) * X + i] =
                    xv[(static_cast<std::int64_t>(b) * X + i) * Y + j];
    return detail::wrap(std::move(out));
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    check(!xs.empty(), "concat: no inputs");
    const Shape& s0 = xs[0].shape();
    check(axis >= 0 && axis < xs[0].rank(), "concat: bad axis for " + shape_str(s0));
    Shape os = s0;
    int total = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        check(s.size() == s0.size(), "concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
        for (std::size_t i = 0; i < s.size(); ++i)
            check(static_cast<int>(i) == axis || s[i] == s0[i],
                  "concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
        total += s[static_cast<std::size_t>(axis)];
    }
    os[static_cast<std::size_t>(axis)] = total;

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<detail::NodePtr<T>> parents;
    std::vector<std::int64_t> widths;  // per input: axis extent * inner
    for (const auto& x : xs) {
        parents.push_back(x.node());
        widths.push_back(static_cast<std::int64_t>(x.dim(axis)) * inner);
    }
    const std::int64_t out_width = static_cast<std::int64_t>(total) * inner;

    auto bw_parents = parents;
    auto out = detail::make_result<T>(
        os, std::move(parents), [bw_parents, widths, outer, out_width](Node<T>& self) {
            const T* g = self.grad.data();
            std::int64_t off = 0;
            for (std::size_t k = 0; k < bw_parents.size(); ++k) {
                auto& p = bw_parents[k];
                if (p->requires_grad) {
                    T* gp = p->grad_data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* src = g + o * out_width + off;
                        T* dst = gp + o * widths[k];
                        for (std::int64_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
                    }
                }
                off += widths[k];
            }
        });
    {
        T* yv = out->value.data();
        std::int64_t off = 0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const T* src = xs[k].data();
            for (std::int64_t o = 0; o < outer; ++o)
                std::memcpy(yv + o * out_width + off, src + o * widths[k],
                            static_cast<std::size_t>(widths[k]) * sizeof(T));
            off += widths[k];
        }
    }
    return detail::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// matmul / dense
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        T* ci = c + static_cast<std::int64_t>(i) * N;
        const T* ai = a + static_cast<std::int64_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const T aik = ai[k];
            const T* bk = b + static_cast<std::int64_t>(k) * N;
            for (int j = 0; j < N; ++j) ci[j] += aik * bk[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const T* ai = a + static_cast<std::int64_t>(i) * K;
        T* ci = c + static_cast<std::int64_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* bj = b + static_cast<std::int64_t>(j) * K;
            T acc = T(0);
            for (int k = 0; k < K; ++k) acc += ai[k] * bj[k];
            ci[j] += acc;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const T* am = a + static_cast<std::int64_t>(m) * K;
        const T* bm = b + static_cast<std::int64_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            const T v = am[k];
            T* ck = c + static_cast<std::int64_t>(k) * N;
            for (int j = 0; j < N; ++j) ck[j] += v * bm[j];
        }
    }
}

}  // namespace detail

// 2-D [M,K]x[K,N] or batched 3-D [B,M,K]x[B,K,N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 3),
          "matmul: expected matching rank 2 or 3, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
    const bool batched = a.rank() == 3;
    const int B = batched ? a.dim(0) : 1;
    const int M = a.dim(batched ? 1 : 0);
    const int K = a.dim(batched ? 2 : 1);
    const int N = b.dim(batched ? 2 : 1);
    check((!batched || b.dim(0) == B) && b.dim(batched ? 1 : 0) == K,
          "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Shape os = batched ? Shape{B, M, N} : Shape{M, N};

    auto pa = a.node();
    auto pb = b.node();
    auto out = detail::make_result<T>(os, {pa, pb}, [pa, pb, B, M, K, N](Node<T>& self) {
        const std::int64_t as = static_cast<std::int64_t>(M) * K;
        const std::int64_t bs = static_cast<std::int64_t>(K) * N;
        const std::int64_t cs = static_cast<std::int64_t>(M) * N;
        for (int batch = 0; batch < B; ++batch) {
            const T* av = pa->value.data() + batch * as;
            const T* bv = pb->value.data() + batch * bs;
            const T* g = self.grad.data() + batch * cs;
            if (pa->requires_grad)
                detail::gemm_nt(g, bv, pa->grad_data() + batch * as, M, N, K);
            if (pb->requires_grad)
                detail::gemm_tn(av, g, pb->grad_data() + batch * bs, M, K, N);
        }
    });
    std::fill(out->value.begin(), out->value.end(), T(0));
    for (int batch = 0; batch < B; ++batch) {
        detail::gemm_nn(pa->value.data() + static_cast<std::int64_t>(batch) * M * K,
                        pb->value.data() + static_cast<std::int64_t>(batch) * K * N,
                        out->value.data() + static_cast<std::int64_t>(batch) * M * N, M, K, N);
    }
    MacCounter::add(static_cast<std::int64_t>(B) * M * K * N);
    return detail::wrap(std::move(out));
}

// x[..., Cin] * w[Cin, Cout] + b[Cout]
template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    check(x.rank() >= 1 && w.rank() == 2, "dense: bad ranks " + shape_str(x.shape()) + " and " +
                                              shape_str(w.shape()));
    const int cin = x.dim(x.rank() - 1);
    check(cin == w.dim(0), "dense: input features " + shape_str(x.shape()) +
                               " do not match weight " + shape_str(w.shape()));
    const int cout = w.dim(1);
    const bool has_bias = bias.numel() > 0;
    if (has_bias)
        check(bias.numel() == cout, "dense: bias " + shape_str(bias.shape()) +
                                        " does not match weight " + shape_str(w.shape()));
    Shape os = x.shape();
    os.back() = cout;
    const std::int64_t rows = x.numel() / cin;

    auto px = x.node();
    auto pw = w.node();
    auto pbias = bias.node();
    auto out = detail::make_result<T>(
        os, {px, pw, pbias}, [px, pw, pbias, rows, cin, cout, has_bias](Node<T>& self) {
            const T* g = self.grad.data();
            if (px->requires_grad)
                detail::gemm_nt(g, pw->value.data(), px->grad_data(),
                                static_cast<int>(rows), cout, cin);
            if (pw->requires_grad)
                detail::gemm_tn(px->value.data(), g, pw->grad_data(), static_cast<int>(rows),
                                cin, cout);
            if (has_bias && pbias->requires_grad) {
                T* gb = pbias->grad_data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* gr = g + r * cout;
                    for (int j = 0; j < cout; ++j) gb[j] += gr[j];
                }
            }
        });
    {
        T* yv = out->value.data();
        if (has_bias) {
            const T* bv = pbias->value.data();
            for (std::int64_t r = 0; r < rows; ++r)
                std::memcpy(yv + r * cout, bv, static_cast<std::size_t>(cout) * sizeof(T));
        } else {
            std::fill(out->value.begin(), out->value.end(), T(0));
        }
        detail::gemm_nn(px->value.data(), pw->value.data(), yv, static_cast<int>(rows), cin,
                        cout);
    }
    MacCounter::add(rows * cin * cout);
    return detail::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    check(axis >= 0 && axis < x.rank(),
          "softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
    const auto& xs = x.shape();
    std::int64_t outer = 1, inner = 1;
    const int L = xs[static_cast<std::size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= xs[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < xs.size(); ++i) inner *= xs[i];

    auto px = x.node();
    auto out = detail::make_result<T>(xs, {px}, [px, outer, inner, L](Node<T>& self) {
        if (!px->requires_grad) return;
        const T* y = self.value.data();
        const T* g = self.grad.data();
        T* gx = px->grad_data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * L * inner + in;
                T dot = T(0);
                for (int l = 0; l < L; ++l) dot += g[base + l * inner] * y[base + l * inner];
                for (int l = 0; l < L; ++l) {
                    const std::int64_t i = base + l * inner;
                    gx[i] += y[i] * (g[i] - dot);
                }
            }
    });
    {
        const T* xv = px->value.data();
        T* yv = out->value.data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * L * inner + in;
                T mx = xv[base];
                for (int l = 1; l < L; ++l) mx = std::max(mx, xv[base + l * inner]);
                T z = T(0);
                for (int l = 0; l < L; ++l) {
                    const T e = std::exp(xv[base + l * inner] - mx);
                    yv[base + l * inner] = e;
                    z += e;
                }
                const T invz = T(1) / z;
                for (int l = 0; l < L; ++l) yv[base + l * inner] *= invz;
            }
    }
    return detail::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// pooling / resize
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> maxpool2(const Tensor<T>& x) {
    check(x.rank() == 4, "maxpool2: expected NCHW, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % 2 == 0 && W % 2 == 0,
          "maxpool2: spatial extents must be even, got " + shape_str(x.shape()));
    const int Ho = H / 2, Wo = W / 2;

    auto px = x.node();
    // Winner offset within each window (0..3); ties go to the first in
    // row-major window order, which keeps backward deterministic.
    auto arg = std::make_shared<std::vector<std::uint8_t>>(
        static_cast<std::size_t>(N) * C * Ho * Wo);
    auto out = detail::make_result<T>(Shape{N, C, Ho, Wo}, {px}, [px, arg, H, W, Ho,
                                                                  Wo](Node<T>& self) {
        if (!px->requires_grad) return;
        const T* g = self.grad.data();
        T* gx = px->grad_data();
        const std::int64_t planes = self.numel() / (static_cast<std::int64_t>(Ho) * Wo);
        for (std::int64_t p = 0; p < planes; ++p) {
            const T* gp = g + p * Ho * Wo;
            T* gxp = gx + p * H * W;
            const std::uint8_t* ap = arg->data() + p * Ho * Wo;
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    const std::uint8_t a = ap[i * Wo + j];
                    const int di = a >> 1, dj = a & 1;
                    gxp[(2 * i + di) * W + (2 * j + dj)] += gp[i * Wo + j];
                }
        }
    });
    {
        const T* xv = px->value.data();
        T* yv = out->value.data();
        const std::int64_t planes = static_cast<std::int64_t>(N) * C;
        for (std::int64_t p = 0; p < planes; ++p) {
            const T* xp = xv + p * H * W;
            T* yp = yv + p * Ho * Wo;
            std::uint8_t* ap = arg->data() + p * Ho * Wo;
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    T best = xp[(2 * i) * W + 2 * j];
                    std::uint8_t ba = 0;
                    for (std::uint8_t a = 1; a < 4; ++a) {
                        const T v = xp[(2 * i + (a >> 1)) * W + 2 * j + (a & 1)];
                        if (v > best) {
                            best = v;
                            ba = a;
                        }
                    }
                    yp[i * Wo + j] = best;
                    ap[i * Wo + j] = ba;
                }
        }
    }
    return detail::wrap(std::move(out));
}

template <class T>
Tensor<T> upsample2_nearest(const Tensor<T>& x) {
    check(x.rank() == 4, "upsample2_nearest: expected NCHW, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = H * 2, Wo = W * 2;
    auto px = x.node();
    auto out = detail::make_result<T>(Shape{N, C, Ho, Wo}, {px}, [px, H, W, Ho, Wo](Node<T>& self) {
        if (!px->requires_grad) return;
        const T* g = self.grad.data();
        T* gx = px->grad_data();
        const std::int64_t planes = px->numel() / (static_cast<std::int64_t>(H) * W);
        for (std::int64_t p = 0; p < planes; ++p) {
            const T* gp = g + p * Ho * Wo;
            T* gxp = gx + p * H * W;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    gxp[i * W + j] += gp[(2 * i) * Wo + 2 * j] + gp[(2 * i) * Wo + 2 * j + 1] +
                                      gp[(2 * i + 1) * Wo + 2 * j] +
                                      gp[(2 * i + 1) * Wo + 2 * j + 1];
        }
    });
    {
        const T* xv = px->value.data();
        T* yv = out->value.data();
        const std::int64_t planes = static_cast<std::int64_t>(N) * C;
        for (std::int64_t p = 0; p < planes; ++p) {
            const T* xp = xv + p * H * W;
            T* yp = yv + p * Ho * Wo;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const T v = xp[i * W + j];
                    yp[(2 * i) * Wo + 2 * j] = v;
                    yp[(2 * i) * Wo + 2 * j + 1] = v;
                    yp[(2 * i + 1) * Wo + 2 * j] = v;
                    yp[(2 * i + 1) * Wo + 2 * j + 1] = v;
                }
        }
    }
    return detail::wrap(std::move(out));
}

namespace detail {
// align_corners=false source coordinate for a x2 upsample.
inline void bilinear_taps(int o, int in_extent, int& i0, int& i1, double& w1) {
    double src = (o + 0.5) * 0.5 - 0.5;
    if (src < 0) src = 0;
    i0 = static_cast<int>(src);
    if (i0 > in_extent - 1) i0 = in_extent - 1;
    i1 = std::min(i0 + 1, in_extent - 1);
    w1 = src - i0;
}
}  // namespace detail

template <class T>
Tensor<T> upsample2_bilinear(const Tensor<T>& x) {
    check(x.rank() == 4, "upsample2_bilinear: expected NCHW, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = H * 2, Wo = W * 2;
    auto px = x.node();
    auto out = detail::make_result<T>(Shape{N, C, Ho, Wo}, {px}, [px, H, W, Ho, Wo](Node<T>& self) {
        if (!px->requires_grad) return;
        const T* g = self.grad.data();
        T* gx = px->grad_data();
        const std::int64_t planes = px->numel() / (static_cast<std::int64_t>(H) * W);
        for (std::int64_t p = 0; p < planes; ++p) {
            const T* gp = g + p * Ho * Wo;
            T* gxp = gx + p * H * W;
            for (int i = 0; i < Ho; ++i) {
                int r0, r1;
                double wr;
                detail::bilinear_taps(i, H, r0, r1, wr);
                for (int j = 0; j < Wo; ++j) {
                    int c0, c1;
                    double wc;
                    detail::bilinear_taps(j, W, c0, c1, wc);
                    const T gv = gp[i * Wo + j];
                    gxp[r0 * W + c0] += gv * static_cast<T>((1 - wr) * (1 - wc));
                    gxp[r0 * W + c1] += gv * static_cast<T>((1 - wr) * wc);
                    gxp[r1 * W + c0] += gv * static_cast<T>(wr * (1 - wc));
                    gxp[r1 * W + c1] += gv * static_cast<T>(wr * wc);
                }
            }
        }
    });
    {
        const T* xv = px->value.data();
        T* yv = out->value.data();
        const std::int64_t planes = static_cast<std::int64_t>(N) * C;
        for (std::int64_t p = 0; p < planes; ++p) {
            const T* xp = xv + p * H * W;
            T* yp = yv + p * Ho * Wo;
            for (int i = 0; i < Ho; ++i) {
                int r0, r1;
                double wr;
                detail::bilinear_taps(i, H, r0, r1, wr);
                for (int j = 0; j < Wo; ++j) {
                    int c0, c1;
                    double wc;
                    detail::bilinear_taps(j, W, c0, c1, wc);
                    yp[i * Wo + j] = static_cast<T>(
                        (1 - wr) * ((1 - wc) * xp[r0 * W + c0] + wc * xp[r0 * W + c1]) +
                        wr * ((1 - wc) * xp[r1 * W + c0] + wc * xp[r1 * W + c1]));
                }
            }
        }
    }
    return detail::wrap(std::move(out));
}

template <class T>
Tensor<T> upsample2(const Tensor<T>& x, Upsample mode) {
    return mode == Upsample::Nearest ? upsample2_nearest(x) : upsample2_bilinear(x);
}

// (N,C,H,W) -> (N,C)
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    check(x.rank() == 4, "global_avg_pool: expected NCHW, got " + shape_str(x.shape()));
    return mean_axes(x, {2, 3});
}

// (N,C,H,W) -> (N,C); backward routes to the first max in row-major order.
template <class T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
    check(x.rank() == 4, "global_max_pool: expected NCHW, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    auto px = x.node();
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(N) * C);
    auto out = detail::make_result<T>(Shape{N, C}, {px}, [px, arg, hw](Node<T>& self) {
        if (!px->requires_grad) return;
        const T* g = self.grad.data();
        T* gx = px->grad_data();
        const std::int64_t planes = self.numel();
        for (std::int64_t p = 0; p < planes; ++p) gx[p * hw + (*arg)[static_cast<std::size_t>(p)] ] += g[p];
    });
    {
        const T* xv = px->value.data();
        T* yv = out->value.data();
        const std::int64_t planes = static_cast<std::int64_t>(N) * C;
        for (std::int64_t p = 0; p < planes; ++p) {
            const T* xp = xv + p * hw;
            T best = xp[0];
            std::int64_t bi = 0;
            for (std::int64_t i = 1; i < hw; ++i)
                if (xp[i] > best) {
                    best = xp[i];
                    bi = i;
                }
            yv[p] = best;
            (*arg)[static_cast<std::size_t>(p)] = bi;
        }
    }
    return detail::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

// Cross-correlation over NCHW. kernel [Cout, Cin/groups, k, k]; same padding
// zero-fills and requires H,W divisible by stride.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride = 1, int dilation = 1, Pad padding = Pad::Same, int groups = 1) {
    check(x.rank() == 4, "conv2d: expected NCHW input, got " + shape_str(x.shape()));
    check(kernel.rank() == 4, "conv2d: expected OIHW kernel, got " + shape_str(kernel.shape()));
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = kernel.dim(0), Ck = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    check(kh == kw && kh % 2 == 1, "conv2d: kernel must be square odd, got " + shape_str(kernel.shape()));
    check(stride >= 1 && dilation >= 1, "conv2d: stride and dilation must be >= 1");
    check(groups >= 1 && Cin % groups == 0 && Cout % groups == 0,
          "conv2d: groups " + std::to_string(groups) + " must divide channels of input " +
              shape_str(x.shape()) + " and kernel " + shape_str(kernel.shape()));
    check(Ck == Cin / groups, "conv2d: input channels of " + shape_str(x.shape()) +
                                  " do not match kernel " + shape_str(kernel.shape()) +
                                  " with groups " + std::to_string(groups));
    const bool has_bias = bias.numel() > 0;
    if (has_bias)
        check(bias.numel() == Cout, "conv2d: bias " + shape_str(bias.shape()) +
                                        " does not match kernel " + shape_str(kernel.shape()));

    const int k = kh;
    const int span = (k - 1) * dilation;  // receptive field extent - 1
    int Ho = 0, Wo = 0, pad_top = 0, pad_left = 0;
    if (padding == Pad::Same) {
        check(H % stride == 0 && W % stride == 0,
              "conv2d: same padding requires extents divisible by stride, got " +
                  shape_str(x.shape()) + " stride " + std::to_string(stride));
        Ho = H / stride;
        Wo = W / stride;
        pad_top = ((Ho - 1) * stride + span + 1 - H) / 2;
        pad_left = ((Wo - 1) * stride + span + 1 - W) / 2;
        if (pad_top < 0) pad_top = 0;
        if (pad_left < 0) pad_left = 0;
    } else {
        check(H > span && W > span, "conv2d: input " + shape_str(x.shape()) +
                                        " smaller than receptive field " + std::to_string(span + 1));
        Ho = (H - span - 1) / stride + 1;
        Wo = (W - span - 1) / stride + 1;
    }
    const int cin_g = Cin / groups, cout_g = Cout / groups;

    auto px = x.node();
    auto pk = kernel.node();
    auto pb = bias.node();
    auto out = detail::make_result<T>(
        Shape{N, Cout, Ho, Wo}, {px, pk, pb},
        [px, pk, pb, N, Cin, H, W, Cout, Ho, Wo, k, stride, dilation, pad_top, pad_left, cin_g,
         cout_g, has_bias](Node<T>& self) {
            const T* g = self.grad.data();
            const T* xv = px->value.data();
            const T* kv = pk->value.data();
            const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
            const std::int64_t oplane = static_cast<std::int64_t>(Ho) * Wo;

            if (has_bias && pb->requires_grad) {
                T* gb = pb->grad_data();
                for (int n = 0; n < N; ++n)
                    for (int oc = 0; oc < Cout; ++oc) {
                        const T* gp = g + (static_cast<std::int64_t>(n) * Cout + oc) * oplane;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < oplane; ++i) acc += gp[i];
                        gb[oc] += acc;
                    }
            }
            if (pk->requires_grad) {
                T* gk = pk->grad_data();
                for (int oc = 0; oc < Cout; ++oc) {
                    const int grp = oc / cout_g;
                    for (int icg = 0; icg < cin_g; ++icg) {
                        const int ic = grp * cin_g + icg;
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx) {
                                T acc = T(0);
                                for (int n = 0; n < N; ++n) {
                                    const T* gp =
                                        g + (static_cast<std::int64_t>(n) * Cout + oc) * oplane;
                                    const T* xp =
                                        xv + (static_cast<std::int64_t>(n) * Cin + ic) * xplane;
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        const int ih = oh * stride - pad_top + dy * dilation;
                                        if (ih < 0 || ih >= H) continue;
                                        const T* xrow = xp + static_cast<std::int64_t>(ih) * W;
                                        const T* grow = gp + static_cast<std::int64_t>(oh) * Wo;
                                        if (stride == 1) {
                                            const int shift = dx * dilation - pad_left;
                                            const int lo = std::max(0, -shift);
                                            const int hi = std::min(Wo, W - shift);
                                            for (int ow = lo; ow < hi; ++ow)
                                                acc += grow[ow] * xrow[ow + shift];
                                        } else {
                                            for (int ow = 0; ow < Wo; ++ow) {
                                                const int iw = ow * stride - pad_left + dx * dilation;
                                                if (iw < 0 || iw >= W) continue;
                                                acc += grow[ow] * xrow[iw];
                                            }
                                        }
                                    }
                                }
                                gk[((static_cast<std::int64_t>(oc) * cin_g + icg) * k + dy) * k +
                                   dx] += acc;
                            }
                    }
                }
            }
            if (px->requires_grad) {
                T* gx = px->grad_data();
                for (int n = 0; n < N; ++n)
                    for (int oc = 0; oc < Cout; ++oc) {
                        const int grp = oc / cout_g;
                        const T* gp = g + (static_cast<std::int64_t>(n) * Cout + oc) * oplane;
                        for (int icg = 0; icg < cin_g; ++icg) {
                            const int ic = grp * cin_g + icg;
                            T* gxp = gx + (static_cast<std::int64_t>(n) * Cin + ic) * xplane;
                            const T* kp =
                                pk->value.data() +
                                (static_cast<std::int64_t>(oc) * cin_g + icg) * k * k;
                            for (int dy = 0; dy < k; ++dy)
                                for (int dx = 0; dx < k; ++dx) {
                                    const T wv = kp[dy * k + dx];
                                    if (wv == T(0)) continue;
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        const int ih = oh * stride - pad_top + dy * dilation;
                                        if (ih < 0 || ih >= H) continue;
                                        T* gxrow = gxp + static_cast<std::int64_t>(ih) * W;
                                        const T* grow = gp + static_cast<std::int64_t>(oh) * Wo;
                                        if (stride == 1) {
                                            const int shift = dx * dilation - pad_left;
                                            const int lo = std::max(0, -shift);
                                            const int hi = std::min(Wo, W - shift);
                                            for (int ow = lo; ow < hi; ++ow)
                                                gxrow[ow + shift] += wv * grow[ow];
                                        } else {
                                            for (int ow = 0; ow < Wo; ++ow) {
                                                const int iw =
                                                    ow * stride - pad_left + dx * dilation;
                                                if (iw < 0 || iw >= W) continue;
                                                gxrow[iw] += wv * grow[ow];
                                            }
                                        }
                                    }
                                }
                        }
                    }
                (void)kv;
            }
        });

    {
        const T* xv = px->value.data();
        const T* kv = pk->value.data();
        T* yv = out->value.data();
        const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
        const std::int64_t oplane = static_cast<std::int64_t>(Ho) * Wo;
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < Cout; ++oc) {
                const int grp = oc / cout_g;
                T* yp = yv + (static_cast<std::int64_t>(n) * Cout + oc) * oplane;
                const T b = has_bias ? pb->value[static_cast<std::size_t>(oc)] : T(0);
                std::fill(yp, yp + oplane, b);
                for (int icg = 0; icg < cin_g; ++icg) {
                    const int ic = grp * cin_g + icg;
                    const T* xp = xv + (static_cast<std::int64_t>(n) * Cin + ic) * xplane;
                    const T* kp =
                        kv + (static_cast<std::int64_t>(oc) * cin_g + icg) * k * k;
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) {
                            const T wv = kp[dy * k + dx];
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int ih = oh * stride - pad_top + dy * dilation;
                                if (ih < 0 || ih >= H) continue;
                                const T* xrow = xp + static_cast<std::int64_t>(ih) * W;
                                T* yrow = yp + static_cast<std::int64_t>(oh) * Wo;
                                if (stride == 1) {
                                    const int shift = dx * dilation - pad_left;
                                    const int lo = std::max(0, -shift);
                                    const int hi = std::min(Wo, W - shift);
                                    for (int ow = lo; ow < hi; ++ow)
                                        yrow[ow] += wv * xrow[ow + shift];
                                } else {
                                    for (int ow = 0; ow < Wo; ++ow) {
                                        const int iw = ow * stride - pad_left + dx * dilation;
                                        if (iw < 0 || iw >= W) continue;
                                        yrow[ow] += wv * xrow[iw];
                                    }
                                }
                            }
                        }
                }
            }
    }
    MacCounter::add(static_cast<std::int64_t>(N) * Cout * Ho * Wo * cin_g * k * k);
    return detail::wrap(std::move(out));
}

// Depthwise k x k followed by pointwise 1 x 1.
template <class T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const Tensor<T>& dw_kernel,
                                   const Tensor<T>& dw_bias, const Tensor<T>& pw_kernel,
                                   const Tensor<T>& pw_bias, int stride = 1, int dilation = 1,
                                   Pad padding = Pad::Same) {
    const int C = x.dim(1);
    check(dw_kernel.rank() == 4 && dw_kernel.dim(0) == C && dw_kernel.dim(1) == 1,
          "depthwise_separable_conv: depthwise kernel " + shape_str(dw_kernel.shape()) +
              " does not match input " + shape_str(x.shape()));
    auto mid = conv2d(x, dw_kernel, dw_bias, stride, dilation, padding, C);
    return conv2d(mid, pw_kernel, pw_bias, 1, 1, Pad::Same, 1);
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

// Per-channel normalization over (N,H,W). Train mode uses batch statistics
// and folds them into the running buffers in place; infer mode reads the
// buffers. Variance is biased in both uses.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                      T momentum = T(0.9), T eps = T(1e-5)) {
    check(x.rank() == 4, "batchnorm2d: expected NCHW, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C &&
              running_var.numel() == C,
          "batchnorm2d: parameter extents do not match channels of " + shape_str(x.shape()));
    const std::int64_t m = static_cast<std::int64_t>(N) * H * W;
    if (train)
        check(m >= 2, "batchnorm2d: train mode needs at least 2 values per channel, got " +
                          shape_str(x.shape()));

    auto px = x.node();
    auto pg = gamma.node();
    auto pbeta = beta.node();
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;

    std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
    if (train) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* xp = px->value.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) s += static_cast<double>(xp[i]);
            }
            const double mu = s / static_cast<double>(m);
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const T* xp = px->value.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double d = static_cast<double>(xp[i]) - mu;
                    v += d * d;
                }
            }
            v /= static_cast<double>(m);
            mean[static_cast<std::size_t>(c)] = static_cast<T>(mu);
            invstd[static_cast<std::size_t>(c)] =
                static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
            running_mean.data()[c] = momentum * running_mean.data()[c] + (T(1) - momentum) * static_cast<T>(mu);
            running_var.data()[c] = momentum * running_var.data()[c] + (T(1) - momentum) * static_cast<T>(v);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = running_mean.data()[c];
            invstd[static_cast<std::size_t>(c)] =
                T(1) / std::sqrt(running_var.data()[c] + eps);
        }
    }

    auto out = detail::make_result<T>(
        x.shape(), {px, pg, pbeta},
        [px, pg, pbeta, mean, invstd, N, C, plane, m, train](Node<T>& self) {
            const T* g = self.grad.data();
            const T* xv = px->value.data();
            for (int c = 0; c < C; ++c) {
                const T mu = mean[static_cast<std::size_t>(c)];
                const T is = invstd[static_cast<std::size_t>(c)];
                const T gam = pg->value[static_cast<std::size_t>(c)];
                // Channel sums of dy and dy * xhat.
                double sg = 0.0, sgx = 0.0;
                for (int n = 0; n < N; ++n) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                    const T* gp = g + base;
                    const T* xp = xv + base;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sg += static_cast<double>(gp[i]);
                        sgx += static_cast<double>(gp[i]) * ((xp[i] - mu) * is);
                    }
                }
                if (pg->requires_grad) pg->grad_data()[c] += static_cast<T>(sgx);
                if (pbeta->requires_grad) pbeta->grad_data()[c] += static_cast<T>(sg);
                if (px->requires_grad) {
                    T* gx = px->grad_data();
                    if (train) {
                        const T k1 = gam * is / static_cast<T>(m);
                        for (int n = 0; n < N; ++n) {
                            const std::int64_t base =
                                (static_cast<std::int64_t>(n) * C + c) * plane;
                            const T* gp = g + base;
                            const T* xp = xv + base;
                            T* gxp = gx + base;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                const T xhat = (xp[i] - mu) * is;
                                gxp[i] += k1 * (static_cast<T>(m) * gp[i] - static_cast<T>(sg) -
                                                xhat * static_cast<T>(sgx));
                            }
                        }
                    } else {
                        const T k = gam * is;
                        for (int n = 0; n < N; ++n) {
                            const std::int64_t base =
                                (static_cast<std::int64_t>(n) * C + c) * plane;
                            const T* gp = g + base;
                            T* gxp = gx + base;
                            for (std::int64_t i = 0; i < plane; ++i) gxp[i] += k * gp[i];
                        }
                    }
                }
            }
        });
    {
        const T* xv = px->value.data();
        T* yv = out->value.data();
        for (int c = 0; c < C; ++c) {
            const T mu = mean[static_cast<std::size_t>(c)];
            const T is = invstd[static_cast<std::size_t>(c)];
            const T gam = pg->value[static_cast<std::size_t>(c)];
            const T bet = pbeta->value[static_cast<std::size_t>(c)];
            for (int n = 0; n < N; ++n) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                const T* xp = xv + base;
                T* yp = yv + base;
                for (std::int64_t i = 0; i < plane; ++i) yp[i] = gam * (xp[i] - mu) * is + bet;
            }
        }
    }
    return detail::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// fused scaled-dot attention
// ---------------------------------------------------------------------------

// q,k,v: [B, L, d] -> softmax(q k^T / sqrt(d)) v, streamed one query row at a
// time so the L x L weight matrix is never materialized; the backward pass
// recomputes each row's softmax.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    check(q.rank() == 3 && k.rank() == 3 && v.rank() == 3 && q.shape() == k.shape() &&
              q.shape() == v.shape(),
          "attention: q,k,v must share shape [B,L,d], got " + shape_str(q.shape()) + ", " +
              shape_str(k.shape()) + ", " + shape_str(v.shape()));
    const int B = q.dim(0), L = q.dim(1), d = q.dim(2);
    const T scale = T(1) / std::sqrt(static_cast<T>(d));

    auto pq = q.node();
    auto pk = k.node();
    auto pv = v.node();
    auto out = detail::make_result<T>(q.shape(), {pq, pk, pv}, [pq, pk, pv, B, L, d,
                                                                scale](Node<T>& self) {
        const std::int64_t mat = static_cast<std::int64_t>(L) * d;
        std::vector<T> a(static_cast<std::size_t>(L)), da(static_cast<std::size_t>(L));
        for (int b = 0; b < B; ++b) {
            const T* qv = pq->value.data() + b * mat;
            const T* kv = pk->value.data() + b * mat;
            const T* vv = pv->value.data() + b * mat;
            const T* go = self.grad.data() + b * mat;
            T* gq = pq->requires_grad ? pq->grad_data() + b * mat : nullptr;
            T* gk = pk->requires_grad ? pk->grad_data() + b * mat : nullptr;
            T* gv = pv->requires_grad ? pv->grad_data() + b * mat : nullptr;
            for (int i = 0; i < L; ++i) {
                const T* qi = qv + static_cast<std::int64_t>(i) * d;
                const T* goi = go + static_cast<std::int64_t>(i) * d;
                // Recompute row i of the attention weights.
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < L; ++j) {
                    const T* kj = kv + static_cast<std::int64_t>(j) * d;
                    T s = T(0);
                    for (int t = 0; t < d; ++t) s += qi[t] * kj[t];
                    s *= scale;
                    a[static_cast<std::size_t>(j)] = s;
                    mx = std::max(mx, s);
                }
                T z = T(0);
                for (int j = 0; j < L; ++j) {
                    const T e = std::exp(a[static_cast<std::size_t>(j)] - mx);
                    a[static_cast<std::size_t>(j)] = e;
                    z += e;
                }
                const T invz = T(1) / z;
                for (int j = 0; j < L; ++j) a[static_cast<std::size_t>(j)] *= invz;

                T dot = T(0);
                for (int j = 0; j < L; ++j) {
                    const T* vj = vv + static_cast<std::int64_t>(j) * d;
                    T acc = T(0);
                    for (int t = 0; t < d; ++t) acc += goi[t] * vj[t];
                    da[static_cast<std::size_t>(j)] = acc;
                    dot += acc * a[static_cast<std::size_t>(j)];
                }
                for (int j = 0; j < L; ++j) {
                    const T aj = a[static_cast<std::size_t>(j)];
                    const T ds = aj * (da[static_cast<std::size_t>(j)] - dot) * scale;
                    const T* kj = kv + static_cast<std::int64_t>(j) * d;
                    if (gv) {
                        T* gvj = gv + static_cast<std::int64_t>(j) * d;
                        for (int t = 0; t < d; ++t) gvj[t] += aj * goi[t];
                    }
                    if (gq) {
                        T* gqi = gq + static_cast<std::int64_t>(i) * d;
                        for (int t = 0; t < d; ++t) gqi[t] += ds * kj[t];
                    }
                    if (gk) {
                        T* gkj = gk + static_cast<std::int64_t>(j) * d;
                        for (int t = 0; t < d; ++t) gkj[t] += ds * qi[t];
                    }
                }
            }
        }
    });
    {
        const std::int64_t mat = static_cast<std::int64_t>(L) * d;
        std::vector<T> a(static_cast<std::size_t>(L));
        for (int b = 0; b < B; ++b) {
            const T* qv = pq->value.data() + b * mat;
            const T* kv = pk->value.data() + b * mat;
            const T* vv = pv->value.data() + b * mat;
            T* ov = out->value.data() + b * mat;
            for (int i = 0; i < L; ++i) {
                const T* qi = qv + static_cast<std::int64_t>(i) * d;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < L; ++j) {
                    const T* kj = kv + static_cast<std::int64_t>(j) * d;
                    T s = T(0);
                    for (int t = 0; t < d; ++t) s += qi[t] * kj[t];
                    s *= scale;
                    a[static_cast<std::size_t>(j)] = s;
                    mx = std::max(mx, s);
                }
                T z = T(0);
                for (int j = 0; j < L; ++j) {
                    const T e = std::exp(a[static_cast<std::size_t>(j)] - mx);
                    a[static_cast<std::size_t>(j)] = e;
                    z += e;
                }
                const T invz = T(1) / z;
                T* oi = ov + static_cast<std::int64_t>(i) * d;
                std::fill(oi, oi + d, T(0));
                for (int j = 0; j < L; ++j) {
                    const T aj = a[static_cast<std::size_t>(j)] * invz;
                    const T* vj = vv + static_cast<std::int64_t>(j) * d;
                    for (int t = 0; t < d; ++t) oi[t] += aj * vj[t];
                }
            }
        }
    }
    MacCounter::add(2 * static_cast<std::int64_t>(B) * L * L * d);
    return detail::wrap(std::move(out));
}

}  // namespace nubseg
