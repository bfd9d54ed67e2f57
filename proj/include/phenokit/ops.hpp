#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "phenokit/common.hpp"
#include "phenokit/rng.hpp"
#include "phenokit/tape.hpp"

namespace phenokit {

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw InvariantError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    const int ia = a.id, ib = b.id;
    int id = a.tape->make("add", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
        t.accum(ia, t.grad(self));
        t.accum(ib, t.grad(self));
    });
    return {a.tape, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
    const int ia = a.id, ib = b.id;
    int id = a.tape->make("sub", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        t.accum(ia, g);
        Tensor<T> ng(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) ng[i] = -g[i];
        t.accum(ib, ng);
    });
    return {a.tape, id};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    const auto& av = a.val();
    const auto& bv = b.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    const int ia = a.id, ib = b.id;
    int id = a.tape->make("mul", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& av2 = t.val(ia);
        const Tensor<T>& bv2 = t.val(ib);
        Tensor<T> ga(g.shape), gb(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            ga[i] = g[i] * bv2[i];
            gb[i] = g[i] * av2[i];
        }
        t.accum(ia, ga);
        t.accum(ib, gb);
    });
    return {a.tape, id};
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> out(a.shape());
    const auto& av = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = c * av[i];
    const int ia = a.id;
    int id = a.tape->make("scale", std::move(out), {ia}, [ia, c](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = c * g[i];
        t.accum(ia, ga);
    });
    return {a.tape, id};
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> out(a.shape());
    const auto& av = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    const int ia = a.id;
    int id = a.tape->make("relu", std::move(out), {ia}, [ia](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& x = t.val(ia);
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = x[i] > T(0) ? g[i] : T(0);
        t.accum(ia, ga);
    });
    return {a.tape, id};
}

// Exact erf form: gelu(x) = x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> a) {
    Tensor<T> out(a.shape());
    const auto& av = a.val();
    constexpr T inv_sqrt2 = T(0.7071067811865475244);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * inv_sqrt2));
    const int ia = a.id;
    int id = a.tape->make("gelu", std::move(out), {ia}, [ia](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& x = t.val(ia);
        constexpr T is2 = T(0.7071067811865475244);
        constexpr T inv_sqrt2pi = T(0.3989422804014326779);
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const T phi_cdf = T(0.5) * (T(1) + std::erf(x[i] * is2));
            const T phi_pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
            ga[i] = g[i] * (phi_cdf + x[i] * phi_pdf);
        }
        t.accum(ia, ga);
    });
    return {a.tape, id};
}

// ---- matrix products ----

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw InvariantError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<T> out({M, N});
    {
        const auto& av = a.val();
        const auto& bv = b.val();
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t k = 0; k < K; ++k) {
                const T aik = av[i * K + k];
                for (std::int64_t j = 0; j < N; ++j) out[i * N + j] += aik * bv[k * N + j];
            }
    }
    const int ia = a.id, ib = b.id;
    int id = a.tape->make("matmul", std::move(out), {ia, ib}, [ia, ib, M, K, N](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& av = t.val(ia);
        const Tensor<T>& bv = t.val(ib);
        Tensor<T> ga({M, K}), gb({K, N});
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t j = 0; j < N; ++j) {
                const T gij = g[i * N + j];
                for (std::int64_t k = 0; k < K; ++k) {
                    ga[i * K + k] += gij * bv[k * N + j];
                    gb[k * N + j] += gij * av[i * K + k];
                }
            }
        t.accum(ia, ga);
        t.accum(ib, gb);
    });
    return {a.tape, id};
}

// y = x * w^T + b, with w stored [out, in]. Pass invalid bias Var{nullptr,-1} to skip.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(1))
        throw InvariantError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                             shape_str(w.shape()));
    const std::int64_t M = x.dim(0), K = x.dim(1), N = w.dim(0);
    const bool has_bias = b.tape != nullptr;
    if (has_bias && (b.shape().size() != 1 || b.dim(0) != N))
        throw InvariantError("linear: bias shape mismatch");
    Tensor<T> out({M, N});
    {
        const auto& xv = x.val();
        const auto& wv = w.val();
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t n = 0; n < N; ++n) {
                T acc = has_bias ? b.val()[n] : T(0);
                const T* xr = xv.data.data() + i * K;
                const T* wr = wv.data.data() + n * K;
                for (std::int64_t k = 0; k < K; ++k) acc += xr[k] * wr[k];
                out[i * N + n] = acc;
            }
    }
    const int ix = x.id, iw = w.id, ibias = has_bias ? b.id : -1;
    std::vector<int> parents{ix, iw};
    if (has_bias) parents.push_back(ibias);
    int id = x.tape->make("linear", std::move(out), std::move(parents),
                          [ix, iw, ibias, M, K, N](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv = t.val(ix);
        const Tensor<T>& wv = t.val(iw);
        Tensor<T> gx({M, K}), gw({N, K});
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t n = 0; n < N; ++n) {
                const T gin = g[i * N + n];
                const T* wr = wv.data.data() + n * K;
                const T* xr = xv.data.data() + i * K;
                T* gxr = gx.data.data() + i * K;
                T* gwr = gw.data.data() + n * K;
                for (std::int64_t k = 0; k < K; ++k) {
                    gxr[k] += gin * wr[k];
                    gwr[k] += gin * xr[k];
                }
            }
        t.accum(ix, gx);
        t.accum(iw, gw);
        if (ibias >= 0) {
            Tensor<T> gb({N});
            for (std::int64_t i = 0; i < M; ++i)
                for (std::int64_t n = 0; n < N; ++n) gb[n] += g[i * N + n];
            t.accum(ibias, gb);
        }
    });
    return {x.tape, id};
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
    return linear(x, w, Var<T>{nullptr, -1});
}

// Batched matmul: [G,M,K] x [G,K,N] -> [G,M,N].
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(0) != b.dim(0) ||
        a.dim(2) != b.dim(1))
        throw InvariantError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::int64_t G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    Tensor<T> out({G, M, N});
    {
        const auto& av = a.val();
        const auto& bv = b.val();
        for (std::int64_t s = 0; s < G; ++s) {
            const T* A = av.data.data() + s * M * K;
            const T* B = bv.data.data() + s * K * N;
            T* O = out.data.data() + s * M * N;
            for (std::int64_t i = 0; i < M; ++i)
                for (std::int64_t k = 0; k < K; ++k) {
                    const T aik = A[i * K + k];
                    for (std::int64_t j = 0; j < N; ++j) O[i * N + j] += aik * B[k * N + j];
                }
        }
    }
    const int ia = a.id, ib = b.id;
    int id = a.tape->make("bmm", std::move(out), {ia, ib},
                          [ia, ib, G, M, K, N](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& av = t.val(ia);
        const Tensor<T>& bv = t.val(ib);
        Tensor<T> ga({G, M, K}), gb({G, K, N});
        for (std::int64_t s = 0; s < G; ++s) {
            const T* A = av.data.data() + s * M * K;
            const T* B = bv.data.data() + s * K * N;
            const T* Gm = g.data.data() + s * M * N;
            T* GA = ga.data.data() + s * M * K;
            T* GB = gb.data.data() + s * K * N;
            for (std::int64_t i = 0; i < M; ++i)
                for (std::int64_t j = 0; j < N; ++j) {
                    const T gij = Gm[i * N + j];
                    for (std::int64_t k = 0; k < K; ++k) {
                        GA[i * K + k] += gij * B[k * N + j];
                        GB[k * N + j] += gij * A[i * K + k];
                    }
                }
        }
        t.accum(ia, ga);
        t.accum(ib, gb);
    });
    return {a.tape, id};
}

// ---- shape ops ----

template <typename T>
Var<T> reshape(Var<T> a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw InvariantError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " +
                             shape_str(new_shape));
    Tensor<T> out(new_shape, a.val().data);
    const int ia = a.id;
    Shape old_shape = a.shape();
    int id = a.tape->make("reshape", std::move(out), {ia},
                          [ia, old_shape](Tape<T>& t, int self) {
        t.accum(ia, Tensor<T>(old_shape, t.grad(self).data));
    });
    return {a.tape, id};
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<int> axes) {
    const int r = static_cast<int>(a.shape().size());
    if (static_cast<int>(axes.size()) != r) throw InvariantError("permute: bad axes");
    const Shape& in_shape = a.shape();
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];

    auto apply = [r](const Tensor<T>& src, const Shape& dst_shape,
                     const std::vector<int>& ax) {
        Tensor<T> dst(dst_shape);
        // strides of src in dst axis order
        std::vector<std::int64_t> src_strides(static_cast<std::size_t>(r), 1);
        for (int i = r - 2; i >= 0; --i)
            src_strides[i] = src_strides[i + 1] * src.shape[i + 1];
        std::vector<std::int64_t> step(static_cast<std::size_t>(r));
        for (int i = 0; i < r; ++i) step[i] = src_strides[ax[i]];
        std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
        std::int64_t src_off = 0;
        for (std::int64_t o = 0; o < dst.numel(); ++o) {
            dst[o] = src[src_off];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[i] < dst_shape[i]) {
                    src_off += step[i];
                    break;
                }
                idx[i] = 0;
                src_off -= step[i] * (dst_shape[i] - 1);
            }
        }
        return dst;
    };

    Tensor<T> out = apply(a.val(), out_shape, axes);
    std::vector<int> inv(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) inv[axes[i]] = i;
    const int ia = a.id;
    Shape in_copy = in_shape;
    int id = a.tape->make("permute", std::move(out), {ia},
                          [ia, inv, in_copy, apply](Tape<T>& t, int self) {
        t.accum(ia, apply(t.grad(self), in_copy, inv));
    });
    return {a.tape, id};
}

template <typename T>
Var<T> transpose2d(Var<T> a) {
    return permute(a, {1, 0});
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    if (a.shape().size() != 4 || b.shape().size() != 4 || a.dim(0) != b.dim(0) ||
        a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw InvariantError("concat_channels: incompatible shapes");
    const std::int64_t B = a.dim(0), C1 = a.dim(1), C2 = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor<T> out({B, C1 + C2, H, W});
    const std::int64_t plane = H * W;
    for (std::int64_t n = 0; n < B; ++n) {
        std::copy_n(a.val().data.data() + n * C1 * plane, C1 * plane,
                    out.data.data() + n * (C1 + C2) * plane);
        std::copy_n(b.val().data.data() + n * C2 * plane, C2 * plane,
                    out.data.data() + (n * (C1 + C2) + C1) * plane);
    }
    const int ia = a.id, ib = b.id;
    int id = a.tape->make("concat_channels", std::move(out), {ia, ib},
                          [ia, ib, B, C1, C2, plane](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T> ga(t.val(ia).shape);
        Tensor<T> gb(t.val(ib).shape);
        for (std::int64_t n = 0; n < B; ++n) {
            std::copy_n(g.data.data() + n * (C1 + C2) * plane, C1 * plane,
                        ga.data.data() + n * C1 * plane);
            std::copy_n(g.data.data() + (n * (C1 + C2) + C1) * plane, C2 * plane,
                        gb.data.data() + n * C2 * plane);
        }
        t.accum(ia, ga);
        t.accum(ib, gb);
    });
    return {a.tape, id};
}

template <typename T>
Var<T> global_avg_pool(Var<T> a) {
    if (a.shape().size() != 4) throw InvariantError("global_avg_pool: expected [B,C,H,W]");
    const std::int64_t B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    const std::int64_t plane = H * W;
    Tensor<T> out({B, C});
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            T acc = 0;
            const T* p = a.val().data.data() + (n * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
            out[n * C + c] = acc / static_cast<T>(plane);
        }
    const int ia = a.id;
    int id = a.tape->make("global_avg_pool", std::move(out), {ia},
                          [ia, B, C, H, W, plane](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T> ga({B, C, H, W});
        for (std::int64_t n = 0; n < B; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const T gv = g[n * C + c] / static_cast<T>(plane);
                T* p = ga.data.data() + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) p[i] = gv;
            }
        t.accum(ia, ga);
    });
    return {a.tape, id};
}

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
    if (x.shape().size() != 4 || bias.shape().size() != 1 || bias.dim(0) != x.dim(1))
        throw InvariantError("add_channel_bias: shape mismatch");
    const std::int64_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out = x.val();
    for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            T* p = out.data.data() + (n * C + c) * plane;
            const T bv = bias.val()[c];
            for (std::int64_t i = 0; i < plane; ++i) p[i] += bv;
        }
    const int ix = x.id, ib = bias.id;
    int id = x.tape->make("add_channel_bias", std::move(out), {ix, ib},
                          [ix, ib, B, C, plane](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        t.accum(ix, g);
        Tensor<T> gb({C});
        for (std::int64_t n = 0; n < B; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const T* p = g.data.data() + (n * C + c) * plane;
                T acc = 0;
                for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
                gb[c] += acc;
            }
        t.accum(ib, gb);
    });
    return {x.tape, id};
}

// ---- reductions ----

template <typename T>
Var<T> sum_all(Var<T> a) {
    T acc = 0;
    for (const T v : a.val().data) acc += v;
    const int ia = a.id;
    Shape in_shape = a.shape();
    int id = a.tape->make("sum_all", Tensor<T>::scalar(acc), {ia},
                          [ia, in_shape](Tape<T>& t, int self) {
        t.accum(ia, Tensor<T>(in_shape, t.grad(self)[0]));
    });
    return {a.tape, id};
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    T acc = 0;
    for (const T v : a.val().data) acc += v;
    const T inv = T(1) / static_cast<T>(a.numel());
    const int ia = a.id;
    Shape in_shape = a.shape();
    int id = a.tape->make("mean_all", Tensor<T>::scalar(acc * inv), {ia},
                          [ia, in_shape, inv](Tape<T>& t, int self) {
        t.accum(ia, Tensor<T>(in_shape, t.grad(self)[0] * inv));
    });
    return {a.tape, id};
}

// ---- normalization / activation distributions ----

// Softmax over the last axis with max subtraction; any rank >= 1.
template <typename T>
Var<T> softmax_rows(Var<T> a) {
    if (a.shape().empty() || a.shape().back() < 1)
        throw InvariantError("softmax_rows: empty last axis");
    const std::int64_t N = a.shape().back();
    const std::int64_t rows = a.numel() / N;
    Tensor<T> out(a.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* x = a.val().data.data() + r * N;
        T* y = out.data.data() + r * N;
        T mx = x[0];
        for (std::int64_t i = 1; i < N; ++i) mx = std::max(mx, x[i]);
        T z = 0;
        for (std::int64_t i = 0; i < N; ++i) {
            y[i] = std::exp(x[i] - mx);
            z += y[i];
        }
        for (std::int64_t i = 0; i < N; ++i) y[i] /= z;
    }
    const int ia = a.id;
    int id = a.tape->make("softmax_rows", std::move(out), {ia},
                          [ia, rows, N](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& y = t.val(self);
        Tensor<T> ga(g.shape);
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* gr = g.data.data() + r * N;
            const T* yr = y.data.data() + r * N;
            T dot = 0;
            for (std::int64_t i = 0; i < N; ++i) dot += gr[i] * yr[i];
            T* gar = ga.data.data() + r * N;
            for (std::int64_t i = 0; i < N; ++i) gar[i] = yr[i] * (gr[i] - dot);
        }
        t.accum(ia, ga);
    });
    return {a.tape, id};
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
    if (x.shape().size() != 2) throw InvariantError("layer_norm: expected [B,D]");
    const std::int64_t B = x.dim(0), D = x.dim(1);
    if (gain.shape() != Shape{D} || bias.shape() != Shape{D})
        throw InvariantError("layer_norm: gain/bias must be [D]");
    if (!(eps > T(0))) throw InputError("layer_norm: eps must be > 0");
    Tensor<T> out({B, D});
    auto xhat = std::make_shared<Tensor<T>>(Shape{B, D});
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B));
    for (std::int64_t r = 0; r < B; ++r) {
        const T* xr = x.val().data.data() + r * D;
        T mean = 0;
        for (std::int64_t i = 0; i < D; ++i) mean += xr[i];
        mean /= static_cast<T>(D);
        T var = 0;
        for (std::int64_t i = 0; i < D; ++i) {
            const T d = xr[i] - mean;
            var += d * d;
        }
        var /= static_cast<T>(D);
        const T inv = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (std::int64_t i = 0; i < D; ++i) {
            const T xh = (xr[i] - mean) * inv;
            (*xhat)[r * D + i] = xh;
            out[r * D + i] = gain.val()[i] * xh + bias.val()[i];
        }
    }
    const int ix = x.id, ig = gain.id, ib = bias.id;
    int id = x.tape->make("layer_norm", std::move(out), {ix, ig, ib},
                          [ix, ig, ib, B, D, xhat, inv_std](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& gainv = t.val(ig);
        Tensor<T> gx({B, D}), ggain({D}), gbias({D});
        for (std::int64_t r = 0; r < B; ++r) {
            const T* gr = g.data.data() + r * D;
            const T* xh = xhat->data.data() + r * D;
            T sum_dxh = 0, sum_dxh_xh = 0;
            for (std::int64_t i = 0; i < D; ++i) {
                ggain[i] += gr[i] * xh[i];
                gbias[i] += gr[i];
                const T dxh = gr[i] * gainv[i];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[i];
            }
            const T inv = (*inv_std)[r];
            const T invD = T(1) / static_cast<T>(D);
            for (std::int64_t i = 0; i < D; ++i) {
                const T dxh = gr[i] * gainv[i];
                gx[r * D + i] = inv * (dxh - sum_dxh * invD - xh[i] * sum_dxh_xh * invD);
            }
        }
        t.accum(ix, gx);
        t.accum(ig, ggain);
        t.accum(ib, gbias);
    });
    return {x.tape, id};
}

// Per-channel batch statistics; running stats live outside the tape.
template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    bool initialized = false;

    explicit BatchNormState(std::int64_t channels = 0) {
        if (channels > 0) {
            running_mean = Tensor<T>({channels}, T(0));
            running_var = Tensor<T>({channels}, T(1));
        }
    }
};

template <typename T>
Var<T> batch_norm2d(Var<T> x, Var<T> gain, Var<T> bias, BatchNormState<T>* state, bool train,
                    T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.shape().size() != 4) throw InvariantError("batch_norm2d: expected [B,C,H,W]");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gain.shape() != Shape{C} || bias.shape() != Shape{C})
        throw InvariantError("batch_norm2d: gain/bias must be [C]");
    const std::int64_t plane = H * W;
    const std::int64_t m = B * plane;

    auto xhat = std::make_shared<Tensor<T>>(Shape{B, C, H, W});
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
    Tensor<T> out({B, C, H, W});

    if (train) {
        for (std::int64_t c = 0; c < C; ++c) {
            T mean = 0;
            for (std::int64_t n = 0; n < B; ++n) {
                const T* p = x.val().data.data() + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) mean += p[i];
            }
            mean /= static_cast<T>(m);
            T var = 0;
            for (std::int64_t n = 0; n < B; ++n) {
                const T* p = x.val().data.data() + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const T d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<T>(m);
            const T inv = T(1) / std::sqrt(var + eps);
            (*inv_std)[c] = inv;
            const T gc = gain.val()[c], bc = bias.val()[c];
            for (std::int64_t n = 0; n < B; ++n) {
                const T* p = x.val().data.data() + (n * C + c) * plane;
                T* xh = xhat->data.data() + (n * C + c) * plane;
                T* o = out.data.data() + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    xh[i] = (p[i] - mean) * inv;
                    o[i] = gc * xh[i] + bc;
                }
            }
            if (state) {
                const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
                state->running_mean[c] = (T(1) - momentum) * state->running_mean[c] + momentum * mean;
                state->running_var[c] = (T(1) - momentum) * state->running_var[c] + momentum * unbiased;
            }
        }
        if (state) state->initialized = true;
    } else {
        if (!state || !state->initialized)
            throw InvariantError("batch_norm2d: eval mode with uninitialized running stats");
        for (std::int64_t c = 0; c < C; ++c) {
            const T inv = T(1) / std::sqrt(state->running_var[c] + eps);
            (*inv_std)[c] = inv;
            const T mean = state->running_mean[c];
            const T gc = gain.val()[c], bc = bias.val()[c];
            for (std::int64_t n = 0; n < B; ++n) {
                const T* p = x.val().data.data() + (n * C + c) * plane;
                T* xh = xhat->data.data() + (n * C + c) * plane;
                T* o = out.data.data() + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    xh[i] = (p[i] - mean) * inv;
                    o[i] = gc * xh[i] + bc;
                }
            }
        }
    }

    const int ix = x.id, ig = gain.id, ib = bias.id;
    int id = x.tape->make("batch_norm2d", std::move(out), {ix, ig, ib},
                          [ix, ig, ib, B, C, plane, m, train, xhat, inv_std](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& gainv = t.val(ig);
        Tensor<T> gx(t.val(ix).shape), ggain({C}), gbias({C});
        for (std::int64_t c = 0; c < C; ++c) {
            T sum_g = 0, sum_g_xh = 0;
            for (std::int64_t n = 0; n < B; ++n) {
                const T* gr = g.data.data() + (n * C + c) * plane;
                const T* xh = xhat->data.data() + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum_g += gr[i];
                    sum_g_xh += gr[i] * xh[i];
                }
            }
            ggain[c] = sum_g_xh;
            gbias[c] = sum_g;
            const T inv = (*inv_std)[c];
            const T gc = gainv[c];
            if (train) {
                const T invm = T(1) / static_cast<T>(m);
                for (std::int64_t n = 0; n < B; ++n) {
                    const T* gr = g.data.data() + (n * C + c) * plane;
                    const T* xh = xhat->data.data() + (n * C + c) * plane;
                    T* gxr = gx.data.data() + (n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i)
                        gxr[i] = gc * inv *
                                 (gr[i] - sum_g * invm - xh[i] * sum_g_xh * invm);
                }
            } else {
                for (std::int64_t n = 0; n < B; ++n) {
                    const T* gr = g.data.data() + (n * C + c) * plane;
                    T* gxr = gx.data.data() + (n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) gxr[i] = gc * inv * gr[i];
                }
            }
        }
        t.accum(ix, gx);
        t.accum(ig, ggain);
        t.accum(ib, gbias);
    });
    return {x.tape, id};
}

// ---- convolution ----

// Difference convolution: out(p0) = sum_i w_i * (x_i - theta * x_center),
// zero padding, odd square kernels. theta == 0 is the standard convolution
// path, bit for bit.
template <typename T>
Var<T> diff_conv2d(Var<T> x, Var<T> w, T theta, int stride, int padding) {
    if (x.shape().size() != 4 || w.shape().size() != 4)
        throw InvariantError("diff_conv2d: expected x[B,C,H,W], w[O,C,K,K]");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t O = w.dim(0), K = w.dim(2);
    if (w.dim(1) != C || w.dim(3) != K)
        throw InvariantError("diff_conv2d: weight shape " + shape_str(w.shape()) +
                             " incompatible with input " + shape_str(x.shape()));
    if (!(theta >= T(0) && theta <= T(1))) throw InputError("diff_conv2d: theta out of [0,1]");
    // the center term needs a center pixel; plain convolution (theta == 0) does not
    if (theta != T(0) && K % 2 == 0)
        throw InputError("diff_conv2d: kernel size must be odd when theta != 0");
    if (stride < 1 || padding < 0) throw InputError("diff_conv2d: bad stride/padding");
    const std::int64_t Ho = (H + 2 * padding - K) / stride + 1;
    const std::int64_t Wo = (W + 2 * padding - K) / stride + 1;
    if (Ho < 1 || Wo < 1) throw InputError("diff_conv2d: output would be empty");
    const std::int64_t kc = K / 2;

    // kernel sums per (o,c) for the center term
    std::vector<T> wsum;
    if (theta != T(0)) {
        wsum.assign(static_cast<std::size_t>(O * C), T(0));
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t c = 0; c < C; ++c) {
                T s = 0;
                const T* wr = w.val().data.data() + (o * C + c) * K * K;
                for (std::int64_t i = 0; i < K * K; ++i) s += wr[i];
                wsum[o * C + c] = s;
            }
    }

    // valid output range for one kernel tap: the in-bounds span of
    // i = o*stride - padding + k over an input extent of `limit`
    auto tap_range = [stride, padding](std::int64_t k, std::int64_t limit,
                                       std::int64_t out_limit) {
        const std::int64_t lo_num = padding - k;
        const std::int64_t lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
        const std::int64_t hi_num = limit - 1 - k + padding;
        const std::int64_t hi = hi_num < 0 ? -1 : std::min(out_limit - 1, hi_num / stride);
        return std::pair<std::int64_t, std::int64_t>(lo, hi);
    };

    Tensor<T> out({B, O, Ho, Wo});
    {
        const T* X = x.val().data.data();
        const T* Wt = w.val().data.data();
        parallel_for(B, [&](std::int64_t n) {
            for (std::int64_t o = 0; o < O; ++o) {
                T* out_plane = out.data.data() + (n * O + o) * Ho * Wo;
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* xp = X + (n * C + c) * H * W;
                    const T* wp = Wt + (o * C + c) * K * K;
                    auto accumulate_tap = [&](std::int64_t ki, std::int64_t kj, T alpha) {
                        if (alpha == T(0)) return;
                        const auto [oy_lo, oy_hi] = tap_range(ki, H, Ho);
                        const auto [ox_lo, ox_hi] = tap_range(kj, W, Wo);
                        const std::int64_t shift = kj - padding;
                        for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                            const T* xr = xp + (oy * stride - padding + ki) * W;
                            T* orow = out_plane + oy * Wo;
                            if (stride == 1) {
                                for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                    orow[ox] += alpha * xr[ox + shift];
                            } else {
                                for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                    orow[ox] += alpha * xr[ox * stride + shift];
                            }
                        }
                    };
                    for (std::int64_t ki = 0; ki < K; ++ki)
                        for (std::int64_t kj = 0; kj < K; ++kj)
                            accumulate_tap(ki, kj, wp[ki * K + kj]);
                    if (theta != T(0)) accumulate_tap(kc, kc, -theta * wsum[o * C + c]);
                }
            }
        });
    }

    const int ix_id = x.id, iw_id = w.id;
    auto wsum_sp = std::make_shared<std::vector<T>>(std::move(wsum));
    int id = x.tape->make(
        "diff_conv2d", std::move(out), {ix_id, iw_id},
        [ix_id, iw_id, theta, stride, padding, B, C, H, W, O, K, Ho, Wo, kc, wsum_sp,
         tap_range](Tape<T>& t, int self) {
            const Tensor<T>& g = t.grad(self);
            const Tensor<T>& xv = t.val(ix_id);
            const Tensor<T>& wv = t.val(iw_id);
            const T* X = xv.data.data();
            const T* Wt = wv.data.data();
            const T* G = g.data.data();

            Tensor<T> gx({B, C, H, W});
            const std::int64_t wnum = O * C * K * K;
            std::vector<T> gw_per_sample(static_cast<std::size_t>(B * wnum), T(0));

            parallel_for(B, [&](std::int64_t n) {
                T* gxp = gx.data.data() + n * C * H * W;
                T* gwp = gw_per_sample.data() + n * wnum;
                for (std::int64_t o = 0; o < O; ++o) {
                    const T* gplane = G + (n * O + o) * Ho * Wo;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* xc = X + (n * C + c) * H * W;
                        const T* wp = Wt + (o * C + c) * K * K;
                        T* gxc = gxp + c * H * W;
                        T* gwc = gwp + (o * C + c) * K * K;

                        // input gradient: scatter g through each tap
                        auto scatter_tap = [&](std::int64_t ki, std::int64_t kj, T alpha) {
                            if (alpha == T(0)) return;
                            const auto [oy_lo, oy_hi] = tap_range(ki, H, Ho);
                            const auto [ox_lo, ox_hi] = tap_range(kj, W, Wo);
                            const std::int64_t shift = kj - padding;
                            for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                                const T* grow = gplane + oy * Wo;
                                T* gxr = gxc + (oy * stride - padding + ki) * W;
                                if (stride == 1) {
                                    for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                        gxr[ox + shift] += alpha * grow[ox];
                                } else {
                                    for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                        gxr[ox * stride + shift] += alpha * grow[ox];
                                }
                            }
                        };
                        // weight gradient: correlate g with the tap's window
                        auto gather_tap = [&](std::int64_t ki, std::int64_t kj) {
                            const auto [oy_lo, oy_hi] = tap_range(ki, H, Ho);
                            const auto [ox_lo, ox_hi] = tap_range(kj, W, Wo);
                            T acc = 0;
                            const std::int64_t shift = kj - padding;
                            for (std::int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                                const T* grow = gplane + oy * Wo;
                                const T* xr = xc + (oy * stride - padding + ki) * W;
                                if (stride == 1) {
                                    for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                        acc += grow[ox] * xr[ox + shift];
                                } else {
                                    for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                                        acc += grow[ox] * xr[ox * stride + shift];
                                }
                            }
                            return acc;
                        };

                        for (std::int64_t ki = 0; ki < K; ++ki)
                            for (std::int64_t kj = 0; kj < K; ++kj) {
                                scatter_tap(ki, kj, wp[ki * K + kj]);
                                gwc[ki * K + kj] += gather_tap(ki, kj);
                            }
                        if (theta != T(0)) {
                            const T ws = (*wsum_sp)[o * C + c];
                            scatter_tap(kc, kc, -theta * ws);
                            // d out / d w_i carries -theta * x_center for every tap
                            const T center_corr = theta * gather_tap(kc, kc);
                            for (std::int64_t i = 0; i < K * K; ++i) gwc[i] -= center_corr;
                        }
                    }
                }
            });

            // fixed sample order keeps the reduction deterministic
            Tensor<T> gw(wv.shape);
            for (std::int64_t n = 0; n < B; ++n) {
                const T* p = gw_per_sample.data() + n * wnum;
                for (std::int64_t i = 0; i < wnum; ++i) gw[i] += p[i];
            }
            t.accum(ix_id, gx);
            t.accum(iw_id, gw);
        });
    return {x.tape, id};
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, int stride, int padding) {
    return diff_conv2d(x, w, T(0), stride, padding);
}

// ---- losses and misc ----

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels) {
    if (logits.shape().size() != 2) throw InvariantError("cross_entropy: expected [B,N]");
    const std::int64_t B = logits.dim(0), N = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw InvariantError("cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= N)
            throw InputError("cross_entropy: label " + std::to_string(y) + " out of [0," +
                             std::to_string(N) + ")");
    auto probs = std::make_shared<Tensor<T>>(Shape{B, N});
    T loss = 0;
    for (std::int64_t r = 0; r < B; ++r) {
        const T* z = logits.val().data.data() + r * N;
        T mx = z[0];
        for (std::int64_t i = 1; i < N; ++i) mx = std::max(mx, z[i]);
        T sum = 0;
        for (std::int64_t i = 0; i < N; ++i) {
            const T e = std::exp(z[i] - mx);
            (*probs)[r * N + i] = e;
            sum += e;
        }
        for (std::int64_t i = 0; i < N; ++i) (*probs)[r * N + i] /= sum;
        loss += std::log(sum) + mx - z[labels[static_cast<std::size_t>(r)]];
    }
    loss /= static_cast<T>(B);
    const int iz = logits.id;
    auto labels_sp = std::make_shared<std::vector<int>>(labels);
    int id = logits.tape->make("cross_entropy", Tensor<T>::scalar(loss), {iz},
                               [iz, B, N, probs, labels_sp](Tape<T>& t, int self) {
        const T g = t.grad(self)[0];
        Tensor<T> gz({B, N});
        const T invB = T(1) / static_cast<T>(B);
        for (std::int64_t r = 0; r < B; ++r)
            for (std::int64_t i = 0; i < N; ++i) {
                T v = (*probs)[r * N + i];
                if (i == (*labels_sp)[static_cast<std::size_t>(r)]) v -= T(1);
                gz[r * N + i] = g * v * invB;
            }
        t.accum(iz, gz);
    });
    return {logits.tape, id};
}

// Inverted dropout; identity in eval mode or when p == 0.
template <typename T>
Var<T> dropout(Var<T> x, double p, Rng& rng, bool train) {
    if (p < 0.0 || p >= 1.0) throw InputError("dropout: p must be in [0,1)");
    if (!train || p == 0.0) return x;
    auto mask = std::make_shared<Tensor<T>>(x.shape());
    const T keep_scale = T(1.0 / (1.0 - p));
    Tensor<T> out(x.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const T mv = rng.bernoulli(p) ? T(0) : keep_scale;
        (*mask)[i] = mv;
        out[i] = x.val()[i] * mv;
    }
    const int ix = x.id;
    int id = x.tape->make("dropout", std::move(out), {ix}, [ix, mask](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T> gx(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = g[i] * (*mask)[i];
        t.accum(ix, gx);
    });
    return {x.tape, id};
}

template <typename T>
Var<T> l2_normalize_rows(Var<T> x) {
    if (x.shape().size() != 2) throw InvariantError("l2_normalize_rows: expected [B,D]");
    const std::int64_t B = x.dim(0), D = x.dim(1);
    auto inv_norm = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B));
    Tensor<T> out({B, D});
    for (std::int64_t r = 0; r < B; ++r) {
        const T* xr = x.val().data.data() + r * D;
        T n2 = 0;
        for (std::int64_t i = 0; i < D; ++i) n2 += xr[i] * xr[i];
        if (n2 == T(0)) throw InvariantError("l2_normalize_rows: zero-norm row");
        const T inv = T(1) / std::sqrt(n2);
        (*inv_norm)[r] = inv;
        for (std::int64_t i = 0; i < D; ++i) out[r * D + i] = xr[i] * inv;
    }
    const int ix = x.id;
    int id = x.tape->make("l2_normalize_rows", std::move(out), {ix},
                          [ix, B, D, inv_norm](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv = t.val(ix);
        Tensor<T> gx({B, D});
        for (std::int64_t r = 0; r < B; ++r) {
            const T* gr = g.data.data() + r * D;
            const T* xr = xv.data.data() + r * D;
            const T inv = (*inv_norm)[r];
            T dot = 0;
            for (std::int64_t i = 0; i < D; ++i) dot += gr[i] * xr[i];
            for (std::int64_t i = 0; i < D; ++i)
                gx[r * D + i] = gr[i] * inv - xr[i] * dot * inv * inv * inv;
        }
        t.accum(ix, gx);
    });
    return {x.tape, id};
}

}  // namespace phenokit
