#include "vinpaint/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vinpaint::kernels {

ResizeAxis make_resize_axis(std::size_t in, std::size_t out, ResizeMode mode) {
    ResizeAxis ax;
    ax.i0.resize(out);
    ax.i1.resize(out);
    ax.w0.resize(out);
    ax.w1.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        if (in == out) {
            ax.i0[o] = ax.i1[o] = o;
            ax.w0[o] = 1.0;
            ax.w1[o] = 0.0;
            continue;
        }
        if (mode == ResizeMode::nearest) {
            const auto src = std::min(in - 1, static_cast<std::size_t>(std::floor(o * scale)));
            ax.i0[o] = ax.i1[o] = src;
            ax.w0[o] = 1.0;
            ax.w1[o] = 0.0;
            continue;
        }
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(src));
        const std::size_t hi = std::min(lo + 1, in - 1);
        const double frac = src - static_cast<double>(lo);
        ax.i0[o] = lo;
        ax.i1[o] = hi;
        ax.w0[o] = 1.0 - frac;
        ax.w1[o] = frac;
    }
    return ax;
}

namespace {

template <typename T>
void gemm_one(const T* a, const T* b, T* c, std::size_t row, std::size_t k, std::size_t n) {
    T* crow = c + row * n;
    std::fill(crow, crow + n, T{0});
    const T* arow = a + row * k;
    for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

template <typename T>
void softmax_one(const T* x, T* y, std::size_t cols) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
    if (std::isnan(mx)) mx = 0;  // NaN inputs propagate through exp
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= sum;
}

template <typename T>
void resize_one(const T* x, T* y, std::size_t in_h, const ResizeAxis& aw, const ResizeAxis& ah) {
    const std::size_t out_w = aw.i0.size();
    const std::size_t out_h = ah.i0.size();
    for (std::size_t ow = 0; ow < out_w; ++ow) {
        const T* r0 = x + aw.i0[ow] * in_h;
        const T* r1 = x + aw.i1[ow] * in_h;
        const T ww0 = static_cast<T>(aw.w0[ow]);
        const T ww1 = static_cast<T>(aw.w1[ow]);
        for (std::size_t oh = 0; oh < out_h; ++oh) {
            const T wh0 = static_cast<T>(ah.w0[oh]);
            const T wh1 = static_cast<T>(ah.w1[oh]);
            const std::size_t h0 = ah.i0[oh], h1 = ah.i1[oh];
            T v = ww0 * (wh0 * r0[h0] + wh1 * r0[h1]);
            if (ww1 != T{0}) v += ww1 * (wh0 * r1[h0] + wh1 * r1[h1]);
            y[ow * out_h + oh] = v;
        }
    }
}

template <typename T>
void resize_adjoint_one(const T* gy, T* gx, std::size_t in_h, const ResizeAxis& aw,
                        const ResizeAxis& ah) {
    const std::size_t out_w = aw.i0.size();
    const std::size_t out_h = ah.i0.size();
    for (std::size_t ow = 0; ow < out_w; ++ow) {
        T* r0 = gx + aw.i0[ow] * in_h;
        T* r1 = gx + aw.i1[ow] * in_h;
        const T ww0 = static_cast<T>(aw.w0[ow]);
        const T ww1 = static_cast<T>(aw.w1[ow]);
        for (std::size_t oh = 0; oh < out_h; ++oh) {
            const T g = gy[ow * out_h + oh];
            const T wh0 = static_cast<T>(ah.w0[oh]);
            const T wh1 = static_cast<T>(ah.w1[oh]);
            const std::size_t h0 = ah.i0[oh], h1 = ah.i1[oh];
            r0[h0] += ww0 * wh0 * g;
            r0[h1] += ww0 * wh1 * g;
            r1[h0] += ww1 * wh0 * g;
            r1[h1] += ww1 * wh1 * g;
        }
    }
}

// One (batch, head, query) row of multi-head attention.
template <typename T>
void attention_row(const T* q, const T* k, const T* v, T* out, const AttentionDims& d,
                   std::size_t b, std::size_t h, std::size_t i, std::vector<T>& scores) {
    const std::size_t dh = d.d / d.heads;
    const std::size_t dvh = d.dv / d.heads;
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
    const T* qrow = q + (b * d.lq + i) * d.d + h * dh;
    scores.resize(d.lk);
    for (std::size_t j = 0; j < d.lk; ++j) {
        const T* krow = k + (b * d.lk + j) * d.d + h * dh;
        T s = 0;
        for (std::size_t p = 0; p < dh; ++p) s += qrow[p] * krow[p];
        scores[j] = s * inv_sqrt;
    }
    softmax_one(scores.data(), scores.data(), d.lk);
    T* orow = out + (b * d.lq + i) * d.dv + h * dvh;
    std::fill(orow, orow + dvh, T{0});
    for (std::size_t j = 0; j < d.lk; ++j) {
        const T* vrow = v + (b * d.lk + j) * d.dv + h * dvh;
        for (std::size_t p = 0; p < dvh; ++p) orow[p] += scores[j] * vrow[p];
    }
}

}  // namespace

namespace serial {

template <typename T>
void gemm(const T* a, const T* b, T* c, const GemmBatch& g) {
    for (std::size_t i = 0; i < g.a_offsets.size(); ++i) {
        for (std::size_t r = 0; r < g.m; ++r) {
            gemm_one(a + g.a_offsets[i], b + g.b_offsets[i], c + i * g.m * g.n, r, g.k, g.n);
        }
    }
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) softmax_one(x + r * cols, y + r * cols, cols);
}

template <typename T>
void resize_planes(const T* x, T* y, std::size_t planes, std::size_t in_w, std::size_t in_h,
                   const ResizeAxis& aw, const ResizeAxis& ah) {
    const std::size_t out_plane = aw.i0.size() * ah.i0.size();
    for (std::size_t p = 0; p < planes; ++p) {
        resize_one(x + p * in_w * in_h, y + p * out_plane, in_h, aw, ah);
    }
}

template <typename T>
void resize_planes_adjoint(const T* gy, T* gx, std::size_t planes, std::size_t in_w,
                           std::size_t in_h, const ResizeAxis& aw, const ResizeAxis& ah) {
    const std::size_t out_plane = aw.i0.size() * ah.i0.size();
    for (std::size_t p = 0; p < planes; ++p) {
        resize_adjoint_one(gy + p * out_plane, gx + p * in_w * in_h, in_h, aw, ah);
    }
}

template <typename T>
void attention(const T* q, const T* k, const T* v, T* out, const AttentionDims& d) {
    std::vector<T> scores;
    for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t h = 0; h < d.heads; ++h)
            for (std::size_t i = 0; i < d.lq; ++i) attention_row(q, k, v, out, d, b, h, i, scores);
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(const T* a, const T* b, T* c, const GemmBatch& g) {
    const auto batch = static_cast<long>(g.a_offsets.size());
    const auto m = static_cast<long>(g.m);
#pragma omp parallel for collapse(2) schedule(static)
    for (long i = 0; i < batch; ++i) {
        for (long r = 0; r < m; ++r) {
            gemm_one(a + g.a_offsets[i], b + g.b_offsets[i], c + i * g.m * g.n,
                     static_cast<std::size_t>(r), g.k, g.n);
        }
    }
}

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
    const auto n = static_cast<long>(rows);
#pragma omp parallel for schedule(static)
    for (long r = 0; r < n; ++r) softmax_one(x + r * cols, y + r * cols, cols);
}

template <typename T>
void resize_planes(const T* x, T* y, std::size_t planes, std::size_t in_w, std::size_t in_h,
                   const ResizeAxis& aw, const ResizeAxis& ah) {
    const std::size_t out_plane = aw.i0.size() * ah.i0.size();
    const auto n = static_cast<long>(planes);
#pragma omp parallel for schedule(static)
    for (long p = 0; p < n; ++p) {
        resize_one(x + p * in_w * in_h, y + p * out_plane, in_h, aw, ah);
    }
}

template <typename T>
void resize_planes_adjoint(const T* gy, T* gx, std::size_t planes, std::size_t in_w,
                           std::size_t in_h, const ResizeAxis& aw, const ResizeAxis& ah) {
    const std::size_t out_plane = aw.i0.size() * ah.i0.size();
    const auto n = static_cast<long>(planes);
#pragma omp parallel for schedule(static)
    for (long p = 0; p < n; ++p) {
        resize_adjoint_one(gy + p * out_plane, gx + p * in_w * in_h, in_h, aw, ah);
    }
}

template <typename T>
void attention(const T* q, const T* k, const T* v, T* out, const AttentionDims& d) {
    const auto total = static_cast<long>(d.batch * d.heads * d.lq);
#pragma omp parallel
    {
        std::vector<T> scores;
#pragma omp for schedule(static)
        for (long idx = 0; idx < total; ++idx) {
            const auto u = static_cast<std::size_t>(idx);
            const std::size_t i = u % d.lq;
            const std::size_t h = (u / d.lq) % d.heads;
            const std::size_t b = u / (d.lq * d.heads);
            attention_row(q, k, v, out, d, b, h, i, scores);
        }
    }
}

}  // namespace parallel

#define VINPAINT_INSTANTIATE_KERNELS(NS, T)                                                       \
    template void NS::gemm<T>(const T*, const T*, T*, const GemmBatch&);                          \
    template void NS::softmax_rows<T>(const T*, T*, std::size_t, std::size_t);                    \
    template void NS::resize_planes<T>(const T*, T*, std::size_t, std::size_t, std::size_t,      \
                                       const ResizeAxis&, const ResizeAxis&);                     \
    template void NS::resize_planes_adjoint<T>(const T*, T*, std::size_t, std::size_t,            \
                                               std::size_t, const ResizeAxis&, const ResizeAxis&); \
    template void NS::attention<T>(const T*, const T*, const T*, T*, const AttentionDims&);

VINPAINT_INSTANTIATE_KERNELS(serial, float)
VINPAINT_INSTANTIATE_KERNELS(serial, double)
VINPAINT_INSTANTIATE_KERNELS(parallel, float)
VINPAINT_INSTANTIATE_KERNELS(parallel, double)

#undef VINPAINT_INSTANTIATE_KERNELS

}  // namespace vinpaint::kernels
