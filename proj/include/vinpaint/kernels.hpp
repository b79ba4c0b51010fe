#pragma once

// Raw loop kernels behind the tensor operations. Every kernel has a plain
// serial form, kept as the reference the OpenMP form is tested and
// benchmarked against. Both forms produce bit-identical results: the
// parallel versions only split independent output rows across threads and
// never reorder a reduction.

#include <cstddef>
#include <vector>

#include "vinpaint/tensor.hpp"

namespace vinpaint::kernels {

/// One batched GEMM: for batch i, C_i[m,n] = A[a_offsets[i]] (m×k) · B[b_offsets[i]] (k×n).
/// C is written densely at i·m·n.
struct GemmBatch {
    std::size_t m = 0, k = 0, n = 0;
    std::vector<std::size_t> a_offsets;
    std::vector<std::size_t> b_offsets;
};

/// Interpolation table for one axis: out[o] = w0·in[i0] + w1·in[i1].
struct ResizeAxis {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w0, w1;
};

ResizeAxis make_resize_axis(std::size_t in, std::size_t out, ResizeMode mode);

struct AttentionDims {
    std::size_t batch = 1, lq = 1, lk = 1, d = 1, dv = 1, heads = 1;
};

namespace serial {

template <typename T>
void gemm(const T* a, const T* b, T* c, const GemmBatch& g);

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols);

/// `planes` independent 2-D planes of in_w×in_h resized to ax_w.size()×ax_h.size().
template <typename T>
void resize_planes(const T* x, T* y, std::size_t planes, std::size_t in_w, std::size_t in_h,
                   const ResizeAxis& ax_w, const ResizeAxis& ax_h);

/// Transpose of resize_planes: accumulates output-space gradients into input space.
template <typename T>
void resize_planes_adjoint(const T* gy, T* gx, std::size_t planes, std::size_t in_w,
                           std::size_t in_h, const ResizeAxis& ax_w, const ResizeAxis& ax_h);

template <typename T>
void attention(const T* q, const T* k, const T* v, T* out, const AttentionDims& dims);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(const T* a, const T* b, T* c, const GemmBatch& g);

template <typename T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols);

template <typename T>
void resize_planes(const T* x, T* y, std::size_t planes, std::size_t in_w, std::size_t in_h,
                   const ResizeAxis& ax_w, const ResizeAxis& ax_h);

template <typename T>
void resize_planes_adjoint(const T* gy, T* gx, std::size_t planes, std::size_t in_w,
                           std::size_t in_h, const ResizeAxis& ax_w, const ResizeAxis& ax_h);

template <typename T>
void attention(const T* q, const T* k, const T* v, T* out, const AttentionDims& dims);

}  // namespace parallel

}  // namespace vinpaint::kernels
