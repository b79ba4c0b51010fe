#include "vinpaint/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "vinpaint/kernels.hpp"

namespace vinpaint {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Shape shape_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& order) {
    std::vector<std::size_t> inv(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) inv[order[i]] = i;
    return inv;
}

template <typename T>
Tensor<T> reshape_view(const Tensor<T>& x, const Shape& new_shape) {
    if (new_shape.empty() || shape_numel(new_shape) != x.size()) {
        throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(new_shape));
    }
    return Tensor<T>(new_shape, x.values());
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axis_order) {
    const std::size_t r = x.rank();
    if (axis_order.size() != r) throw std::invalid_argument("permutation rank mismatch");
    std::vector<bool> seen(r, false);
    for (std::size_t a : axis_order) {
        if (a >= r || seen[a]) throw std::invalid_argument("axis order is not a permutation");
        seen[a] = true;
    }
    Shape out_shape(r);
    for (std::size_t k = 0; k < r; ++k) out_shape[k] = x.shape()[axis_order[k]];
    Tensor<T> out(out_shape);

    const Shape in_strides = shape_strides(x.shape());
    Shape src_stride(r);  // stride in the input for each output axis
    for (std::size_t k = 0; k < r; ++k) src_stride[k] = in_strides[axis_order[k]];

    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    auto dst = out.data();
    auto in = x.data();
    for (std::size_t o = 0; o < out.size(); ++o) {
        dst[o] = in[src];
        for (std::size_t k = r; k-- > 0;) {
            ++idx[k];
            src += src_stride[k];
            if (idx[k] < out_shape[k]) break;
            src -= src_stride[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    return out;
}

template <typename T>
Tensor<T> spatial_resize(const Tensor<T>& x, std::size_t out_w, std::size_t out_h, ResizeMode mode) {
    if (x.rank() < 2) throw ShapeError("spatial_resize needs rank >= 2");
    if (out_w == 0 || out_h == 0) throw std::invalid_argument("resize target must be >= 1");
    const std::size_t in_w = x.dim(-2), in_h = x.dim(-1);
    if (in_w == out_w && in_h == out_h) return x;
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = out_w;
    out_shape[out_shape.size() - 1] = out_h;
    Tensor<T> out(out_shape);
    const auto aw = kernels::make_resize_axis(in_w, out_w, mode);
    const auto ah = kernels::make_resize_axis(in_h, out_h, mode);
    kernels::parallel::resize_planes(x.data().data(), out.data().data(), x.size() / (in_w * in_h),
                                     in_w, in_h, aw, ah);
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul operands need rank >= 2");
    const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
    if (k != kb) {
        throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    // Broadcast leading batch axes, aligned from the right.
    const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    const std::size_t br = std::max(a_batch.size(), b_batch.size());
    Shape batch(br, 1);
    for (std::size_t i = 0; i < br; ++i) {
        const std::size_t da = i < br - a_batch.size() ? 1 : a_batch[i - (br - a_batch.size())];
        const std::size_t db = i < br - b_batch.size() ? 1 : b_batch[i - (br - b_batch.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("matmul batch dims not broadcastable: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
        }
        batch[i] = std::max(da, db);
    }
    const std::size_t nbatch = shape_numel(batch);
    kernels::GemmBatch g{m, k, n, {}, {}};
    g.a_offsets.resize(nbatch);
    g.b_offsets.resize(nbatch);
    std::vector<std::size_t> idx(br, 0);
    for (std::size_t t = 0; t < nbatch; ++t) {
        std::size_t ao = 0, bo = 0;
        for (std::size_t i = 0; i < br; ++i) {
            if (i >= br - a_batch.size()) {
                const std::size_t d = a_batch[i - (br - a_batch.size())];
                ao = ao * d + (d == 1 ? 0 : idx[i]);
            }
            if (i >= br - b_batch.size()) {
                const std::size_t d = b_batch[i - (br - b_batch.size())];
                bo = bo * d + (d == 1 ? 0 : idx[i]);
            }
        }
        g.a_offsets[t] = ao * m * k;
        g.b_offsets[t] = bo * k * n;
        for (std::size_t i = br; i-- > 0;) {
            if (++idx[i] < batch[i]) break;
            idx[i] = 0;
        }
    }
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);
    kernels::parallel::gemm(a.data().data(), b.data().data(), out.data().data(), g);
    return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, long axis) {
    const std::size_t ax = x.normalize_axis(axis);
    if (ax == x.rank() - 1) {
        Tensor<T> out(x.shape());
        kernels::parallel::softmax_rows(x.data().data(), out.data().data(), x.size() / x.dim(-1),
                                        x.dim(-1));
        return out;
    }
    std::vector<std::size_t> order(x.rank());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::swap(order[ax], order.back());
    return permute(softmax(permute(x, order), -1), order);
}

template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads) {
    if (q.rank() < 2 || q.rank() != k.rank() || q.rank() != v.rank()) {
        throw ShapeError("attention operands need equal rank >= 2");
    }
    const Shape lead(q.shape().begin(), q.shape().end() - 2);
    if (!std::equal(lead.begin(), lead.end(), k.shape().begin()) ||
        !std::equal(lead.begin(), lead.end(), v.shape().begin())) {
        throw ShapeError("attention batch dims differ");
    }
    kernels::AttentionDims d;
    d.batch = shape_numel(lead);
    d.lq = q.dim(-2);
    d.d = q.dim(-1);
    d.lk = k.dim(-2);
    d.dv = v.dim(-1);
    d.heads = heads;
    if (k.dim(-1) != d.d) throw ShapeError("query/key feature dims differ");
    if (v.dim(-2) != d.lk) throw ShapeError("key/value lengths differ");
    if (heads == 0 || d.d % heads != 0 || d.dv % heads != 0) {
        throw std::invalid_argument("feature dims not divisible by head count " +
                                    std::to_string(heads));
    }
    Shape out_shape = lead;
    out_shape.push_back(d.lq);
    out_shape.push_back(d.dv);
    Tensor<T> out(out_shape);
    kernels::parallel::attention(q.data().data(), k.data().data(), v.data().data(),
                                 out.data().data(), d);
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<const Tensor<T>*>& parts, long axis) {
    if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
    const std::size_t ax = parts.front()->normalize_axis(axis);
    Shape out_shape = parts.front()->shape();
    out_shape[ax] = 0;
    for (const auto* p : parts) {
        if (p->rank() != out_shape.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < p->rank(); ++i) {
            if (i != ax && p->shape()[i] != out_shape[i]) {
                throw ShapeError("concat shape mismatch: " + shape_str(p->shape()));
            }
        }
        out_shape[ax] += p->shape()[ax];
    }
    Tensor<T> out(out_shape);
    const std::size_t outer = shape_numel(Shape(out_shape.begin(), out_shape.begin() + ax));
    const std::size_t inner = shape_numel(Shape(out_shape.begin() + ax + 1, out_shape.end()));
    auto dst = out.data();
    std::size_t pos = 0;
    for (std::size_t o = 0; o < outer; ++o) {
        for (const auto* p : parts) {
            const std::size_t chunk = p->shape()[ax] * inner;
            std::copy_n(p->data().begin() + o * chunk, chunk, dst.begin() + pos);
            pos += chunk;
        }
    }
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = x.normalize_axis(axis);
    if (begin >= end || end > x.shape()[ax]) throw std::invalid_argument("invalid slice range");
    Shape out_shape = x.shape();
    out_shape[ax] = end - begin;
    Tensor<T> out(out_shape);
    const std::size_t outer = shape_numel(Shape(x.shape().begin(), x.shape().begin() + ax));
    const std::size_t inner = shape_numel(Shape(x.shape().begin() + ax + 1, x.shape().end()));
    const std::size_t in_chunk = x.shape()[ax] * inner;
    const std::size_t out_chunk = out_shape[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(x.data().begin() + o * in_chunk + begin * inner, out_chunk,
                    out.data().begin() + o * out_chunk);
    }
    return out;
}

namespace {
template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}
}  // namespace

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * a[i];
    return out;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
    T m = 0;
    for (T v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

#define VINPAINT_INSTANTIATE_TENSOR_OPS(T)                                                       \
    template Tensor<T> reshape_view(const Tensor<T>&, const Shape&);                             \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);               \
    template Tensor<T> spatial_resize(const Tensor<T>&, std::size_t, std::size_t, ResizeMode);   \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> softmax(const Tensor<T>&, long);                                          \
    template Tensor<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&,                  \
                                            const Tensor<T>&, std::size_t);                      \
    template Tensor<T> concat(const std::vector<const Tensor<T>*>&, long);                       \
    template Tensor<T> slice(const Tensor<T>&, long, std::size_t, std::size_t);                  \
    template Tensor<T> operator+(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> operator-(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> operator*(T, const Tensor<T>&);                                           \
    template T max_abs(const Tensor<T>&);                                                        \
    template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);

VINPAINT_INSTANTIATE_TENSOR_OPS(float)
VINPAINT_INSTANTIATE_TENSOR_OPS(double)

#undef VINPAINT_INSTANTIATE_TENSOR_OPS

}  // namespace vinpaint
